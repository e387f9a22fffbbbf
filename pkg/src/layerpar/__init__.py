"""Layer-parallel training of residual networks with multigrid in time."""

from .adjoint import AdjointSystem, adjoint_mgrit_solve, serial_backprop
from .config import RunConfig, mnist_config, peaks_config, toy_config
from .data import Dataset, generate_peaks, load_csv, load_mnist, make_toy
from .mgrit import (
    ForwardPropagator,
    GridHierarchy,
    build_hierarchy,
    fas_cycle,
    mgrit_solve,
    serial_propagate,
)
from .network import Conv, Dense, Network, NetworkControls, Regularization
from .optimizer import train_serial, train_simultaneous, validation_accuracy

__version__ = "0.1.0"
