"""Flat run configuration shared by the training routines and the command line."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .mgrit import ConfigurationError, build_hierarchy
from .network import Conv, Dense, DimensionError, Network, Regularization, get_activation


@dataclass
class RunConfig:
    # test case and data
    test_case: str = "peaks"  # peaks | mnist | csv | toy
    samples: int = 500
    limit: int = 500
    val_fraction: float = 0.2
    images_path: str = ""
    labels_path: str = ""
    csv_path: str = ""
    csv_classes: int = 2
    csv_header: bool = False
    standardize: bool = True
    # network
    width: int = 8
    layers: int = 32
    final_time: float = 5.0
    layer_kind: str = "dense"
    activation: str = "smoothrelu"
    channels: int = 8
    image_size: int = 28
    opening: str = "dense"
    opening_activation: bool = True
    # mgrit
    coarsening: int = 4
    coarsest: int = 4
    relaxation: str = "FCF"
    tol_rel: float = 1e-10
    mgrit_max_iter: int = 50
    workers: int = 1
    # training
    mode: str = "serial"  # serial | simultaneous
    m1: int = 2
    m2: int = 2
    gamma_tik: float = 1e-4
    gamma_ddt: float = 1e-4
    gamma_cls: float = 1e-4
    lbfgs_memory: int = 10
    ls_alpha0: float = 1.0
    ls_c1: float = 1e-4
    ls_rho: float = 0.5
    ls_max_backtracks: int = 20
    max_iter: int = 200
    target_accuracy: float = 1.0
    grad_tol: float = 1e-6
    seed: int = 0
    init_std: float = 1e-3
    opening_std: float = 0.0
    # bench
    bench_layers: list = field(default_factory=lambda: [64, 512])
    bench_workers: list = field(default_factory=lambda: [1, 2, 4, 8])
    bench_tol: float = 1e-5
    bench_repeats: int = 3
    # output
    log_dir: str = ""
    weights: str = ""
    # fixed training subset size (0 = full batch)
    batch: int = 0
    # debugging hook for the gradient check negative control
    debug_corrupt_vjp: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.final_time <= 0:
            raise ConfigurationError("final_time must be positive")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        if self.m1 < 1 or self.m2 < 1:
            raise ConfigurationError("m1 and m2 must be at least 1")
        if self.mode not in ("serial", "simultaneous"):
            raise ConfigurationError(f"unknown training mode {self.mode!r}")
        if self.relaxation not in ("F", "FCF"):
            raise ConfigurationError(f"relaxation must be F or FCF, got {self.relaxation!r}")
        if self.layer_kind not in ("dense", "conv"):
            raise ConfigurationError(f"unknown layer kind {self.layer_kind!r}")
        if self.test_case not in ("peaks", "mnist", "csv", "toy"):
            raise ConfigurationError(f"unknown test case {self.test_case!r}")
        if self.batch < 0:
            raise ConfigurationError("batch must be non-negative")
        if self.bench_repeats < 1:
            raise ConfigurationError("bench_repeats must be at least 1")
        if self.max_iter < 0:
            raise ConfigurationError("max_iter must be non-negative")
        build_hierarchy(self.layers, self.final_time, self.coarsening, self.coarsest)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def regularization(self):
        return Regularization(self.gamma_tik, self.gamma_ddt, self.gamma_cls)

    def hierarchy(self, n_layers=None):
        return build_hierarchy(self.layers if n_layers is None else n_layers,
                               self.final_time, self.coarsening, self.coarsest)

    def network(self, n_features, n_classes, n_layers=None):
        if self.layer_kind == "dense":
            kind = Dense(self.width)
        else:
            kind = Conv(self.channels, (self.image_size, self.image_size))
            if self.opening == "identity" and n_features != self.image_size**2:
                raise DimensionError(
                    f"identity opening: expected {self.image_size**2} input pixels, found {n_features}")
        return Network(kind, get_activation(self.activation),
                       self.layers if n_layers is None else n_layers,
                       n_features, n_classes, self.final_time,
                       self.opening, self.opening_activation)


def peaks_config(**changes):
    """Peaks: dense width-8 layers, smoothed ReLU, trainable 8x2 opening plus activation."""
    return RunConfig(**{**dict(test_case="peaks", width=8, layer_kind="dense",
                               activation="smoothrelu", opening="dense",
                               opening_activation=True, init_std=0.1, opening_std=1.0),
                            **changes})


def mnist_config(**changes):
    """MNIST: 3x3 convolutions over 28x28 images, tanh, identity opening across channels."""
    return RunConfig(**{**dict(test_case="mnist", layer_kind="conv", activation="tanh",
                               channels=8, image_size=28, opening="identity",
                               opening_activation=False), **changes})


def toy_config(**changes):
    """Tiny dense network used for gradient and equivalence checks (q=3, N=4)."""
    return RunConfig(**{**dict(test_case="toy", width=3, layers=4, coarsening=2, coarsest=2,
                               layer_kind="dense", activation="tanh", opening="dense",
                               opening_activation=True, samples=10, val_fraction=0.5,
                               init_std=0.5), **changes})
