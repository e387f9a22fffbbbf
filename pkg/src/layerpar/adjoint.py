"""Layer-parallel backpropagation.

The adjoint equations ``ubar^n = (d_u Phi^n)^T ubar^{n+1}`` with terminal
seed ``ubar^N`` have the same block-bidiagonal structure as the forward
system once time is reversed, so they are solved by the same FAS/MGRIT code.

Adjoint trajectories are stored in reversed order: block ``r`` holds
``ubar^{N-r}``.  Reversed interval ``r`` maps ``ubar^{N-r}`` to
``ubar^{N-r-1}`` using the primal state and weights of layer ``N-r-1``.  On a
coarse level with stride ``s`` the step spans layers ``N-(r+1)s .. N-rs`` and
uses the primal state and weights injected at its left end ``N-(r+1)s``
together with the coarse step size.
"""

from __future__ import annotations

import numpy as np

from . import mgrit
from .network import LayerWeights, terminal_adjoint, vjp_state


class AdjointSystem:
    """Adjoint space-time system built on a frozen primal trajectory."""

    def __init__(self, net, controls, primal, hierarchy, C, s=None):
        if primal.shape[0] != net.n_layers + 1:
            raise mgrit.ConfigurationError(
                f"primal trajectory has {primal.shape[0]} blocks, network needs {net.n_layers + 1}")
        self.net = net
        self.hierarchy = hierarchy
        self.primal = np.array(primal, dtype=float, copy=True)
        self.primal.flags.writeable = False
        self.layers = controls.layers.copy()
        self.layers.flags.writeable = False
        s = primal.shape[2] if s is None else s
        self.initial = terminal_adjoint(self.primal[-1], C, controls.W, controls.mu, s)

    def layer_index(self, level, r):
        """Fine layer whose weights and primal state drive reversed step ``r`` on ``level``."""
        stride = self.hierarchy.levels[level].stride
        return self.net.n_layers - (r + 1) * stride

    def step(self, level, r, v):
        n = self.layer_index(level, r)
        if n < 0:
            raise IndexError(f"reversed step {r} on level {level} has no primal state")
        w = LayerWeights(self.net.kind, self.layers[n])
        return vjp_state(self.primal[n], w, self.hierarchy.levels[level].h, self.net.activation, v)


def adjoint_step(system, r, v, level=0):
    return system.step(level, r, v)


def adjoint_mgrit_solve(Ubar0, system, tol_rel=1e-5, max_iter=50, relaxation="FCF", workers=1):
    """MGRIT on the reversed adjoint system; ``Ubar0`` is in reversed order (or None)."""
    return mgrit.mgrit_solve(Ubar0, system, tol_rel, max_iter, relaxation, workers)


def serial_backprop(system):
    """Reverse sweep ``ubar^N = seed, ubar^n = (d_u Phi^n)^T ubar^{n+1}`` (reversed order)."""
    return mgrit.forward_substitution(system, 0)


def natural_order(Ubar):
    """Reversed-order adjoint trajectory -> array indexed by layer ``n``."""
    return Ubar[::-1]
