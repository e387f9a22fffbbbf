"""Nonlinear multigrid reduction in time (FAS) across network layers.

The forward problem ``u^0 = G_0, u^{n+1} = Phi_n(u^n)`` is treated as one
block-bidiagonal space-time system ``A(U) = G`` and solved by V-cycles:
FCF- (or F-) relaxation, injection to a grid with every c-th point, a coarse
FAS equation ``A_c(V) = A_c(U_c) + R_c`` with a re-discretized propagator,
correction of the C-points and a final F-relaxation.

The solver is generic: anything exposing ``hierarchy``, ``initial`` and
``step(level, n, u)`` can be solved, which is how the adjoint module reuses
it.  Trajectories are arrays of shape ``(N+1, q, b)``.

Relaxation sweeps split the C-intervals into contiguous chunks that are
processed by a thread pool.  Each point is computed by the same operations
whatever the worker count, so results are bitwise reproducible.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np

from .network import LayerWeights, apply_layer


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Level:
    n_intervals: int
    h: float
    stride: int  # fine-grid intervals per interval on this level


@dataclass(frozen=True)
class GridHierarchy:
    final_time: float
    coarsening: int
    coarsest_threshold: int
    levels: tuple
    level_layers: tuple | None = None  # injected layer weights, when built with controls

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def n_intervals(self):
        return self.levels[0].n_intervals

    def interval_counts(self):
        return tuple(lv.n_intervals for lv in self.levels)

    def restrict_layers(self, layers):
        """Per-level layer weights by injection: coarse layer n is fine layer n*stride."""
        if layers.shape[0] != self.n_intervals:
            raise ConfigurationError(
                f"{layers.shape[0]} layer weights for a grid with {self.n_intervals} intervals")
        return tuple(layers[::lv.stride] for lv in self.levels)


def build_hierarchy(n_intervals, final_time, coarsening, coarsest_threshold=4, controls=None):
    """Nested layer grids, coarsened by ``c`` until at most ``coarsest_threshold`` intervals.

    At least one coarse level is always built when ``N`` admits it, so a
    grid that already sits below the threshold still gets a two-level cycle.
    """
    N, c = int(n_intervals), int(coarsening)
    if c < 2:
        raise ConfigurationError("coarsening factor must be at least 2")
    if N < 1:
        raise ConfigurationError("need at least one interval")
    if final_time <= 0:
        raise ConfigurationError("final time must be positive")
    if coarsest_threshold < 1:
        raise ConfigurationError("coarsest threshold must be at least 1")
    h = final_time / N
    levels = [Level(N, h, 1)]
    while len(levels) == 1 or levels[-1].n_intervals > coarsest_threshold:
        n = levels[-1].n_intervals
        if n % c:
            if len(levels) == 1 and n <= coarsest_threshold:
                break  # trivially small grid; solved by substitution
            raise ConfigurationError(
                f"{n} intervals on level {len(levels) - 1} are not divisible by coarsening factor {c}")
        lv = levels[-1]
        levels.append(Level(n // c, lv.h * c, lv.stride * c))
    hier = GridHierarchy(final_time, c, coarsest_threshold, tuple(levels))
    if controls is not None:
        layers = getattr(controls, "layers", controls)
        hier = GridHierarchy(final_time, c, coarsest_threshold, tuple(levels),
                             hier.restrict_layers(layers))
    return hier


class Propagator(Protocol):
    hierarchy: GridHierarchy
    initial: np.ndarray

    def step(self, level: int, n: int, u: np.ndarray) -> np.ndarray: ...


class ForwardPropagator:
    """Forward Euler layer steps; level l uses step size h_l and injected weights."""

    def __init__(self, net, controls, hierarchy, u0):
        if hierarchy.n_intervals != net.n_layers:
            raise ConfigurationError(
                f"hierarchy has {hierarchy.n_intervals} intervals, network {net.n_layers} layers")
        self.net = net
        self.hierarchy = hierarchy
        self.initial = u0
        self._layers = hierarchy.restrict_layers(controls.layers)

    def step(self, level, n, u):
        w = LayerWeights(self.net.kind, self._layers[level][n])
        return apply_layer(u, w, self.hierarchy.levels[level].h, self.net.activation)


# --------------------------------------------------------------------------
# chunk-parallel execution


class ChunkPool:
    """Runs a function over contiguous index chunks, one chunk per worker."""

    def __init__(self, workers=1):
        if workers < 1:
            raise ConfigurationError("workers must be at least 1")
        self.workers = int(workers)
        self._executor = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def run(self, fn, n_items):
        if n_items <= 0:
            return
        if self._executor is None or n_items == 1:
            fn(0, n_items)
            return
        bounds = np.linspace(0, n_items, min(self.workers, n_items) + 1).round().astype(int)
        futures = [self._executor.submit(fn, a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        for f in futures:
            f.result()

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_SERIAL = ChunkPool(1)


def _pool(pool):
    if pool is None:
        return _SERIAL
    if isinstance(pool, int):
        return ChunkPool(pool)
    return pool


def _rhs(rhs, prop, n):
    if rhs is not None:
        return rhs[n]
    return prop.initial if n == 0 else None


def _check_level(U, prop, level):
    N = prop.hierarchy.levels[level].n_intervals
    if U.shape[0] != N + 1:
        raise ConfigurationError(f"trajectory has {U.shape[0]} blocks, level {level} needs {N + 1}")
    if U[0].shape != prop.initial.shape:
        raise ConfigurationError(f"state blocks {U[0].shape} do not match initial condition {prop.initial.shape}")


# --------------------------------------------------------------------------
# residual


@dataclass
class SpaceTimeResidual:
    blocks: np.ndarray
    norm: float


def _norm(block_sq):
    # per-block sums are partition independent; sum them in index order
    return float(np.sqrt(np.sum(np.asarray(block_sq))))


def compute_residual(U, prop, level=0, rhs=None, pool=None):
    """R = G - A(U): ``G_0 - u^0`` and ``g^{n+1} - (u^{n+1} - Phi(u^n))``."""
    _check_level(U, prop, level)
    R = np.empty_like(U)
    g0 = _rhs(rhs, prop, 0)
    R[0] = g0 - U[0]
    N = U.shape[0] - 1

    def work(a, b):
        for n in range(a, b):
            r = prop.step(level, n, U[n]) - U[n + 1]
            g = _rhs(rhs, prop, n + 1)
            R[n + 1] = r if g is None else r + g

    _pool(pool).run(work, N)
    sq = np.einsum("nij,nij->n", R, R)
    return SpaceTimeResidual(R, _norm(sq))


def residual_norm(U, prop, level=0, rhs=None, pool=None):
    return compute_residual(U, prop, level, rhs, pool).norm


# --------------------------------------------------------------------------
# relaxation (in-place workers and copying wrappers)


def _coarse_points(prop, level):
    hier = prop.hierarchy
    if level >= hier.n_levels - 1:
        raise ConfigurationError(f"level {level} is the coarsest level and has no C-points")
    return hier.levels[level].n_intervals // hier.coarsening


def _f_relax(U, prop, level, rhs, pool):
    c = prop.hierarchy.coarsening
    n_chunks = _coarse_points(prop, level)

    def work(a, b):
        for k in range(a, b):
            for n in range(k * c + 1, (k + 1) * c):
                v = prop.step(level, n - 1, U[n - 1])
                g = _rhs(rhs, prop, n)
                U[n] = v if g is None else v + g

    _pool(pool).run(work, n_chunks)


def _c_relax(U, prop, level, rhs, pool):
    c = prop.hierarchy.coarsening
    n_chunks = _coarse_points(prop, level)

    def work(a, b):
        for k in range(a + 1, b + 1):
            n = k * c
            v = prop.step(level, n - 1, U[n - 1])
            g = _rhs(rhs, prop, n)
            U[n] = v if g is None else v + g

    _pool(pool).run(work, n_chunks)


def f_relax(U, prop, level=0, rhs=None, pool=None):
    """Propagate every C-point through its chunk of F-points; C-points stay put."""
    _check_level(U, prop, level)
    U = U.copy()
    _f_relax(U, prop, level, rhs, pool)
    return U


def c_relax(U, prop, level=0, rhs=None, pool=None):
    """Update every C-point except t=0 from its left F-neighbour."""
    _check_level(U, prop, level)
    U = U.copy()
    _c_relax(U, prop, level, rhs, pool)
    return U


def fcf_relax(U, prop, level=0, rhs=None, pool=None):
    _check_level(U, prop, level)
    U = U.copy()
    _f_relax(U, prop, level, rhs, pool)
    _c_relax(U, prop, level, rhs, pool)
    _f_relax(U, prop, level, rhs, pool)
    return U


def restrict_injection(X, c):
    """Coarse block n is fine block n*c."""
    if c < 1 or (X.shape[0] - 1) % c:
        raise ConfigurationError(f"cannot inject {X.shape[0] - 1} intervals with factor {c}")
    return X[::c].copy()


def correct_injection(X, E, c):
    """Add a coarse correction at the C-points of a fine object (copy)."""
    X = X.copy()
    X[::c] += E
    return X


# --------------------------------------------------------------------------
# substitution and cycles


def forward_substitution(prop, level=0, rhs=None):
    """Exact solve of ``A_level(U) = G`` by stepping through the layers."""
    N = prop.hierarchy.levels[level].n_intervals
    U = np.empty((N + 1,) + prop.initial.shape)
    U[0] = _rhs(rhs, prop, 0)
    for n in range(N):
        v = prop.step(level, n, U[n])
        g = _rhs(rhs, prop, n + 1)
        U[n + 1] = v if g is None else v + g
    return U


def _cycle(U, prop, level, rhs, relaxation, pool):
    hier = prop.hierarchy
    if level == hier.n_levels - 1:
        U[...] = forward_substitution(prop, level, rhs)
        return
    c = hier.coarsening
    _f_relax(U, prop, level, rhs, pool)
    if relaxation == "FCF":
        _c_relax(U, prop, level, rhs, pool)
        _f_relax(U, prop, level, rhs, pool)

    Uc = U[::c].copy()
    Nc = Uc.shape[0] - 1
    # coarse FAS right-hand side A_c(U_c) + R_c
    g = np.empty_like(Uc)
    g[0] = _rhs(rhs, prop, 0)  # u_c^0 + (g^0 - u^0)

    def work(a, b):
        for i in range(a + 1, b + 1):
            n = i * c
            r = prop.step(level, n - 1, U[n - 1]) - U[n]
            gf = _rhs(rhs, prop, n)
            if gf is not None:
                r = r + gf
            g[i] = Uc[i] - prop.step(level + 1, i - 1, Uc[i - 1]) + r

    _pool(pool).run(work, Nc)

    V = Uc.copy()
    _cycle(V, prop, level + 1, g, relaxation, pool)
    U[::c] += V - Uc
    _f_relax(U, prop, level, rhs, pool)


def fas_cycle(U, prop, level=0, rhs=None, relaxation="FCF", pool=None):
    """One FAS V-cycle starting at ``level``; returns the updated trajectory."""
    if relaxation not in ("F", "FCF"):
        raise ConfigurationError(f"relaxation must be 'F' or 'FCF', got {relaxation!r}")
    _check_level(U, prop, level)
    U = U.copy()
    _cycle(U, prop, level, rhs, relaxation, pool)
    return U


class MGRITResult(NamedTuple):
    trajectory: np.ndarray
    history: list
    converged: bool

    @property
    def iterations(self):
        return len(self.history) - 1


def initial_guess(prop):
    """Cold start: the initial condition replicated over every layer."""
    N = prop.hierarchy.n_intervals
    return np.broadcast_to(prop.initial, (N + 1,) + prop.initial.shape).copy()


def mgrit_solve(U0, prop, tol_rel=1e-5, max_iter=50, relaxation="FCF", workers=1):
    """Iterate V-cycles until ``|R_m| <= tol_rel |R_0|`` or ``max_iter`` cycles.

    Stopping at ``max_iter`` is not an error; the flag in the result tells.
    ``history`` holds the residual norm before the first and after every cycle.
    """
    if tol_rel <= 0:
        raise ConfigurationError("tol_rel must be positive")
    if max_iter < 0:
        raise ConfigurationError("max_iter must be non-negative")
    U = (initial_guess(prop) if U0 is None else np.array(U0, dtype=float, copy=True))
    _check_level(U, prop, 0)
    with ChunkPool(workers) as pool:
        r0 = residual_norm(U, prop, pool=pool)
        history = [r0]
        target = tol_rel * r0
        converged = r0 == 0.0
        while not converged and len(history) <= max_iter:
            _cycle(U, prop, 0, None, relaxation, pool)
            r = residual_norm(U, prop, pool=pool)
            history.append(r)
            converged = r <= target
    return MGRITResult(U, history, converged)


def serial_propagate(net, controls, Y):
    """Layer-serial forward propagation on the fine grid; the reference solution."""
    u = net.opening_state(Y, controls)
    U = np.empty((net.n_layers + 1,) + u.shape)
    U[0] = u
    for n in range(net.n_layers):
        U[n + 1] = apply_layer(U[n], LayerWeights(net.kind, controls.layers[n]), net.h, net.activation)
    return U
