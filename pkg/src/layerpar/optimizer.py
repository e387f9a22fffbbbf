"""Reduced gradients, L-BFGS with Armijo backtracking, and the two training loops.

``train_serial`` is the conventional layer-serial scheme (exact forward and
backward sweeps).  ``train_simultaneous`` replaces both sweeps by ``m1``
state and ``m2`` adjoint MGRIT cycles, warm-started from the previous outer
iteration, and updates the controls from the resulting inexact gradient.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import adjoint, mgrit
from .network import (
    DimensionError,
    LayerWeights,
    classifier_gradient,
    objective,
    opening_vjp,
    predict_classes,
    regularizer_gradient,
    vjp_weights,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "iteration", "objective", "loss", "train_accuracy", "validation_accuracy",
    "gradient_norm", "state_residual", "adjoint_residual", "stepsize", "wall_time",
)


class NumericalError(FloatingPointError):
    def __init__(self, iteration, what):
        super().__init__(f"NaN/Inf detected in {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class ReducedGradient:
    layer_grads: np.ndarray
    W_grad: np.ndarray
    mu_grad: np.ndarray
    opening_grad: np.ndarray | None = None

    def flat(self):
        """Same layout as :meth:`NetworkControls.to_vector`."""
        parts = [] if self.opening_grad is None else [self.opening_grad.ravel()]
        parts += [self.layer_grads.ravel(), self.W_grad.ravel(), self.mu_grad.ravel()]
        return np.concatenate(parts)

    @property
    def norm(self):
        return float(np.linalg.norm(self.flat()))


def assemble_reduced_gradient(net, controls, U, Ubar, Y, C, reg, vjp=vjp_weights):
    """Design equations evaluated on a state ``U`` and reversed adjoint ``Ubar``.

    ``Ubar`` carries the 1/s factor from its terminal seed.  Passing a
    different ``vjp`` is a hook for negative-control tests.
    """
    N = net.n_layers
    if U.shape[0] != N + 1 or Ubar.shape != U.shape:
        raise DimensionError(f"state {U.shape} and adjoint {Ubar.shape} do not fit {N} layers")
    if U.shape[2] != C.shape[1]:
        raise DimensionError(f"trajectory batch {U.shape[2]} does not match {C.shape[1]} targets")
    ubar = adjoint.natural_order(Ubar)
    h = net.h
    layer_grads = np.empty_like(controls.layers)
    for n in range(N):
        w = LayerWeights(net.kind, controls.layers[n])
        layer_grads[n] = vjp(U[n], w, h, net.activation, ubar[n + 1])
    dR, dW, dmu = regularizer_gradient(controls, h, reg.tik, reg.ddt, reg.cls)
    layer_grads += dR
    W_grad, mu_grad = classifier_gradient(U[-1], C, controls.W, controls.mu, reg.cls)
    opening = opening_vjp(Y, controls, net.activation, net.opening_activation, ubar[0])
    return ReducedGradient(layer_grads, W_grad, mu_grad, opening)


# --------------------------------------------------------------------------
# L-BFGS


class LbfgsMemory:
    """Bounded store of curvature pairs ``(s, y)``; pairs without positive curvature are dropped."""

    def __init__(self, capacity=10):
        self.capacity = int(capacity)
        self.pairs = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self.pairs)

    def update(self, s, y):
        sy = float(np.dot(s, y))
        if sy <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.pairs.append((np.array(s, dtype=float), np.array(y, dtype=float)))
        return True

    def clear(self):
        self.pairs.clear()


def lbfgs_direction(g, mem):
    """Two-loop recursion; falls back to steepest descent if the result is not a descent direction."""
    g = g.flat() if isinstance(g, ReducedGradient) else np.asarray(g, dtype=float)
    if not mem.pairs:
        return -g
    q = g.copy()
    alphas = []
    for s, y in reversed(mem.pairs):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append((rho, a))
    s, y = mem.pairs[-1]
    r = (np.dot(s, y) / np.dot(y, y)) * q
    for (s, y), (rho, a) in zip(mem.pairs, reversed(alphas)):
        b = rho * np.dot(y, r)
        r += (a - b) * s
    d = -r
    if not np.dot(g, d) < 0 or not np.all(np.isfinite(d)):
        log.warning("L-BFGS direction is not a descent direction; using -g")
        return -g
    return d


class LineSearchResult(NamedTuple):
    alpha: float
    value: float
    ok: bool
    evaluations: int


def line_search(x, d, g, evaluate, f0=None, alpha0=1.0, c1=1e-4, rho=0.5, max_backtracks=20):
    """Backtracking until ``f(x + a d) <= f(x) + c1 a <g, d>``.

    If no trial passes within ``max_backtracks`` reductions the smallest trial
    step is returned with ``ok=False``.
    """
    slope = float(np.dot(g, d))
    if not slope < 0:
        raise ValueError("line search needs a descent direction")
    if f0 is None:
        f0 = evaluate(x)
    alpha = alpha0
    for k in range(max_backtracks + 1):
        f = evaluate(x + alpha * d)
        if np.isfinite(f) and f <= f0 + c1 * alpha * slope:
            return LineSearchResult(alpha, f, True, k + 1)
        if k < max_backtracks:
            alpha *= rho
    log.warning("line search: no Armijo step after %d backtracks", max_backtracks)
    return LineSearchResult(alpha, f, False, max_backtracks + 1)


# --------------------------------------------------------------------------
# evaluation


def accuracy(net, controls, uN, C):
    return float(np.mean(predict_classes(uN, controls.W, controls.mu) == np.argmax(C, axis=0)))


def validation_accuracy(net, controls, Y, C):
    """Fraction of examples whose argmax prediction matches the argmax target."""
    if C.shape[1] == 0:
        raise ValueError("validation set is empty")
    U = mgrit.serial_propagate(net, controls, Y)
    return accuracy(net, controls, U[-1], C)


class Evaluation(NamedTuple):
    U: np.ndarray
    Ubar: np.ndarray
    value: object
    gradient: ReducedGradient
    state_residual: float
    adjoint_residual: float


class SerialEvaluator:
    """Exact forward propagation and backpropagation."""

    def __init__(self, net, hierarchy, Y, C, reg):
        self.net, self.hierarchy, self.Y, self.C, self.reg = net, hierarchy, Y, C, reg

    def evaluate(self, controls):
        U = mgrit.serial_propagate(self.net, controls, self.Y)
        system = adjoint.AdjointSystem(self.net, controls, U, self.hierarchy, self.C)
        Ubar = adjoint.serial_backprop(system)
        value = objective(U, controls, self.C, self.reg, self.net.h)
        g = assemble_reduced_gradient(self.net, controls, U, Ubar, self.Y, self.C, self.reg)
        return Evaluation(U, Ubar, value, g, 0.0, 0.0)

    def trial(self, controls):
        U = mgrit.serial_propagate(self.net, controls, self.Y)
        return objective(U, controls, self.C, self.reg, self.net.h).total


class OneShotEvaluator:
    """Truncated state/adjoint MGRIT with warm starts across outer iterations."""

    def __init__(self, net, hierarchy, Y, C, reg, m1, m2, tol_rel=1e-10,
                 relaxation="FCF", workers=1):
        self.net, self.hierarchy, self.Y, self.C, self.reg = net, hierarchy, Y, C, reg
        self.m1, self.m2, self.tol_rel = m1, m2, tol_rel
        self.relaxation, self.workers = relaxation, workers
        self.U = None
        self.Ubar = None

    def _state(self, controls, U0):
        prop = mgrit.ForwardPropagator(self.net, controls, self.hierarchy,
                                       self.net.opening_state(self.Y, controls))
        return mgrit.mgrit_solve(U0, prop, self.tol_rel, self.m1, self.relaxation, self.workers)

    def evaluate(self, controls):
        res = self._state(controls, self.U)
        self.U = U = res.trajectory
        system = adjoint.AdjointSystem(self.net, controls, U, self.hierarchy, self.C)
        ares = adjoint.adjoint_mgrit_solve(self.Ubar, system, self.tol_rel, self.m2,
                                           self.relaxation, self.workers)
        self.Ubar = ares.trajectory
        value = objective(U, controls, self.C, self.reg, self.net.h)
        g = assemble_reduced_gradient(self.net, controls, U, self.Ubar, self.Y, self.C, self.reg)
        return Evaluation(U, self.Ubar, value, g, res.history[-1], ares.history[-1])

    def trial(self, controls):
        res = self._state(controls, self.U)
        return objective(res.trajectory, controls, self.C, self.reg, self.net.h).total


# --------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    controls: object
    net: object
    U: np.ndarray | None = None
    Ubar: np.ndarray | None = None
    iteration: int = 0
    history: list = field(default_factory=list)
    stop_reason: str = ""

    def record(self, **row):
        if self.history and row["iteration"] <= self.history[-1]["iteration"]:
            raise ValueError("history iterations must increase")
        self.history.append({k: row[k] for k in HISTORY_COLUMNS})

    def column(self, name):
        return np.array([row[name] for row in self.history])


def _finite(it, what, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(it, what)


def _train(cfg, dataset, evaluator, net, controls=None):
    Y, C = evaluator.Y, evaluator.C
    Yv, Cv = dataset.validation()
    if Cv.shape[1] == 0:
        raise ValueError("validation set is empty")
    if controls is None:
        controls = net.init_controls(np.random.default_rng(cfg.seed), cfg.init_std, cfg.opening_std)
    net.check_controls(controls)
    state = TrainState(controls, net)
    mem = LbfgsMemory(cfg.lbfgs_memory)
    prev = None
    t0 = time.perf_counter()
    state.stop_reason = "max_iter"
    for it in range(1, cfg.max_iter + 1):
        ev = evaluator.evaluate(controls)
        x = controls.to_vector()
        g = ev.gradient.flat()
        _finite(it, "objective", ev.value.total)
        _finite(it, "gradient", g)
        _finite(it, "residual", ev.state_residual, ev.adjoint_residual)
        if prev is not None:
            mem.update(x - prev[0], g - prev[1])
        gnorm = float(np.linalg.norm(g))
        val_acc = validation_accuracy(net, controls, Yv, Cv)
        row = dict(iteration=it, objective=ev.value.total, loss=ev.value.loss_term,
                   train_accuracy=accuracy(net, controls, ev.U[-1], C),
                   validation_accuracy=val_acc, gradient_norm=gnorm,
                   state_residual=ev.state_residual, adjoint_residual=ev.adjoint_residual)
        state.U, state.Ubar, state.iteration = ev.U, ev.Ubar, it

        if val_acc >= cfg.target_accuracy or gnorm < cfg.grad_tol:
            state.stop_reason = "target_accuracy" if val_acc >= cfg.target_accuracy else "gradient_norm"
            state.record(**row, stepsize=0.0, wall_time=time.perf_counter() - t0)
            break

        d = lbfgs_direction(g, mem)
        ls = line_search(x, d, g, lambda z: evaluator.trial(controls.from_vector(z)),
                         f0=ev.value.total, alpha0=cfg.ls_alpha0, c1=cfg.ls_c1,
                         rho=cfg.ls_rho, max_backtracks=cfg.ls_max_backtracks)
        if ls.ok:
            assert ls.value <= ev.value.total + cfg.ls_c1 * ls.alpha * np.dot(g, d)
        else:
            mem.clear()
        controls = controls.from_vector(x + ls.alpha * d)
        prev = (x, g)
        state.record(**row, stepsize=ls.alpha, wall_time=time.perf_counter() - t0)
        log.info("iter %d  J=%.6e  |g|=%.3e  val=%.3f  alpha=%.3g",
                 it, ev.value.total, gnorm, val_acc, ls.alpha)
    state.controls = controls
    return state


def training_batch(cfg, dataset):
    """The training examples used in the objective; the first ``cfg.batch`` if set."""
    Y, C = dataset.train()
    if cfg.batch:
        Y, C = Y[:, :cfg.batch], C[:, :cfg.batch]
    return Y, C


def train_serial(cfg, dataset, controls=None):
    """Layer-serial training: exact propagation, backpropagation, L-BFGS, Armijo."""
    net = cfg.network(dataset.n_features, dataset.n_classes)
    Y, C = training_batch(cfg, dataset)
    ev = SerialEvaluator(net, cfg.hierarchy(), Y, C, cfg.regularization)
    return _train(cfg, dataset, ev, net, controls)


def train_simultaneous(cfg, dataset, controls=None):
    """One-shot training with ``m1`` state and ``m2`` adjoint MGRIT cycles per update."""
    if cfg.m1 < 1 or cfg.m2 < 1:
        raise mgrit.ConfigurationError("m1 and m2 must be at least 1")
    net = cfg.network(dataset.n_features, dataset.n_classes)
    Y, C = training_batch(cfg, dataset)
    ev = OneShotEvaluator(net, cfg.hierarchy(), Y, C, cfg.regularization, cfg.m1, cfg.m2,
                          cfg.tol_rel, cfg.relaxation, cfg.workers)
    return _train(cfg, dataset, ev, net, controls)


def train(cfg, dataset, controls=None):
    fn = train_simultaneous if cfg.mode == "simultaneous" else train_serial
    return fn(cfg, dataset, controls)


# --------------------------------------------------------------------------
# gradient verification


def full_objective(net, controls, Y, C, reg):
    U = mgrit.serial_propagate(net, controls, Y)
    return objective(U, controls, C, reg, net.h).total


def serial_gradient(net, controls, Y, C, reg, hierarchy=None, vjp=vjp_weights):
    hierarchy = hierarchy or mgrit.build_hierarchy(net.n_layers, net.final_time, 2, net.n_layers)
    U = mgrit.serial_propagate(net, controls, Y)
    system = adjoint.AdjointSystem(net, controls, U, hierarchy, C)
    Ubar = adjoint.serial_backprop(system)
    return assemble_reduced_gradient(net, controls, U, Ubar, Y, C, reg, vjp=vjp)


def finite_difference_gradient(fun, x, eps=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (fun(x + e) - fun(x - e)) / (2 * eps)
    return g


def relative_error(g, ref):
    """Largest componentwise error relative to ``max(|g_i|, |ref_i|, 1e-6 * max|ref|)``."""
    scale = np.maximum(np.maximum(np.abs(g), np.abs(ref)), 1e-6 * np.max(np.abs(ref)))
    return float(np.max(np.abs(g - ref) / scale))


def _corrupted_vjp(u, w, h, act, vbar):
    return 1.01 * vjp_weights(u, w, h, act, vbar)


class GradCheckReport(NamedTuple):
    max_rel_error: float
    n_params: int
    passed: bool


def gradient_check(cfg, dataset, seed=0, scale=0.5, eps=1e-5, threshold=1e-5, corrupt=False):
    """Compare the adjoint gradient with central differences over every parameter."""
    net = cfg.network(dataset.n_features, dataset.n_classes)
    controls = net.random_controls(np.random.default_rng(seed), scale)
    Y, C = dataset.train()
    reg = cfg.regularization
    vjp = _corrupted_vjp if corrupt else vjp_weights
    g = serial_gradient(net, controls, Y, C, reg, cfg.hierarchy(), vjp=vjp).flat()
    fd = finite_difference_gradient(
        lambda z: full_objective(net, controls.from_vector(z), Y, C, reg), controls.to_vector(), eps)
    err = relative_error(g, fd)
    return GradCheckReport(err, g.size, err < threshold)
