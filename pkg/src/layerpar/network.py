"""Residual network building blocks.

A network of ``N`` layers propagates a batch of states ``u`` (shape ``(q, b)``,
one column per example) by forward Euler steps

    u^{n+1} = u^n + h * sigma(K(theta^n) u^n + B theta_bias^n)

and classifies the last state with a softmax model ``S(W u + mu)``.  Every
function here is pure; the derivative actions (``vjp_*``) are exact
transposed Jacobians and are what the adjoint and gradient code build on.

Layer parameters of all ``N`` layers live in one ``(N, d)`` array so that
coarse grids can take every c-th row and the optimizer can flatten them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not fit the network layout."""


# --------------------------------------------------------------------------
# activations


class SmoothReLU:
    """ReLU with a quadratic blend on [-0.1, 0.1]; continuously differentiable."""

    name = "smoothrelu"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        quad = 2.5 * x * x + 0.5 * x + 1.0 / 40.0
        return np.where(np.abs(x) > 0.1, np.maximum(x, 0.0), quad)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(np.abs(x) > 0.1, (x > 0.0).astype(float), 5.0 * x + 0.5)


class Tanh:
    name = "tanh"

    def __call__(self, x):
        return np.tanh(x)

    def derivative(self, x):
        t = np.tanh(x)
        return 1.0 - t * t


ACTIVATIONS = {"smoothrelu": SmoothReLU, "tanh": Tanh}


def get_activation(name):
    try:
        return ACTIVATIONS[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# --------------------------------------------------------------------------
# layer kinds


class Dense:
    """Dense ``q x q`` operator plus one bias coefficient on the all-ones column.

    Flat layout: ``K.ravel()`` (row-major) followed by the bias scalar.
    """

    name = "dense"

    def __init__(self, width):
        self.width = int(width)
        self.n_params = self.width * self.width + 1

    def __eq__(self, other):
        return isinstance(other, Dense) and other.width == self.width

    def __repr__(self):
        return f"Dense(width={self.width})"

    def _check(self, theta, u):
        if theta.shape != (self.n_params,):
            raise DimensionError(f"dense layer expects {self.n_params} parameters, got {theta.shape}")
        if u.shape[0] != self.width:
            raise DimensionError(f"dense layer expects state with {self.width} rows, got {u.shape}")

    def affine(self, theta, u):
        self._check(theta, u)
        q = self.width
        return theta[:-1].reshape(q, q) @ u + theta[-1]

    def affine_T(self, theta, v):
        """Apply ``K^T`` (the bias does not depend on the state)."""
        self._check(theta, v)
        q = self.width
        return theta[:-1].reshape(q, q).T @ v

    def param_grad(self, u, v):
        """Gradient of ``<v, K(theta) u + B theta_bias>`` with respect to theta."""
        g = np.empty(self.n_params)
        g[:-1] = (v @ u.T).ravel()
        g[-1] = v.sum()
        return g


class Conv:
    """Same-padded, stride-1 convolution over a ``channels x H x W`` image.

    The state vector stores the image channel-major (``q = channels*H*W``).
    The kernel tensor has shape ``(k, k, channels_out, channels_in)`` and is
    applied as a cross-correlation; a single bias coefficient is shared by all
    entries.
    """

    name = "conv"

    def __init__(self, channels, image_shape, kernel_size=3):
        if kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.channels = int(channels)
        self.image_shape = tuple(int(s) for s in image_shape)
        self.kernel_size = int(kernel_size)
        self.width = self.channels * self.image_shape[0] * self.image_shape[1]
        self.n_params = self.kernel_size**2 * self.channels**2 + 1

    def __eq__(self, other):
        return (
            isinstance(other, Conv)
            and other.channels == self.channels
            and other.image_shape == self.image_shape
            and other.kernel_size == self.kernel_size
        )

    def __repr__(self):
        return f"Conv(channels={self.channels}, image_shape={self.image_shape}, kernel_size={self.kernel_size})"

    def kernel(self, theta):
        k, ch = self.kernel_size, self.channels
        if theta.shape != (self.n_params,):
            raise DimensionError(f"conv layer expects {self.n_params} parameters, got {theta.shape}")
        return theta[:-1].reshape(k, k, ch, ch)

    def _image(self, u):
        if u.shape[0] != self.width:
            raise DimensionError(f"conv layer expects state with {self.width} rows, got {u.shape}")
        H, W = self.image_shape
        return u.reshape(self.channels, H, W, u.shape[1])

    def _pad(self, x):
        p = self.kernel_size // 2
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))

    def affine(self, theta, u):
        K = self.kernel(theta)
        x = self._pad(self._image(u))
        H, W = self.image_shape
        out = np.zeros((self.channels, H, W, u.shape[1]))
        for di in range(self.kernel_size):
            for dj in range(self.kernel_size):
                out += np.tensordot(K[di, dj], x[:, di:di + H, dj:dj + W, :], axes=(1, 0))
        return out.reshape(u.shape) + theta[-1]

    def affine_T(self, theta, v):
        K = self.kernel(theta)
        y = self._image(v)
        H, W = self.image_shape
        p = self.kernel_size // 2
        acc = np.zeros((self.channels, H + 2 * p, W + 2 * p, v.shape[1]))
        for di in range(self.kernel_size):
            for dj in range(self.kernel_size):
                acc[:, di:di + H, dj:dj + W, :] += np.tensordot(K[di, dj].T, y, axes=(1, 0))
        return acc[:, p:p + H, p:p + W, :].reshape(v.shape)

    def param_grad(self, u, v):
        x = self._pad(self._image(u))
        y = self._image(v)
        H, W = self.image_shape
        k = self.kernel_size
        g = np.empty(self.n_params)
        G = g[:-1].reshape(k, k, self.channels, self.channels)
        for di in range(k):
            for dj in range(k):
                G[di, dj] = np.tensordot(y, x[:, di:di + H, dj:dj + W, :], axes=([1, 2, 3], [1, 2, 3]))
        g[-1] = v.sum()
        return g


@dataclass(frozen=True)
class LayerWeights:
    """Parameters of one layer together with the operator kind that reads them."""

    kind: Dense | Conv
    params: np.ndarray


# --------------------------------------------------------------------------
# controls


@dataclass
class NetworkControls:
    """All trainable quantities of a network.

    ``opening`` is the dense ``(q, n_f)`` input map, or ``None`` for the fixed
    identity (replicated across channels when ``q`` is a multiple of ``n_f``).
    """

    layers: np.ndarray
    W: np.ndarray
    mu: np.ndarray
    opening: np.ndarray | None = None

    @property
    def n_layers(self):
        return self.layers.shape[0]

    def layer(self, n, kind):
        return LayerWeights(kind, self.layers[n])

    def copy(self):
        return NetworkControls(
            self.layers.copy(), self.W.copy(), self.mu.copy(),
            None if self.opening is None else self.opening.copy(),
        )

    def to_vector(self):
        parts = [] if self.opening is None else [self.opening.ravel()]
        parts += [self.layers.ravel(), self.W.ravel(), self.mu.ravel()]
        return np.concatenate(parts)

    def from_vector(self, x):
        """Return controls shaped like ``self`` holding the entries of ``x``."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise DimensionError(f"expected a vector of {self.size} entries, got {x.shape}")
        i = 0
        opening = None
        if self.opening is not None:
            opening = x[:self.opening.size].reshape(self.opening.shape).copy()
            i = self.opening.size
        layers = x[i:i + self.layers.size].reshape(self.layers.shape).copy()
        i += self.layers.size
        W = x[i:i + self.W.size].reshape(self.W.shape).copy()
        i += self.W.size
        mu = x[i:].copy()
        return NetworkControls(layers, W, mu, opening)

    @property
    def size(self):
        n = self.layers.size + self.W.size + self.mu.size
        return n if self.opening is None else n + self.opening.size


@dataclass
class Network:
    """Architecture of a residual classifier (everything except the weights)."""

    kind: Dense | Conv
    activation: SmoothReLU | Tanh
    n_layers: int
    n_features: int
    n_classes: int
    final_time: float = 5.0
    opening: str = "dense"  # "dense" (trainable) or "identity"
    opening_activation: bool = False

    def __post_init__(self):
        if self.final_time <= 0:
            raise ValueError("final time must be positive")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")
        if self.opening not in ("dense", "identity"):
            raise ValueError(f"unknown opening {self.opening!r}")
        if self.opening == "identity" and self.width % self.n_features:
            raise DimensionError(
                f"identity opening needs width {self.width} to be a multiple of {self.n_features} features")

    @property
    def width(self):
        return self.kind.width

    @property
    def h(self):
        return self.final_time / self.n_layers

    def init_controls(self, rng, std=1e-3, opening_std=0.0):
        """Layer weights ~ N(0, std^2), dense opening ~ N(0, opening_std^2), zero classifier."""
        q = self.width
        layers = std * rng.standard_normal((self.n_layers, self.kind.n_params))
        W = np.zeros((self.n_classes, q))
        mu = np.zeros(self.n_classes)
        opening = None
        if self.opening == "dense":
            opening = opening_std * rng.standard_normal((q, self.n_features))
        return NetworkControls(layers, W, mu, opening)

    def random_controls(self, rng, scale=0.5):
        """Every trainable entry ~ N(0, scale^2); for derivative checks."""
        c = self.init_controls(rng, 0.0)
        return c.from_vector(scale * rng.standard_normal(c.size))

    def check_controls(self, controls):
        expect = {
            "layers": (self.n_layers, self.kind.n_params),
            "W": (self.n_classes, self.width),
            "mu": (self.n_classes,),
        }
        for name, shape in expect.items():
            got = getattr(controls, name).shape
            if got != shape:
                raise DimensionError(f"{name}: expected shape {shape}, found {got}")
        if self.opening == "dense":
            shape = (self.width, self.n_features)
            got = None if controls.opening is None else controls.opening.shape
            if got != shape:
                raise DimensionError(f"opening: expected shape {shape}, found {got}")
        elif controls.opening is not None:
            raise DimensionError("opening: identity network carries no opening weights")

    def opening_state(self, Y, controls):
        return apply_opening(Y, controls, self.activation, self.opening_activation)


# --------------------------------------------------------------------------
# propagation


def layer_rhs(u, w, act):
    """F(u, theta) = sigma(K u + B theta_bias)."""
    return act(w.kind.affine(w.params, u))


def apply_layer(u, w, h, act):
    """One forward Euler step ``u + h F(u, theta)``."""
    if h < 0:
        raise ValueError("step size must be non-negative")
    return u + h * layer_rhs(u, w, act)


def apply_opening(Y, controls, act, apply_activation=False):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    L = controls.opening
    if L is None:
        q = controls.W.shape[1]
        n_f = Y.shape[0]
        if q % n_f:
            raise DimensionError(f"identity opening cannot map {n_f} features to width {q}")
        u0 = np.tile(Y, (q // n_f, 1))
    else:
        if L.shape[1] != Y.shape[0]:
            raise DimensionError(f"opening expects {L.shape[1]} features, got {Y.shape[0]}")
        u0 = L @ Y
    return act(u0) if apply_activation else u0


def opening_vjp(Y, controls, act, apply_activation, ubar0):
    """Gradient of ``<ubar0, u0(L)>`` with respect to the dense opening map."""
    if controls.opening is None:
        return None
    if apply_activation:
        ubar0 = act.derivative(controls.opening @ Y) * ubar0
    return ubar0 @ Y.T


def vjp_state(u, w, h, act, vbar):
    """(d Phi / d u)^T vbar = vbar + h K^T (sigma'(z) * vbar)."""
    if vbar.shape != u.shape:
        raise DimensionError(f"adjoint shape {vbar.shape} does not match state {u.shape}")
    z = w.kind.affine(w.params, u)
    return vbar + h * w.kind.affine_T(w.params, act.derivative(z) * vbar)


def vjp_weights(u, w, h, act, vbar):
    """(d Phi / d theta)^T vbar, summed over the batch columns."""
    if vbar.shape != u.shape:
        raise DimensionError(f"adjoint shape {vbar.shape} does not match state {u.shape}")
    z = w.kind.affine(w.params, u)
    return h * w.kind.param_grad(u, act.derivative(z) * vbar)


# --------------------------------------------------------------------------
# classifier and loss


def _logits(u, W, mu):
    u = np.asarray(u, dtype=float)
    if u.shape[0] != W.shape[1]:
        raise DimensionError(f"classifier expects {W.shape[1]} state rows, got {u.shape[0]}")
    if u.ndim == 1:
        return W @ u + mu
    return W @ u + mu[:, None]


def softmax_predict(u, W, mu):
    """Class probabilities for a state column (or each column of a batch)."""
    z = _logits(u, W, mu)
    z = z - z.max(axis=0)
    e = np.exp(z)
    return e / e.sum(axis=0)


def _log_softmax(z):
    m = z.max(axis=0)
    return z - (m + np.log(np.exp(z - m).sum(axis=0)))


def cross_entropy(u, c, W, mu):
    """-c^T log S(W u + mu); per column when ``u`` is a batch."""
    c = np.asarray(c, dtype=float)
    logS = _log_softmax(_logits(u, W, mu))
    if c.shape != logS.shape:
        raise DimensionError(f"target shape {c.shape} does not match prediction {logS.shape}")
    return -(c * logS).sum(axis=0)


@dataclass(frozen=True)
class Regularization:
    tik: float = 1e-4
    ddt: float = 1e-4
    cls: float = 1e-4

    def __post_init__(self):
        if min(self.tik, self.ddt, self.cls) < 0:
            raise ValueError("regularization weights must be non-negative")


def regularizer(controls, h, gamma_tik, gamma_ddt, gamma_cls):
    """Tikhonov + time-derivative penalty on layer weights, Tikhonov on the classifier."""
    th = controls.layers
    val = gamma_tik * h * np.sum(th * th)
    if th.shape[0] > 1:
        diff = np.diff(th, axis=0) / h
        val += gamma_ddt * h * np.sum(diff * diff)
    val += gamma_cls * (np.sum(controls.W**2) + np.sum(controls.mu**2))
    return float(val)


def regularizer_gradient(controls, h, gamma_tik, gamma_ddt, gamma_cls):
    """Derivatives of :func:`regularizer` as ``(d_layers, d_W, d_mu)``."""
    th = controls.layers
    g = 2.0 * gamma_tik * h * th
    if th.shape[0] > 1:
        diff = np.diff(th, axis=0)
        coupling = np.zeros_like(th)
        coupling[:-1] -= diff
        coupling[1:] += diff
        g = g + (2.0 * gamma_ddt / h) * coupling
    return g, 2.0 * gamma_cls * controls.W, 2.0 * gamma_cls * controls.mu


@dataclass(frozen=True)
class ObjectiveValue:
    loss_term: float
    reg_term: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.loss_term + self.reg_term)


def objective(U, controls, C, reg, h):
    """Mean cross entropy at the last layer plus the regularizer.

    ``U`` is a trajectory of shape ``(N+1, q, b)`` (or just the final state).
    """
    uN = U[-1] if np.ndim(U) == 3 else U
    if uN.shape[1] != C.shape[1]:
        raise DimensionError(f"trajectory batch {uN.shape[1]} does not match {C.shape[1]} targets")
    loss = float(np.mean(cross_entropy(uN, C, controls.W, controls.mu)))
    return ObjectiveValue(loss, regularizer(controls, h, reg.tik, reg.ddt, reg.cls))


def terminal_adjoint(uN, C, W, mu, s):
    """Adjoint seed (1/s) W^T (S - c) for every column of the batch."""
    return W.T @ (softmax_predict(uN, W, mu) - C) / s


def classifier_gradient(uN, C, W, mu, gamma_cls, s=None):
    """Gradients of the objective with respect to ``W`` and ``mu``."""
    s = uN.shape[1] if s is None else s
    r = (softmax_predict(uN, W, mu) - C) / s
    return r @ uN.T + 2.0 * gamma_cls * W, r.sum(axis=1) + 2.0 * gamma_cls * mu


def predict_classes(uN, W, mu):
    return np.argmax(_logits(uN, W, mu), axis=0)
