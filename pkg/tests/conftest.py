import numpy as np
import pytest

from layerpar.network import Conv, Dense, LayerWeights, Network, SmoothReLU, Tanh


def dense_net(q=3, N=4, n_f=2, n_c=3, act="tanh", T=1.0, opening="dense", opening_activation=False):
    acts = {"tanh": Tanh(), "smoothrelu": SmoothReLU()}
    return Network(Dense(q), acts[act], N, n_f, n_c, T, opening, opening_activation)


def conv_net(ch=2, size=4, N=4, n_c=3, act="tanh", T=1.0):
    acts = {"tanh": Tanh(), "smoothrelu": SmoothReLU()}
    return Network(Conv(ch, (size, size)), acts[act], N, size * size, n_c, T, "identity", False)


def random_weights(kind, rng, scale=0.5):
    return LayerWeights(kind, scale * rng.standard_normal(kind.n_params))


def one_hot_columns(rng, n_c, b):
    C = np.zeros((n_c, b))
    C[rng.integers(0, n_c, size=b), np.arange(b)] = 1.0
    return C


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        status, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
