import numpy as np
import pytest

from conftest import dense_net, one_hot_columns
from layerpar import mgrit
from layerpar.adjoint import AdjointSystem, serial_backprop
from layerpar.config import peaks_config, toy_config
from layerpar.data import Dataset, generate_peaks, make_toy, one_hot
from layerpar.network import Regularization, softmax_predict
from layerpar.optimizer import (
    HISTORY_COLUMNS,
    LbfgsMemory,
    NumericalError,
    accuracy,
    assemble_reduced_gradient,
    finite_difference_gradient,
    full_objective,
    gradient_check,
    lbfgs_direction,
    line_search,
    relative_error,
    train,
    train_serial,
    train_simultaneous,
    validation_accuracy,
)


def toy_problem(seed=0, gammas=(0.0, 0.0, 0.0)):
    cfg = toy_config(gamma_tik=gammas[0], gamma_ddt=gammas[1], gamma_cls=gammas[2])
    ds = make_toy(10, seed=seed)
    net = cfg.network(ds.n_features, ds.n_classes)
    controls = net.random_controls(np.random.default_rng(seed), 0.5)
    Y, C = ds.train()
    return cfg, net, controls, Y, C


# ---------------------------------------------------------------- reduced gradient


def test_zero_seed_zero_gradient():
    cfg, net, controls, Y, _ = toy_problem()
    U = mgrit.serial_propagate(net, controls, Y)
    S = softmax_predict(U[-1], controls.W, controls.mu)
    system = AdjointSystem(net, controls, U, cfg.hierarchy(), S)
    g = assemble_reduced_gradient(net, controls, U, serial_backprop(system), Y, S, Regularization(0, 0, 0))
    assert np.allclose(g.flat(), 0, atol=1e-16)


@pytest.mark.parametrize("gamma", [0.0, 1e-3])
def test_gradient_matches_finite_differences(gamma):
    cfg, net, controls, Y, C = toy_problem(gammas=(gamma,) * 3)
    assert Y.shape[1] == 5
    report = gradient_check(cfg, make_toy(10, seed=0))
    assert report.passed and report.max_rel_error < 1e-5
    reg = cfg.regularization
    U = mgrit.serial_propagate(net, controls, Y)
    Ubar = serial_backprop(AdjointSystem(net, controls, U, cfg.hierarchy(), C))
    g = assemble_reduced_gradient(net, controls, U, Ubar, Y, C, reg).flat()
    fd = finite_difference_gradient(lambda z: full_objective(net, controls.from_vector(z), Y, C, reg),
                                    controls.to_vector())
    assert relative_error(g, fd) < 1e-5


def test_corrupted_vjp_fails_check():
    report = gradient_check(toy_config(), make_toy(10, seed=0), corrupt=True)
    assert not report.passed


def test_seed_scaling_scales_data_gradient():
    cfg, net, controls, Y, C = toy_problem()
    U = mgrit.serial_propagate(net, controls, Y)
    system = AdjointSystem(net, controls, U, cfg.hierarchy(), C)
    Ubar = serial_backprop(system)
    reg = Regularization(0, 0, 0)
    g1 = assemble_reduced_gradient(net, controls, U, Ubar, Y, C, reg)
    g2 = assemble_reduced_gradient(net, controls, U, 2 * Ubar, Y, C, reg)
    assert np.allclose(g2.layer_grads, 2 * g1.layer_grads, rtol=1e-14)
    assert np.allclose(g2.opening_grad, 2 * g1.opening_grad, rtol=1e-14)


def test_gradient_layout_matches_controls():
    cfg, net, controls, Y, C = toy_problem()
    U = mgrit.serial_propagate(net, controls, Y)
    Ubar = serial_backprop(AdjointSystem(net, controls, U, cfg.hierarchy(), C))
    g = assemble_reduced_gradient(net, controls, U, Ubar, Y, C, cfg.regularization)
    assert g.flat().shape == controls.to_vector().shape
    assert g.norm == pytest.approx(np.linalg.norm(g.flat()))
    with pytest.raises(ValueError):
        assemble_reduced_gradient(net, controls, U[:-1], Ubar[:-1], Y, C, cfg.regularization)


# ---------------------------------------------------------------- L-BFGS


def test_lbfgs_empty_memory_is_steepest_descent(rng):
    g = rng.standard_normal(6)
    assert np.array_equal(lbfgs_direction(g, LbfgsMemory(10)), -g)


def test_lbfgs_single_pair_hand_computed():
    mem = LbfgsMemory(10)
    e1 = np.eye(3)[0]
    assert mem.update(e1, e1)
    assert np.allclose(lbfgs_direction(e1, mem), -e1, atol=1e-16)


def test_lbfgs_quadratic_converges():
    rng = np.random.default_rng(3)
    Q = rng.standard_normal((5, 5))
    A = Q @ Q.T + 5 * np.eye(5)
    b = rng.standard_normal(5)
    x = np.zeros(5)
    mem = LbfgsMemory(5)
    g = A @ x - b
    for _ in range(12):
        d = lbfgs_direction(g, mem)
        # exact step along d; with it L-BFGS terminates on quadratics like CG
        alpha = -np.dot(g, d) / (d @ A @ d)
        x_new = x + alpha * d
        g_new = A @ x_new - b
        mem.update(x_new - x, g_new - g)
        x, g = x_new, g_new
        if np.linalg.norm(g) < 1e-10:
            break
    assert np.linalg.norm(g) < 1e-10
    assert np.allclose(x, np.linalg.solve(A, b))


def test_lbfgs_memory_filters_and_bounds(rng):
    mem = LbfgsMemory(3)
    s = rng.standard_normal(4)
    assert not mem.update(s, -s)
    assert not mem.update(s, np.zeros(4))
    for _ in range(5):
        s = rng.standard_normal(4)
        mem.update(s, s + 0.1 * rng.standard_normal(4))
    assert len(mem) <= 3
    for s, y in mem.pairs:
        assert np.dot(s, y) > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y)
    mem.clear()
    assert len(mem) == 0


def test_lbfgs_direction_always_descends(rng):
    mem = LbfgsMemory(5)
    for _ in range(50):
        s, y = rng.standard_normal(6), rng.standard_normal(6)
        mem.update(s, y)
        g = rng.standard_normal(6)
        assert np.dot(g, lbfgs_direction(g, mem)) < 0


# ---------------------------------------------------------------- line search


def test_line_search_quadratic_halves_once():
    f = lambda x: float(x[0] ** 2)  # noqa: E731
    res = line_search(np.array([1.0]), np.array([-2.0]), np.array([2.0]), f, c1=1e-4)
    assert res.ok and res.alpha == 0.5 and res.value == 0.0


def test_line_search_steepest_descent_terminates(rng):
    A = np.diag([1.0, 10.0, 100.0])
    f = lambda x: 0.5 * x @ A @ x  # noqa: E731
    x = rng.standard_normal(3)
    g = A @ x
    res = line_search(x, -g, g, f)
    assert res.ok and res.alpha > 0
    assert res.value <= f(x) + 1e-4 * res.alpha * np.dot(g, -g)


def test_line_search_constant_objective_returns_flag():
    res = line_search(np.zeros(2), np.array([-1.0, 0.0]), np.array([1.0, 0.0]), lambda x: 3.0,
                      max_backtracks=20)
    assert not res.ok
    assert res.alpha == pytest.approx(0.5**20)
    assert res.evaluations == 21


def test_line_search_rejects_ascent_direction():
    with pytest.raises(ValueError):
        line_search(np.zeros(1), np.ones(1), np.ones(1), lambda x: 0.0)


# ---------------------------------------------------------------- validation accuracy


def test_validation_accuracy_examples(rng):
    net = dense_net(q=3, N=4, n_f=2, n_c=5)
    controls = net.random_controls(rng)
    Y = rng.standard_normal((2, 30))
    U = mgrit.serial_propagate(net, controls, Y)
    pred = np.argmax(controls.W @ U[-1] + controls.mu[:, None], axis=0)
    assert validation_accuracy(net, controls, Y, one_hot(pred, 5)) == 1.0
    with pytest.raises(ValueError):
        validation_accuracy(net, controls, Y[:, :0], np.zeros((5, 0)))


def test_validation_accuracy_chance_level():
    ds = generate_peaks(1000, seed=5, val_fraction=0.0)
    cfg = peaks_config(layers=8)
    net = cfg.network(2, 5)
    accs = []
    for seed in range(10):
        controls = net.random_controls(np.random.default_rng(seed), 0.5)
        accs.append(validation_accuracy(net, controls, ds.features, ds.targets))
    assert abs(np.mean(accs) - 0.2) <= 0.05


def test_validation_accuracy_argmax_invariance(rng):
    net = dense_net(q=3, N=4, n_f=2, n_c=5)
    controls = net.random_controls(rng)
    Y = rng.standard_normal((2, 40))
    C = one_hot_columns(rng, 5, 40)
    base = validation_accuracy(net, controls, Y, C)
    shifted = controls.copy()
    shifted.mu += 17.0
    assert validation_accuracy(net, shifted, Y, C) == base


# ---------------------------------------------------------------- training loops


def test_zero_iterations_returns_initial_controls():
    cfg = toy_config(max_iter=0)
    ds = make_toy(10)
    net = cfg.network(ds.n_features, ds.n_classes)
    init = net.init_controls(np.random.default_rng(cfg.seed), cfg.init_std, cfg.opening_std)
    state = train_serial(cfg, ds)
    assert state.history == []
    assert np.array_equal(state.controls.to_vector(), init.to_vector())


def test_training_is_deterministic():
    cfg = toy_config(max_iter=15)
    ds = make_toy(10)
    a, b = train_serial(cfg, ds), train_serial(cfg, ds)
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_time"} for r in h]  # noqa: E731
    assert strip(a.history) == strip(b.history)
    assert np.array_equal(a.controls.to_vector(), b.controls.to_vector())


def test_history_rows_and_armijo():
    cfg = toy_config(max_iter=20)
    state = train_serial(cfg, make_toy(10))
    its = state.column("iteration")
    assert list(its) == list(range(1, len(its) + 1))
    assert all(tuple(r) == HISTORY_COLUMNS for r in state.history)
    obj = state.column("objective")
    assert np.all(np.diff(obj) <= 0)


def test_one_shot_m1_m2_one_decreases_objective():
    cfg = toy_config(mode="simultaneous", m1=1, m2=1, max_iter=20)
    state = train(cfg, make_toy(10))
    obj = state.column("objective")
    assert len(obj) == 20
    assert obj[-1] < obj[0]


def test_one_shot_worker_counts_agree():
    ds = generate_peaks(200, seed=1)
    cfg = peaks_config(layers=16, mode="simultaneous", max_iter=5)
    a = train_simultaneous(cfg, ds)
    b = train_simultaneous(cfg.replace(workers=3), ds)
    assert [r["objective"] for r in a.history] == [r["objective"] for r in b.history]
    assert np.array_equal(a.controls.to_vector(), b.controls.to_vector())


def test_simultaneous_requires_positive_m():
    with pytest.raises(ValueError):
        toy_config(mode="simultaneous", m1=0)


def test_nan_guard():
    cfg = toy_config(max_iter=3)
    ds = make_toy(10)
    net = cfg.network(ds.n_features, ds.n_classes)
    controls = net.random_controls(np.random.default_rng(0))
    controls.W[0, 0] = np.nan
    with pytest.raises(NumericalError) as err:
        train_serial(cfg, ds, controls)
    assert err.value.iteration == 1


def test_stopping_on_target_accuracy():
    cfg = toy_config(max_iter=50, target_accuracy=0.0)
    state = train_serial(cfg, make_toy(10))
    assert state.stop_reason == "target_accuracy" and len(state.history) == 1


def test_accuracy_helper(rng):
    net = dense_net(q=3, N=2, n_c=2)
    controls = net.random_controls(rng)
    uN = rng.standard_normal((3, 8))
    pred = np.argmax(controls.W @ uN + controls.mu[:, None], axis=0)
    assert accuracy(net, controls, uN, one_hot(pred, 2)) == 1.0
    assert accuracy(net, controls, uN, one_hot(1 - pred, 2)) == 0.0


def test_dataset_fixture_in_simplex():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([[0.5, 1.0], [0.6, 0.0]]), np.array([0]), np.array([1]))
