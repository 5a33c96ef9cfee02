"""Optimizer tests: frozen recursions, dense-metric oracles, invariances."""

import numpy as np
import pytest

from qdgrad.metric import QDMetric, qd_reduce
from qdgrad.network import Network, make_sparse_layout
from qdgrad.optim import (
    ALGOS,
    DivergenceError,
    OptimizerConfig,
    OptimizerState,
    metric_warmup,
    optimizer_step,
    step_adagrad,
    step_sgd,
)
from qdgrad.outputs import CategoricalOutput, GaussianOutput


def bias_only_net(theta0):
    """0-input 1-output net: the model reduces to a single scalar parameter."""
    net = Network([0, 1], "sigmoid")
    net.set_params(np.array([theta0]))
    return net


def random_problem(rng, sizes, k, activation="sigmoid", batch=6):
    net = Network(sizes, activation)
    net.init_params(rng)
    model = CategoricalOutput(k)
    X = rng.uniform(0.0, 1.0, size=(batch, sizes[0]))
    T = rng.integers(0, k, size=batch)
    return net, model, X, T


# ---------------------------------------------------------------------------
# Plain steps
# ---------------------------------------------------------------------------


def test_sgd_frozen_values():
    theta = np.array([1.0, 5.0])
    step_sgd(theta, np.array([2.0, 0.0]), 0.1)
    np.testing.assert_array_equal(theta, [0.8, 5.0])


def test_sgd_quadratic_contracts_by_one_minus_eta():
    # f = theta^2 / 2 so grad = theta and the recursion is exact
    theta = np.array([0.7])
    for _ in range(10):
        step_sgd(theta, theta.copy(), 0.2)
    np.testing.assert_allclose(theta, [0.7 * 0.8**10], rtol=1e-15)


def test_adagrad_first_step_is_sign_like():
    net = Network([0, 2], "sigmoid")
    cfg = OptimizerConfig("adagrad", eta=0.1, epsilon=1e-8)
    state = OptimizerState(net, cfg)
    theta = np.array([1.0, 1.0])
    step_adagrad(theta, np.array([3.0, -0.5]), state, cfg)
    np.testing.assert_allclose(theta, [1.0 - 0.1, 1.0 + 0.1], atol=1e-8)


def test_adagrad_constant_gradient_step_approaches_eta():
    net = Network([0, 1], "sigmoid")
    cfg = OptimizerConfig("adagrad", eta=0.05, gamma=0.01, epsilon=1e-8)
    state = OptimizerState(net, cfg)
    g = np.array([2.0])
    theta = np.array([100.0])
    prev = theta.copy()
    for _ in range(3000):
        prev = theta.copy()
        step_adagrad(theta, g, state, cfg)
    assert abs((prev - theta)[0] - 0.05) < 1e-4 * 0.05


def test_adagrad_accumulator_bitwise_identical_to_dop():
    rng = np.random.default_rng(2)
    net, model, X, T = random_problem(rng, [3, 4, 2], 2)
    twin = net.copy()
    cfg_a = OptimizerConfig("adagrad", eta=0.1)
    cfg_d = OptimizerConfig("dop", eta=0.1)
    st_a = OptimizerState(net, cfg_a)
    st_d = OptimizerState(twin, cfg_d)
    optimizer_step(net, model, X, T, st_a, cfg_a)
    optimizer_step(twin, model, X, T, st_d, cfg_d)
    np.testing.assert_array_equal(st_a.metric.diag, st_d.metric.diag)


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig("newton", 0.1)
    with pytest.raises(ValueError):
        OptimizerConfig("sgd", -0.1)
    with pytest.raises(ValueError):
        OptimizerConfig("sgd", 0.1, gamma=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig("sgd", 0.1, epsilon=-1e-9)
    with pytest.raises(ValueError):
        OptimizerConfig("dmcnat", 0.1, n_mc=0)
    assert OptimizerConfig("qdnat", 0.1).quasi
    assert not OptimizerConfig("dnat", 0.1).quasi
    assert not OptimizerConfig("sgd", 0.1).needs_metric


def test_state_metric_modes():
    net = Network([2, 2], "sigmoid")
    assert OptimizerState(net, OptimizerConfig("sgd", 0.1)).metric is None
    assert OptimizerState(net, OptimizerConfig("adagrad", 0.1)).metric.quasi is False
    assert OptimizerState(net, OptimizerConfig("dop", 0.1)).metric.quasi is False
    assert OptimizerState(net, OptimizerConfig("qdmcnat", 0.1)).metric.quasi is True


# ---------------------------------------------------------------------------
# Noiseless 1-D quadratic: the op pathology and the natural fix
# ---------------------------------------------------------------------------


def test_op_quadratic_overshoots_through_zero():
    # loss = theta^2/2: op preconditioning gives theta <- theta - eta/theta
    net = bias_only_net(1e-3)
    model = GaussianOutput(1)
    cfg = OptimizerConfig("dop", eta=0.1, gamma=1.0, epsilon=0.0)
    state = OptimizerState(net, cfg)
    X = np.zeros((1, 0))
    T = np.array([[0.0]])
    optimizer_step(net, model, X, T, state, cfg)
    theta = net.get_params()[0]
    np.testing.assert_allclose(theta, 1e-3 - 0.1 / 1e-3, rtol=1e-12)
    assert theta < 0 and abs(theta) > 10 * 1e-3  # blasted far past the optimum


def test_natural_quadratic_contracts_exactly():
    net = bias_only_net(0.5)
    model = GaussianOutput(1)
    cfg = OptimizerConfig("dnat", eta=0.1, gamma=1.0, epsilon=0.0)
    state = OptimizerState(net, cfg)
    X = np.zeros((1, 0))
    T = np.array([[0.0]])
    for _ in range(10):
        optimizer_step(net, model, X, T, state, cfg)
    np.testing.assert_allclose(net.get_params()[0], 0.5 * 0.9**10, rtol=1e-13)


def test_identity_metric_reduces_to_sgd():
    rng = np.random.default_rng(3)
    net, model, X, T = random_problem(rng, [3, 3, 2], 2)
    tr = net.forward(X, mode="eval")
    g = net.backprop(tr, model.loss_output_grad(tr.output, T)) / len(X)
    m = QDMetric(net.layout, quasi=True)
    m.diag[:] = 1.0
    np.testing.assert_allclose(m.solve(g, 0.0), g, rtol=1e-15)


# ---------------------------------------------------------------------------
# Metric construction against dense oracles
# ---------------------------------------------------------------------------


def test_qdnat_first_step_matches_dense_fisher_reduction():
    rng = np.random.default_rng(4)
    net, model, X, T = random_problem(rng, [2, 3, 2], 2, batch=3)
    cfg = OptimizerConfig("qdnat", eta=0.01)
    state = OptimizerState(net, cfg)
    theta = net.get_params()

    dense = np.zeros((net.layout.dim, net.layout.dim))
    for s in range(len(X)):
        tr = net.forward(X[s], mode="eval")
        p = model.probs(tr.output)
        for c in range(2):
            seed = p.copy()
            seed[c] -= 1.0
            v = net.backprop(tr, seed)
            dense += p[c] * np.outer(v, v) / len(X)
    ref = qd_reduce(dense, net.layout, quasi=True)

    optimizer_step(net, model, X, T, state, cfg)  # first minibatch: gamma = 1
    np.testing.assert_allclose(state.metric.diag, ref.diag, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(state.metric.row, ref.row, rtol=1e-10, atol=1e-14)
    assert not np.array_equal(net.get_params(), theta)


def test_moving_average_second_step_uses_gamma():
    rng = np.random.default_rng(5)
    net, model, X, T = random_problem(rng, [2, 2, 2], 2, batch=4)
    cfg = OptimizerConfig("dop", eta=1e-9, gamma=0.25)
    state = OptimizerState(net, cfg)
    optimizer_step(net, model, X, T, state, cfg)
    m1 = state.metric.diag.copy()
    # eta ~ 0 so the parameters (and hence the fresh batch metric) are frozen
    optimizer_step(net, model, X, T, state, cfg)
    np.testing.assert_allclose(state.metric.diag, 0.75 * m1 + 0.25 * m1, rtol=1e-6)


def test_metric_warmup_equals_first_step_metric_and_is_linear():
    rng = np.random.default_rng(6)
    net, model, X, T = random_problem(rng, [3, 4, 2], 2, batch=8)
    cfg = OptimizerConfig("qdop", eta=0.1)

    st_warm = OptimizerState(net, cfg)
    metric_warmup(net, model, X, T, st_warm, cfg)
    assert st_warm.metric.initialized

    st_step = OptimizerState(net.copy(), cfg)
    net2 = net.copy()
    optimizer_step(net2, model, X, T, st_step, cfg)
    np.testing.assert_array_equal(st_warm.metric.diag, st_step.metric.diag)
    np.testing.assert_array_equal(st_warm.metric.row, st_step.metric.row)

    st_a = OptimizerState(net, cfg)
    st_b = OptimizerState(net, cfg)
    metric_warmup(net, model, X[:3], T[:3], st_a, cfg)
    metric_warmup(net, model, X[3:], T[3:], st_b, cfg)
    blend = (3 * st_a.metric.diag + 5 * st_b.metric.diag) / 8
    np.testing.assert_allclose(st_warm.metric.diag, blend, rtol=1e-12)

    with pytest.raises(ValueError):
        metric_warmup(net, model, X[:0], T[:0], OptimizerState(net, cfg), cfg)


def test_warmed_metric_solves_with_zero_epsilon():
    rng = np.random.default_rng(7)
    net, model, X, T = random_problem(rng, [4, 5, 3], 3, batch=16)
    cfg = OptimizerConfig("qdop", eta=0.1, epsilon=0.0)
    state = OptimizerState(net, cfg)
    metric_warmup(net, model, X, T, state, cfg)
    tr = net.forward(X, mode="eval")
    g = net.backprop(tr, model.loss_output_grad(tr.output, T)) / len(X)
    assert np.isfinite(state.metric.solve(g, 0.0)).all()


def test_mcnat_metric_expectation_matches_nat():
    # E over pseudo-targets of the mc metric is the exact Fisher metric
    rng = np.random.default_rng(8)
    net, model, X, T = random_problem(rng, [2, 3, 2], 2, batch=2)
    from qdgrad.optim import _metric_batch

    tr = net.forward(X, mode="eval")
    cfg_mc = OptimizerConfig("qdmcnat", eta=0.1)
    cfg_nat = OptimizerConfig("qdnat", eta=0.1)
    nat_diag, nat_row = _metric_batch(net, model, tr, None, cfg_nat, None)

    n = 10_000
    s1_d = np.zeros(net.layout.dim)
    s2_d = np.zeros(net.layout.dim)
    s1_r = np.zeros(net.layout.dim)
    s2_r = np.zeros(net.layout.dim)
    for _ in range(n):
        d, r = _metric_batch(net, model, tr, None, cfg_mc, rng)
        s1_d += d
        s2_d += d * d
        s1_r += r
        s2_r += r * r
    for s1, s2, ref in ((s1_d, s2_d, nat_diag), (s1_r, s2_r, nat_row)):
        mean = s1 / n
        se = np.sqrt(np.maximum(s2 / n - mean**2, 0.0) / n)
        assert np.all(np.abs(mean - ref) <= 3.0 * se + 1e-12)


def test_mcnat_multiple_draws_average():
    rng = np.random.default_rng(9)
    net, model, X, T = random_problem(rng, [2, 3, 2], 2, batch=4)
    cfg = OptimizerConfig("qdmcnat", eta=0.1, n_mc=3)
    state = OptimizerState(net, cfg)
    optimizer_step(net, model, X, T, state, cfg, rng=np.random.default_rng(0))
    assert state.metric.initialized
    assert np.all(state.metric.diag >= 0.0)


# ---------------------------------------------------------------------------
# Reports, divergence, variance learning
# ---------------------------------------------------------------------------


def test_step_report_fields():
    rng = np.random.default_rng(10)
    net, model, X, T = random_problem(rng, [3, 3, 2], 2)
    cfg = OptimizerConfig("sgd", eta=0.5)
    state = OptimizerState(net, cfg)
    rep = optimizer_step(net, model, X, T, state, cfg)
    assert rep.loss > 0.0 and np.isfinite(rep.loss)
    assert rep.grad_norm > 0.0
    np.testing.assert_allclose(rep.step_norm, 0.5 * rep.grad_norm, rtol=1e-12)
    assert state.t == 1


def test_divergence_raises_and_leaves_params_untouched():
    net = Network([1, 1], "sigmoid")
    net.set_params(np.array([1e200, 0.0]))
    model = GaussianOutput(1)
    cfg = OptimizerConfig("sgd", eta=0.1)
    state = OptimizerState(net, cfg)
    before = net.get_params()
    with pytest.raises(DivergenceError) as exc:
        optimizer_step(net, model, np.array([[1.0]]), np.array([[0.0]]), state, cfg)
    assert exc.value.eta == 0.1
    np.testing.assert_array_equal(net.get_params(), before)


def test_learned_variance_takes_sgd_step():
    rng = np.random.default_rng(11)
    net = Network([2, 2], "sigmoid")
    net.init_params(rng)
    model = GaussianOutput(2, sigma=1.0, learn_variance=True)
    X = rng.uniform(size=(5, 2))
    T = rng.standard_normal((5, 2))
    cfg = OptimizerConfig("sgd", eta=0.2)
    state = OptimizerState(net, cfg)
    tr = net.forward(X, mode="eval")
    expected = model.log_sigma - 0.2 * model.variance_grad(tr.output, T).mean(axis=0)
    expected = np.maximum(expected, np.log(1.0 / 256.0))
    optimizer_step(net, model, X, T, state, cfg)
    np.testing.assert_allclose(model.log_sigma, expected, rtol=1e-12)


@pytest.mark.parametrize("algo", [a for a in ALGOS if "mc" not in a])
def test_all_non_mc_algos_step_without_rng(algo):
    rng = np.random.default_rng(12)
    net, model, X, T = random_problem(rng, [3, 4, 3], 3)
    cfg = OptimizerConfig(algo, eta=0.01)
    state = OptimizerState(net, cfg)
    before = net.get_params()
    rep = optimizer_step(net, model, X, T, state, cfg, rng=None)
    assert np.isfinite(rep.loss)
    assert not np.array_equal(net.get_params(), before)


# ---------------------------------------------------------------------------
# Rescaling invariance of the diagonal family
# ---------------------------------------------------------------------------


def rescaled_problem(rng, c, j):
    sizes = [4, 5, 3]
    net, model, X, T = random_problem(rng, sizes, 3, batch=8)
    net_s = net.copy()
    net_s.weights[0][:, j] /= c
    net_s.version += 1
    X_s = X.copy()
    X_s[:, j] *= c
    return net, net_s, model, X, X_s, T


def map_back(net_s, c, j):
    theta = net_s.copy()
    theta.weights[0][:, j] *= c
    theta.version += 1
    return theta.get_params()


@pytest.mark.parametrize("algo", ["dop", "dnat"])
def test_diagonal_family_invariant_to_input_rescaling(algo):
    rng = np.random.default_rng(13)
    c, j = 10.0, 1
    net, net_s, model, X, X_s, T = rescaled_problem(rng, c, j)
    cfg = OptimizerConfig(algo, eta=0.05, epsilon=0.0)
    st = OptimizerState(net, cfg)
    st_s = OptimizerState(net_s, cfg)
    for _ in range(10):
        optimizer_step(net, model, X, T, st, cfg)
        optimizer_step(net_s, model, X_s, T, st_s, cfg)
        a = net.get_params()
        b = map_back(net_s, c, j)
        rel = np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-12))
        assert rel <= 1e-6


def test_dmcnat_invariant_to_input_rescaling_with_matched_rng():
    rng = np.random.default_rng(14)
    c, j = 10.0, 1
    net, net_s, model, X, X_s, T = rescaled_problem(rng, c, j)
    cfg = OptimizerConfig("dmcnat", eta=0.05, epsilon=0.0)
    st = OptimizerState(net, cfg)
    st_s = OptimizerState(net_s, cfg)
    for step in range(10):
        optimizer_step(net, model, X, T, st, cfg, rng=np.random.default_rng(100 + step))
        optimizer_step(net_s, model, X_s, T, st_s, cfg, rng=np.random.default_rng(100 + step))
        a = net.get_params()
        b = map_back(net_s, c, j)
        rel = np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-12))
        assert rel <= 1e-6


def test_adagrad_breaks_rescaling_invariance():
    rng = np.random.default_rng(15)
    c, j = 10.0, 1
    net, net_s, model, X, X_s, T = rescaled_problem(rng, c, j)
    cfg = OptimizerConfig("adagrad", eta=0.05, epsilon=0.0)
    st = OptimizerState(net, cfg)
    st_s = OptimizerState(net_s, cfg)
    for _ in range(10):
        optimizer_step(net, model, X, T, st, cfg)
        optimizer_step(net_s, model, X_s, T, st_s, cfg)
    a = net.get_params()
    b = map_back(net_s, c, j)
    rel = np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-12))
    assert rel > 1e-3
