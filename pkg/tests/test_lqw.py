import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitquant.errors import NumericError, ParameterError, ShapeError
from bitquant.lqw import (
    OptimConfig,
    WeightQuantParams,
    level_set,
    lqw_backward,
    lqw_forward,
    lqw_update,
    poly_lr,
    sign,
)

from oracles import central_diff, rel_err


def make(n=5, k=2, seed=0, filters=None):
    rng = np.random.default_rng(seed)
    shape = (n, k) if filters is None else (filters, n, k)
    bshape = (k,) if filters is None else (filters, k)
    return WeightQuantParams(rng.uniform(-1, 1, size=shape), rng.uniform(0.1, 1, size=bshape))


def test_sign_zero_is_plus_one():
    np.testing.assert_array_equal(sign(np.array([-0.5, 0.0, 0.3])), [-1, 1, 1])


def test_forward_examples():
    p = WeightQuantParams(np.ones((4, 3)), np.array([0.5, 0.25, 1.0]))
    np.testing.assert_allclose(lqw_forward(p), np.full(4, 1.75))
    p = WeightQuantParams(np.array([[0.3], [-0.2], [0.0]]), np.array([0.7]))
    np.testing.assert_allclose(lqw_forward(p), [0.7, -0.7, 0.7])
    p = WeightQuantParams(np.array([[0.3, -0.2], [-0.5, 0.9]]), np.array([1.0, 2.0]))
    np.testing.assert_allclose(lqw_forward(p), [-1.0, 1.0])


@settings(max_examples=50)
@given(st.integers(1, 4), st.integers(1, 20), st.integers(0, 2 ** 31))
def test_level_membership(k, n, seed):
    p = make(n, k, seed)
    levels = level_set(p.basis)
    wq = lqw_forward(p)
    assert np.all(np.min(np.abs(wq[:, None] - levels[None, :]), axis=1) <= 1e-12)


def test_backward_examples():
    p = make(4, 3)
    gs, gv = lqw_backward(np.zeros(4), p)
    assert not gs.any() and not gv.any()
    p = WeightQuantParams(np.array([[0.4]]), np.array([0.3]))
    gs, gv = lqw_backward(np.array([2.0]), p)
    np.testing.assert_allclose(gv, [2.0])
    np.testing.assert_allclose(gs, [[0.6]])


def test_backward_analytic_chain_rule():
    p = make(7, 3, seed=2)
    g = np.random.default_rng(3).normal(size=7)
    gs, gv = lqw_backward(g, p)
    np.testing.assert_allclose(gs, g[:, None] * p.basis[None, :])
    np.testing.assert_allclose(gv, [sum(g[i] * sign(p.shadow[i, k]) for i in range(7)) for k in range(3)])


@pytest.mark.parametrize("seed", range(10))
def test_grad_v_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(2, 12)), int(rng.integers(1, 4))
    p = make(n, k, seed)
    t = rng.normal(size=n)

    def loss():
        r = lqw_forward(p) - t
        return float(r @ r)

    _, gv = lqw_backward(2 * (lqw_forward(p) - t), p)
    fd = central_diff(loss, p.basis)
    assert rel_err(gv, fd) <= 1e-6


def test_backward_shape_error():
    with pytest.raises(ShapeError):
        lqw_backward(np.zeros(3), make(4, 2))


def test_update_zero_grads_no_decay_is_fixed_point():
    p = make(6, 2)
    before = (p.shadow.copy(), p.basis.copy())
    opt = OptimConfig(weight_decay_q=0.0)
    lqw_update(p, (np.zeros_like(p.shadow), np.zeros_like(p.basis)), opt, 0.1)
    np.testing.assert_array_equal(p.shadow, before[0])
    np.testing.assert_array_equal(p.basis, before[1])


def test_update_clip_boundary():
    p = WeightQuantParams(np.array([[1.0, -1.0]]), np.array([1.0, 1.0]))
    opt = OptimConfig(momentum=0.0, weight_decay_q=0.0)
    lqw_update(p, (np.array([[-5.0, 5.0]]), np.zeros(2)), opt, 0.1)
    assert p.shadow.tolist() == [[1.0, -1.0]]


def test_update_basis_hand_arithmetic():
    p = WeightQuantParams(np.array([[0.5]]), np.array([1.0]))
    opt = OptimConfig(momentum=0.0, weight_decay_q=0.0, gamma_v=1 / 50)
    lqw_update(p, (np.zeros((1, 1)), np.array([1.0])), opt, 0.1)
    assert p.basis[0] == pytest.approx(1.0 - 0.002, abs=1e-15)


def test_update_shadow_uses_gamma_s():
    p = WeightQuantParams(np.array([[0.0]]), np.array([1.0]))
    opt = OptimConfig(momentum=0.0, gamma_s=0.5)
    lqw_update(p, (np.array([[0.4]]), np.zeros(1)), opt, 0.1)
    assert p.shadow[0, 0] == pytest.approx(-0.02, abs=1e-15)


def test_update_nesterov_momentum_two_steps():
    # buf_1 = g, step_1 = g + m*g; buf_2 = m*g + g, step_2 = g + m*buf_2
    p = WeightQuantParams(np.array([[0.0]]), np.array([1.0]))
    opt = OptimConfig(momentum=0.9, weight_decay_q=0.0, gamma_v=1.0)
    g = (np.zeros((1, 1)), np.array([1.0]))
    lqw_update(p, g, opt, 0.01)
    assert p.basis[0] == pytest.approx(1.0 - 0.01 * 1.9)
    lqw_update(p, g, opt, 0.01)
    assert p.basis[0] == pytest.approx(1.0 - 0.01 * 1.9 - 0.01 * (1 + 0.9 * 1.9))


def test_update_weight_decay_on_basis_only():
    p = WeightQuantParams(np.array([[0.5]]), np.array([2.0]))
    opt = OptimConfig(momentum=0.0, weight_decay_q=0.1, gamma_v=1.0)
    lqw_update(p, (np.zeros((1, 1)), np.zeros(1)), opt, 0.1)
    assert p.basis[0] == pytest.approx(2.0 - 0.1 * 0.1 * 2.0)
    assert p.shadow[0, 0] == 0.5


def test_update_rejects_non_finite():
    p = make(3, 2)
    with pytest.raises(NumericError):
        lqw_update(p, (np.full((3, 2), np.nan), np.zeros(2)), OptimConfig(), 0.1)
    with pytest.raises(ShapeError):
        lqw_update(p, (np.zeros((2, 2)), np.zeros(2)), OptimConfig(), 0.1)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31))
def test_clip_invariant_many_updates(seed):
    rng = np.random.default_rng(seed)
    p = make(8, 3, seed)
    opt = OptimConfig()
    for _ in range(20):
        g = (rng.normal(scale=50, size=p.shadow.shape), rng.normal(size=p.basis.shape))
        lqw_update(p, g, opt, 0.5)
        assert np.all(np.abs(p.shadow) <= 1.0)


def test_descent_on_convex_surrogate():
    rng = np.random.default_rng(0)
    p = make(30, 3, seed=1)
    t = rng.normal(size=30)
    opt = OptimConfig(weight_decay_q=0.0)

    def loss():
        r = lqw_forward(p) - t
        return float(r @ r)

    # small enough that Nesterov momentum 0.9 stays overdamped on this quadratic
    eta = 1e-4
    start = prev = loss()
    for _ in range(100):
        _, gv = lqw_backward(2 * (lqw_forward(p) - t), p)
        lqw_update(p, (np.zeros_like(p.shadow), gv), opt, eta)
        cur = loss()
        assert cur <= prev + 1e-12
        prev = cur
    assert prev < start


def test_per_filter_isolation():
    p = make(5, 2, filters=3)
    before = p.shadow.copy(), p.basis.copy()
    f = p.filter(1)
    rng = np.random.default_rng(0)
    lqw_update(f, (rng.normal(size=(5, 2)), rng.normal(size=2)), OptimConfig(), 0.1)
    for i in (0, 2):
        np.testing.assert_array_equal(p.shadow[i], before[0][i])
        np.testing.assert_array_equal(p.basis[i], before[1][i])
    assert not np.array_equal(p.basis[1], before[1][1])


def test_init_ranges():
    p = WeightQuantParams.init(4, 10, 3, 0.8, np.random.default_rng(0))
    assert p.shadow.shape == (4, 10, 3) and np.all(np.abs(p.shadow) <= 1)
    np.testing.assert_allclose(p.basis[2], [0.4, 0.2, 0.1])


def test_params_validation():
    with pytest.raises(ParameterError):
        WeightQuantParams(np.array([[1.5]]), np.array([1.0]))
    with pytest.raises(ShapeError):
        WeightQuantParams(np.zeros((3, 2)), np.zeros(3))


def test_poly_lr_examples():
    opt = OptimConfig(lr=0.1, final_lr=0.0, epochs=2)
    assert poly_lr(0, opt) == pytest.approx(0.1)
    assert poly_lr(1, opt) == pytest.approx(0.025)
    d = OptimConfig()
    assert poly_lr(0, d) == d.lr
    assert poly_lr(d.epochs, d) == 1e-6
    assert poly_lr(d.epochs + 10, d) == 1e-6


def test_optim_config_defaults_and_validation():
    d = OptimConfig()
    assert (d.lr, d.gamma_v, d.momentum, d.power, d.final_lr, d.epochs) == (0.02, 1 / 50, 0.9, 2.0, 1e-6, 120)
    with pytest.raises(ParameterError):
        OptimConfig(lr=0)
    with pytest.raises(ParameterError):
        OptimConfig(momentum=1.0)
