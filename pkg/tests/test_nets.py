import numpy as np
import pytest

from crow.errors import NonFiniteError, ShapeError
from crow.nets import (GRU, Adam, Dense, Gate, Subnet, adam_step, dense_apply, dense_pullback,
                       gate_apply, gate_forward, gru_forward, gru_pullback, gru_step,
                       residual_stack_apply, residual_stack_forward, residual_stack_pullback,
                       subnet_apply, subnet_forward, subnet_pullback, flatten, unflatten_into,
                       zeros_like_tree)
from crow.numerics import Rng, finite_difference_gradient, finite_difference_jacobian

from conftest import rel_err


def randomize(tree, rng, scale=0.7):
    flat = flatten(tree)
    unflatten_into(tree, scale * rng.normal(flat.size))
    return tree


def param_grad_check(tree, loss_and_grad):
    """Compare the analytic parameter gradient against central differences."""
    theta0 = flatten(tree)
    _, g_tree = loss_and_grad()
    analytic = flatten(g_tree)

    def loss(theta):
        unflatten_into(tree, theta)
        try:
            return loss_and_grad(need_grad=False)[0]
        finally:
            unflatten_into(tree, theta0)

    return rel_err(analytic, finite_difference_gradient(loss, theta0))


def test_dense_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(dense_apply(Dense(np.eye(3), np.zeros(3)), x), x)
    b = np.array([4.0, 5.0])
    assert np.array_equal(dense_apply(Dense(np.zeros((2, 3)), b), x), b)
    with pytest.raises(ShapeError):
        dense_apply(Dense(np.eye(3), np.zeros(3)), np.zeros(4))


def test_dense_pullback(rng):
    p = Dense.init(rng, 4, 3)
    p.bias[:] = rng.normal(3)
    x, w = rng.normal((5, 4)), rng.normal((5, 3))

    def lg(need_grad=True):
        grad = zeros_like_tree(p) if need_grad else None
        out = float(np.sum(w * dense_apply(p, x)))
        if need_grad:
            dense_pullback(p, x, w, grad)
        return out, grad

    assert param_grad_check(p, lg) < 1e-6
    g_x = dense_pullback(p, x, w, None)
    fd = finite_difference_gradient(lambda xx: float(np.sum(w * dense_apply(p, xx.reshape(5, 4)))), x.ravel())
    assert rel_err(g_x, fd) < 1e-6


def test_residual_identity_cases(rng):
    x = rng.normal(6)
    zeros = [Dense.zeros(6, 6) for _ in range(3)]
    assert np.array_equal(residual_stack_apply(zeros, x), x)
    dead = [Dense(np.zeros((6, 6)), -np.ones(6))] + [Dense.zeros(6, 6) for _ in range(2)]
    assert np.array_equal(residual_stack_apply(dead, x), x)
    with pytest.raises(ShapeError, match="not square"):
        residual_stack_apply([Dense.zeros(6, 5)], x)


def test_residual_pullback(rng):
    layers = [randomize(Dense.zeros(16, 16), rng.spawn(i)) for i in range(3)]
    x, w = rng.normal(16), rng.normal(16)

    def lg(need_grad=True):
        out, cache = residual_stack_forward(layers, x)
        grads = [zeros_like_tree(l) for l in layers] if need_grad else None
        if need_grad:
            residual_stack_pullback(layers, cache, w, grads)
        return float(w @ out), grads

    assert param_grad_check(layers, lg) < 1e-5
    _, cache = residual_stack_forward(layers, x)
    g_x = residual_stack_pullback(layers, cache, w, None)
    fd = finite_difference_gradient(lambda xx: float(w @ residual_stack_apply(layers, xx)), x)
    assert rel_err(g_x, fd) < 1e-5


def test_gru_zero_params():
    p = GRU(np.zeros((18, 4)), np.zeros((18, 6)), np.zeros(18))
    assert np.array_equal(gru_step(p, np.ones(4), np.zeros(6)), np.zeros(6))


def test_gru_bounded(rng):
    for k in range(20):
        p = randomize(GRU.init(rng, 4, 6), rng.spawn(k), scale=1.0)
        h = 2.0 * rng.uniform(6) - 1.0
        out = gru_step(p, 2.0 * rng.normal(4), h)
        assert np.all(np.abs(out) < 1.0)


def test_gru_gate_layout(rng):
    p = GRU.init(rng, 3, 2)
    W, U, b = p.gate_view("reset")
    assert W.shape == (2, 3) and U.shape == (2, 2) and b.shape == (2,)
    W[...] = 7.0
    assert np.all(p.w_input[2:4] == 7.0)


def test_gru_pullback(rng):
    p = randomize(GRU.init(rng, 4, 6), rng)
    x, h, w = rng.normal(4), 0.5 * rng.normal(6), rng.normal(6)

    def lg(need_grad=True):
        out, cache = gru_forward(p, x, h)
        grad = zeros_like_tree(p) if need_grad else None
        if need_grad:
            gru_pullback(p, cache, w, grad)
        return float(w @ out), grad

    assert param_grad_check(p, lg) < 1e-5
    _, cache = gru_forward(p, x, h)
    g_x, g_h = gru_pullback(p, cache, w, None)
    assert rel_err(g_x, finite_difference_gradient(lambda xx: float(w @ gru_step(p, xx, h)), x)) < 1e-5
    assert rel_err(g_h, finite_difference_gradient(lambda hh: float(w @ gru_step(p, x, hh)), h)) < 1e-5


def test_subnet_zero_head(rng):
    p = Subnet.init(rng, 5, 3, 8)
    s, r, h = subnet_apply(p, rng.normal(5), rng.normal(8))
    assert np.all(s == 0.0) and np.all(r == 0.0) and h.shape == (8,)
    assert p.head.n_out == 6


def test_subnet_split_order(rng):
    p = Subnet.init(rng, 5, 3, 8, s_max=2.0)
    p.head.bias[:] = [0.1, 0.2, 0.3, 4.0, 5.0, 6.0]
    s, r, _ = subnet_apply(p, rng.normal(5), np.zeros(8))
    assert np.allclose(s, 2.0 * np.tanh(np.array([0.1, 0.2, 0.3]) / 2.0))
    assert np.array_equal(r, [4.0, 5.0, 6.0])


def test_subnet_pullback(rng):
    p = randomize(Subnet.init(rng, 5, 3, 6), rng)
    u, h = rng.normal(5), 0.5 * rng.normal(6)
    ws, wr, wh = rng.normal(3), rng.normal(3), rng.normal(6)

    def f(uu, hh):
        s, r, hn = subnet_apply(p, uu, hh)
        return float(ws @ s + wr @ r + wh @ hn)

    def lg(need_grad=True):
        s, r, hn, cache = subnet_forward(p, u, h)
        grad = zeros_like_tree(p) if need_grad else None
        if need_grad:
            subnet_pullback(p, cache, ws, wr, wh, grad)
        return float(ws @ s + wr @ r + wh @ hn), grad

    assert param_grad_check(p, lg) < 1e-5
    _, _, _, cache = subnet_forward(p, u, h)
    g_u, g_h = subnet_pullback(p, cache, ws, wr, wh, None)
    assert rel_err(g_u, finite_difference_gradient(lambda uu: f(uu, h), u)) < 1e-5
    assert rel_err(g_h, finite_difference_gradient(lambda hh: f(u, hh), h)) < 1e-5


def test_subnet_jacobian_wrt_u(rng):
    p = randomize(Subnet.init(rng, 4, 3, 5), rng)
    h = 0.3 * rng.normal(5)
    u = rng.normal(4)
    J = finite_difference_jacobian(lambda uu: np.concatenate(subnet_apply(p, uu, h)[:2]), u)
    _, _, _, cache = subnet_forward(p, u, h)
    rows = []
    for i in range(6):
        g = np.zeros(6)
        g[i] = 1.0
        rows.append(subnet_pullback(p, cache, g[:3], g[3:], None, None)[0])
    assert rel_err(np.array(rows), J) < 1e-5


def test_gate_values():
    g = Gate(Dense(np.zeros((3, 4)), np.zeros(3)))
    assert np.array_equal(gate_apply(g, np.ones(4)), [0.5, 0.5, 0.5])
    g = Gate(Dense(np.zeros((3, 4)), np.full(3, 50.0)))
    gate, log_gate, _ = gate_forward(g, np.ones(4))
    assert np.all(gate == 1.0) and np.all(np.isfinite(log_gate)) and np.all(log_gate < 0)
    g = Gate(Dense(np.zeros((2, 1)), np.array([500.0, -500.0])))
    gate, log_gate, _ = gate_forward(g, np.zeros(1))
    assert np.all(np.isfinite(log_gate)) and abs(log_gate[1] + 500.0) < 1e-9


def test_gate_range_sweep(rng):
    g = Gate.init(rng, 6, 4, bias=0.0)
    out = gate_apply(g, 3.0 * rng.normal((1000, 6)))
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_adam_zero_grad_and_first_step():
    p = np.array([1.0, 2.0])
    new, m, v = adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1)
    assert np.array_equal(new, p)
    new, _, _ = adam_step(np.array([0.0]), np.array([-3.0]), np.zeros(1), np.zeros(1), 1)
    assert abs(new[0] - 5e-4) < 1e-9


def test_adam_nan_names_parameter():
    with pytest.raises(NonFiniteError, match="trunk.0.weight"):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), np.zeros(2), np.zeros(2), 1,
                  name="trunk.0.weight")


def test_adam_convex_bowl():
    target = np.array([3.0, -1.0])
    params = {"p": np.zeros(2)}
    # the default 5e-4 travels only ~0.05 in 100 steps; the bowl needs a larger rate
    opt = Adam(lr=0.05)
    dists = []
    for _ in range(100):
        opt.step(params, {"p": 2.0 * (params["p"] - target)})
        dists.append(np.linalg.norm(params["p"] - target))
    assert all(b < a for a, b in zip(dists[4:], dists[5:]))
    assert dists[-1] < 0.1
    assert opt.state.t == 100
