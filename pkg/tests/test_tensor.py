"""Engine correctness: hand cases, finite-difference oracles, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from previewlab import tensor as T
from previewlab.optim import AdamState, adam_step
from previewlab.tensor import Tensor

from oracles import (
    fd_gradient,
    max_rel_err,
    ref_attention,
    ref_conv3d,
    ref_gelu,
    ref_layernorm,
)

SEEDS = range(8)
FD_TOL = 1e-3


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


# -- matmul ----------------------------------------------------------------------


def test_matmul_identity():
    eye = np.eye(3, dtype=np.float32)
    a = np.arange(9, dtype=np.float32).reshape(3, 3)
    out = T.matmul(Tensor(eye), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.0], [1.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[2.0], [4.0]])


def test_matmul_dim_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 5, 4), rand(rng, 4, 3)
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    out = T.matmul(ta, tb)
    loss = T.reduce_mean(out * out)
    loss.backward()
    ref = lambda x, y: np.mean((x @ y) ** 2)
    assert max_rel_err(ta.grad, fd_gradient(ref, [a, b], 0)) < FD_TOL
    assert max_rel_err(tb.grad, fd_gradient(ref, [a, b], 1)) < FD_TOL


# -- elementwise ------------------------------------------------------------------


def test_add_zero_is_identity():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.testing.assert_array_equal((Tensor(x) + 0.0).data, x)


def test_relu_hand():
    out = T.relu(Tensor([-1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_log_negative_rejected():
    with pytest.raises(ValueError):
        T.log(Tensor([-1.0]))
    with pytest.raises(ValueError):
        T.sqrt(Tensor([-1.0]))


def test_non_broadcastable_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_gelu_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 4, 8)  # 32 points
    tx = Tensor(x, requires_grad=True)
    loss = T.reduce_mean(T.gelu(tx) * T.gelu(tx))
    loss.backward()
    ref = lambda a: np.mean(ref_gelu(a) ** 2)
    assert max_rel_err(tx.grad, fd_gradient(ref, [x], 0)) < FD_TOL


@pytest.mark.parametrize(
    "op,ref",
    [
        (T.exp, np.exp),
        (T.tanh, np.tanh),
        (T.absolute, np.abs),
        (T.relu, lambda x: np.maximum(x, 0.0)),
    ],
)
def test_elementwise_gradients_fd(op, ref):
    rng = np.random.default_rng(0)
    x = rand(rng, 3, 5) + 0.3  # keep away from kinks at 0
    tx = Tensor(x, requires_grad=True)
    loss = T.reduce_mean(op(tx) * op(tx))
    loss.backward()
    fd = fd_gradient(lambda a: np.mean(ref(a) ** 2), [x], 0)
    assert max_rel_err(tx.grad, fd) < FD_TOL


def test_div_log_sqrt_gradients_fd():
    rng = np.random.default_rng(1)
    x = np.abs(rand(rng, 3, 4)) + 0.5
    y = np.abs(rand(rng, 3, 4)) + 0.5
    tx, ty = Tensor(x, requires_grad=True), Tensor(y, requires_grad=True)
    loss = T.reduce_mean(T.log(tx) + T.sqrt(ty) + tx / ty)
    loss.backward()
    ref = lambda a, b: np.mean(np.log(a) + np.sqrt(b) + a / b)
    assert max_rel_err(tx.grad, fd_gradient(ref, [x, y], 0)) < FD_TOL
    assert max_rel_err(ty.grad, fd_gradient(ref, [x, y], 1)) < FD_TOL


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_broadcast_add_adjoint_property(seed):
    # d/dx sum(x + y) is all-ones regardless of broadcast pattern
    rng = np.random.default_rng(seed)
    x = rand(rng, 2, 1, 4)
    y = rand(rng, 3, 4)
    tx, ty = Tensor(x, requires_grad=True), Tensor(y, requires_grad=True)
    T.reduce_sum(tx + ty).backward()
    np.testing.assert_allclose(tx.grad, np.full_like(x, 3.0))
    np.testing.assert_allclose(ty.grad, np.full_like(y, 2.0))


# -- attention ---------------------------------------------------------------------


def test_attention_single_token_returns_value():
    rng = np.random.default_rng(0)
    q, k, v = rand(rng, 1, 8), rand(rng, 1, 8), rand(rng, 1, 8)
    out = T.softmax_attention(Tensor(q), Tensor(k), Tensor(v), heads=2)
    np.testing.assert_allclose(out.data, v, rtol=1e-6)


def test_attention_identical_keys_uniform():
    rng = np.random.default_rng(0)
    q = rand(rng, 4, 8)
    k = np.tile(rand(rng, 1, 8), (4, 1))
    v = rand(rng, 4, 8)
    out = T.softmax_attention(Tensor(q), Tensor(k), Tensor(v), heads=2)
    expect = np.tile(v.mean(axis=0, keepdims=True), (4, 1))
    np.testing.assert_allclose(out.data, expect, atol=1e-6)


def test_attention_vs_bruteforce_oracle():
    rng = np.random.default_rng(3)
    q, k, v = rand(rng, 4, 8), rand(rng, 4, 8), rand(rng, 4, 8)
    out = T.softmax_attention(Tensor(q), Tensor(k), Tensor(v), heads=2)
    assert np.abs(out.data - ref_attention(q, k, v, 2)).max() < 1e-5


def test_attention_rows_sum_to_one():
    # implied by the softmax construction; verified through a probe vector
    rng = np.random.default_rng(4)
    q, k = rand(rng, 6, 8), rand(rng, 6, 8)
    v = np.ones((6, 8), dtype=np.float32)
    out = T.softmax_attention(Tensor(q), Tensor(k), Tensor(v), heads=4)
    np.testing.assert_allclose(out.data, 1.0, atol=1e-6)


def test_attention_head_mismatch_rejected():
    z = Tensor(np.zeros((4, 6), dtype=np.float32))
    with pytest.raises(ValueError):
        T.softmax_attention(z, z, z, heads=4)


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    q, k, v = rand(rng, 4, 8), rand(rng, 4, 8), rand(rng, 4, 8)
    ts = [Tensor(a, requires_grad=True) for a in (q, k, v)]
    out = T.softmax_attention(*ts, heads=2)
    T.reduce_mean(out * out).backward()
    ref = lambda a, b, c: np.mean(ref_attention(a, b, c, 2) ** 2)
    for i, t in enumerate(ts):
        assert max_rel_err(t.grad, fd_gradient(ref, [q, k, v], i)) < FD_TOL


# -- layernorm ----------------------------------------------------------------------


def test_layernorm_constant_row_gives_bias():
    x = np.full((2, 5), 3.0, dtype=np.float32)
    bias = np.arange(5, dtype=np.float32)
    out = T.layernorm(Tensor(x), Tensor(np.ones(5)), Tensor(bias))
    np.testing.assert_allclose(out.data, np.tile(bias, (2, 1)), atol=1e-3)


def test_layernorm_already_normalized():
    x = np.array([[-1.0, 1.0]], dtype=np.float32)
    out = T.layernorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, x, atol=1e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_layernorm_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)
    ts = [Tensor(a, requires_grad=True) for a in (x, g, b)]
    T.reduce_mean(T.layernorm(*ts) * T.layernorm(*ts)).backward()
    ref = lambda a, gg, bb: np.mean(ref_layernorm(a, gg, bb) ** 2)
    for i, t in enumerate(ts):
        assert max_rel_err(t.grad, fd_gradient(ref, [x, g, b], i)) < FD_TOL


# -- reductions ---------------------------------------------------------------------


def test_reduce_hand_cases():
    assert T.reduce_sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert T.reduce_mean(Tensor(np.full((4, 4), 2.5))).item() == 2.5


def test_reduce_min_vs_scan_oracle():
    rng = np.random.default_rng(7)
    x = rand(rng, 3, 4)
    out = T.reduce_min(Tensor(x), axis=1)
    expect = np.array([min(row) for row in x])  # linear scan
    np.testing.assert_array_equal(out.data, expect)


def test_reduce_axis_out_of_range():
    with pytest.raises(ValueError):
        T.reduce_sum(Tensor(np.zeros((2, 2))), axis=5)


def test_reduce_min_gradient_routes_to_argmin():
    x = Tensor(np.array([[3.0, 1.0, 2.0]], dtype=np.float32), requires_grad=True)
    T.reduce_sum(T.reduce_min(x, axis=1)).backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


# -- conv3d -------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(4))
def test_conv3d_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 1, 2, 4, 4, 3)
    w = rand(rng, 3, 3, 3, 3, 2) * 0.3
    b = rand(rng, 2) * 0.1
    ts = [Tensor(a, requires_grad=True) for a in (x, w, b)]
    T.reduce_mean(T.conv3d(*ts) * T.conv3d(*ts)).backward()
    ref = lambda a, ww, bb: np.mean(ref_conv3d(a, ww, bb) ** 2)
    for i, t in enumerate(ts):
        assert max_rel_err(t.grad, fd_gradient(ref, [x, w, b], i)) < FD_TOL


def test_conv3d_matches_reference_forward():
    rng = np.random.default_rng(5)
    x = rand(rng, 2, 3, 5, 5, 4)
    w = rand(rng, 1, 3, 3, 4, 6) * 0.2
    b = rand(rng, 6)
    out = T.conv3d(Tensor(x), Tensor(w), Tensor(b))
    assert np.abs(out.data - ref_conv3d(x, w, b)).max() < 1e-4


# -- backward semantics ----------------------------------------------------------------


def test_backward_sum_gives_ones():
    w = Tensor(np.arange(4, dtype=np.float32), requires_grad=True)
    T.reduce_sum(w).backward()
    np.testing.assert_array_equal(w.grad, np.ones(4))


def test_backward_quadratic_hand_algebra():
    w = Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32), requires_grad=True)
    T.reduce_sum(w * w).backward()
    np.testing.assert_allclose(w.grad, 2 * w.data)


def test_backward_requires_scalar():
    w = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (w * w).backward()


def test_backward_unused_branch_gets_no_gradient():
    w = Tensor(np.ones(3), requires_grad=True)
    u = Tensor(np.ones(3), requires_grad=True)
    _unused = u * 5.0
    T.reduce_sum(w).backward()
    assert u.grad is None  # zero adjoint for unused outputs


@pytest.mark.parametrize("seed", SEEDS)
def test_three_layer_mlp_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 4, 5)
    w1, b1 = rand(rng, 5, 7), rand(rng, 7)
    w2, b2 = rand(rng, 7, 6), rand(rng, 6)
    w3, b3 = rand(rng, 6, 2), rand(rng, 2)
    params = [w1, b1, w2, b2, w3, b3]
    ts = [Tensor(p, requires_grad=True) for p in params]

    def forward(t1, tb1, t2, tb2, t3, tb3):
        h = T.gelu(T.affine(Tensor(x), t1, tb1))
        h = T.tanh(T.affine(h, t2, tb2))
        return T.reduce_mean(T.affine(h, t3, tb3) * T.affine(h, t3, tb3))

    forward(*ts).backward()

    def ref(p1, pb1, p2, pb2, p3, pb3):
        h = ref_gelu(x.astype(np.float64) @ p1 + pb1)
        h = np.tanh(h @ p2 + pb2)
        return np.mean((h @ p3 + pb3) ** 2)

    for i, t in enumerate(ts):
        assert max_rel_err(t.grad, fd_gradient(ref, params, i)) < FD_TOL


def test_forward_bit_determinism():
    rng = np.random.default_rng(11)
    x = rand(rng, 8, 16)
    w = rand(rng, 16, 16)

    def run():
        out = T.softmax_attention(Tensor(x), Tensor(x), Tensor(x @ w), heads=4)
        return T.reduce_sum(T.gelu(out)).data.copy()

    a, b = run(), run()
    np.testing.assert_array_equal(a, b)


def test_finite_check_flag():
    T.set_finite_checks(True)
    try:
        big = Tensor(np.full(4, 1e38, dtype=np.float32))
        with pytest.raises(FloatingPointError):
            big * big  # overflows to inf
    finally:
        T.set_finite_checks(False)


# -- adam --------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, 2.0], dtype=np.float32)]
    g = [np.zeros(2, dtype=np.float32)]
    state = AdamState.init(p)
    out, _ = adam_step(p, g, state, lr=0.1)
    np.testing.assert_array_equal(out[0], p[0])


def test_adam_first_step_closed_form():
    p = [np.array([1.0, -1.0], dtype=np.float32)]
    g = [np.array([0.5, -0.25], dtype=np.float32)]
    lr, eps = 0.01, 1e-8
    out, _ = adam_step(p, g, AdamState.init(p), lr=lr, eps=eps)
    # bias-corrected mhat = g, vhat = g^2 => delta = -lr * g / (|g| + eps)
    expect = p[0] - lr * g[0] / (np.abs(g[0]) + eps)
    np.testing.assert_allclose(out[0], expect, rtol=1e-6)


def test_adam_shape_mismatch_rejected():
    p = [np.zeros(3, dtype=np.float32)]
    g = [np.zeros(4, dtype=np.float32)]
    with pytest.raises(ValueError):
        adam_step(p, g, AdamState.init(p), lr=0.1)


def test_adam_converges_on_quadratic():
    # minimize (x - 1)^2; analytic minimizer x* = 1
    x = np.array([0.0], dtype=np.float32)
    state = AdamState.init([x])
    for _ in range(100):
        grad = 2.0 * (x - 1.0)
        (x,), state = adam_step([x], [grad], state, lr=0.15)
    assert abs(float(x[0]) - 1.0) < 1e-3
