import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpscnn.core import (
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    conv2d,
    dense,
    grad_check,
    mul,
    pool2d,
    relu,
    sgd_step,
    softmax_cross_entropy,
    total,
    weighted_sum,
)


def direct_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for f in range(o):
            for y in range(ho):
                for z in range(wo):
                    acc = b[f]
                    for ch in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[i, ch, y * stride + u, z * stride + v] * w[f, ch, u, v]
                    out[i, f, y, z] = acc
    return out


def direct_pool(x, k, s, mode):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for y in range(ho):
                for z in range(wo):
                    win = x[i, ch, y * s:y * s + k, z * s:z * s + k]
                    out[i, ch, y, z] = win.max() if mode == "max" else win.mean()
    return out


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- conv2d


def test_conv_one_by_one_doubles():
    out = conv2d(T(np.ones((1, 1, 3, 3))), T(np.full((1, 1, 1, 1), 2.0)), T([0.0]))
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out.data == 2.0)


def test_conv_all_ones_kernel_sums_input():
    x = np.random.default_rng(0).random((1, 1, 3, 3))
    out = conv2d(T(x), T(np.ones((1, 1, 3, 3))), T([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == pytest.approx(x.sum(), abs=1e-12)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = conv2d(T(x), T(w), T(b), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out.data, direct_conv(x, w, b, 2, 1), atol=1e-10, rtol=0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 2), (3, 0)])
def test_conv_gradient(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = T(rng.uniform(-1, 1, (2, 2, 7, 7)))
    w = T(rng.uniform(-1, 1, (3, 2, 3, 3)))
    b = T(rng.uniform(-1, 1, 3))
    rep = grad_check(lambda x, w, b: conv2d(x, w, b, stride, pad), [x, w, b], tolerance=1e-5)
    assert rep.passed, rep


def test_conv_output_size_rule():
    out = conv2d(T(np.zeros((1, 1, 10, 9))), T(np.zeros((2, 1, 4, 4))), T([0.0, 0.0]), stride=3, padding=1)
    assert out.shape == (1, 2, (10 + 2 - 4) // 3 + 1, (9 + 2 - 4) // 3 + 1)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 5, 5\).*\(1, 3, 3, 3\)"):
        conv2d(T(np.zeros((1, 2, 5, 5))), T(np.zeros((1, 3, 3, 3))), T([0.0]))
    with pytest.raises(ShapeError):
        conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 3, 3))), T([0.0]))
    with pytest.raises(ValueError):
        conv2d(T(np.zeros((1, 1, 4, 4))), T(np.zeros((1, 1, 3, 3))), T([0.0]), stride=0)


# ---------------------------------------------------------------- pooling


def test_max_pool_unique_max_routes_gradient():
    x = T([[[[1.0, 2.0], [3.0, 4.0]]]], grad=True)
    with Tape() as tape:
        out = pool2d(x, "max", 2, 2)
    assert out.data.item() == 4.0
    tape.backward(out)
    np.testing.assert_array_equal(x.grad[0, 0], [[0, 0], [0, 1]])


def test_avg_pool_mean():
    out = pool2d(T([[[[1.0, 2.0], [3.0, 4.0]]]]), "avg", 2, 2)
    assert out.data.item() == 2.5


def test_max_pool_ties_go_to_first():
    x = T(np.ones((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        out = pool2d(x, "max", 2, 2)
    tape.backward(out)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool_matches_direct_loops(mode):
    x = np.random.default_rng(2).normal(size=(1, 2, 6, 6))
    out = pool2d(T(x), mode, 3, 3)
    np.testing.assert_allclose(out.data, direct_pool(x, 3, 3, mode), atol=1e-12)


@pytest.mark.parametrize("mode,k,s", [("max", 2, 2), ("avg", 2, 2), ("avg", 3, 1), ("max", 3, 2)])
def test_pool_gradient(mode, k, s):
    x = T(np.random.default_rng(3).uniform(-1, 1, (2, 2, 7, 7)))
    rep = grad_check(lambda x: pool2d(x, mode, k, s), x, tolerance=1e-5)
    assert rep.passed, rep


def test_pool_rejects_large_kernel():
    with pytest.raises(ShapeError):
        pool2d(T(np.zeros((1, 1, 2, 2))), "max", 3, 1)
    with pytest.raises(ValueError):
        pool2d(T(np.zeros((1, 1, 4, 4))), "median", 2, 2)


# ---------------------------------------------------------------- dense / relu / softmax


def test_dense_identity_and_bias():
    x = np.random.default_rng(4).normal(size=(3, 4))
    np.testing.assert_array_equal(dense(T(x), T(np.eye(4)), T(np.zeros(4))).data, x)
    out = dense(T(x), T(np.zeros((4, 2))), T([1.5, -2.0]))
    assert np.all(out.data == [1.5, -2.0])


def test_dense_matches_triple_loop():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
    ref = np.zeros((3, 4))
    for i in range(3):
        for j in range(4):
            ref[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(5))
    np.testing.assert_allclose(dense(T(x), T(w), T(b)).data, ref, atol=1e-12)


def test_dense_gradient_and_shape_error():
    rng = np.random.default_rng(6)
    rep = grad_check(dense, [T(rng.normal(size=(2, 3))), T(rng.normal(size=(3, 4))), T(rng.normal(size=4))])
    assert rep.passed and rep.max_rel_error < 1e-6
    with pytest.raises(ShapeError):
        dense(T(np.zeros((2, 3))), T(np.zeros((4, 2))), T(np.zeros(2)))


def test_relu_values_and_gradient():
    np.testing.assert_array_equal(relu(T([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    pos = np.array([0.5, 1.0, 3.0])
    np.testing.assert_array_equal(relu(T(pos)).data, pos)
    x = T([-1.0, 0.0, 2.0], grad=True)
    with Tape() as tape:
        y = total(relu(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [0, 0, 1])
    rng = np.random.default_rng(7)
    v = rng.uniform(-1, 1, 20)
    v[np.abs(v) < 1e-3] = 0.5
    assert grad_check(relu, T(v), tolerance=1e-5).passed


def test_softmax_cross_entropy_examples():
    loss = softmax_cross_entropy(T(np.zeros((3, 4))), [0, 1, 3])
    assert float(loss.data) == pytest.approx(np.log(4), abs=1e-12)
    logits = np.zeros((1, 5))
    logits[0, 2] = 1e3
    assert float(softmax_cross_entropy(T(logits), [2]).data) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        softmax_cross_entropy(T(np.zeros((2, 3))), [0, 3])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(8)
    labels = rng.integers(0, 7, 5)
    rep = grad_check(lambda z: softmax_cross_entropy(z, labels), T(rng.normal(size=(5, 7))), tolerance=1e-6)
    assert rep.passed, rep


# ---------------------------------------------------------------- optimiser


def _param(w, g):
    p = Parameter(np.array([w], dtype=np.float64))
    p.grad[...] = g
    return p


def test_sgd_plain_step_and_zeroing():
    p = _param(1.0, 2.0)
    sgd_step([p], 0.1, 0.0)
    assert p.data[0] == pytest.approx(0.8)
    assert np.all(p.grad == 0)


def test_sgd_zero_gradient_noop():
    p = _param(3.0, 0.0)
    sgd_step([p], 0.5, 0.9)
    assert p.data[0] == 3.0


def test_sgd_momentum_matches_recurrence():
    p = _param(1.0, 2.0)
    lr, m = 0.1, 0.9
    sgd_step([p], lr, m)
    p.grad[...] = -0.5
    sgd_step([p], lr, m)
    v1 = -lr * 2.0
    w1 = 1.0 + v1
    v2 = m * v1 - lr * -0.5
    assert p.data[0] == pytest.approx(w1 + v2, abs=1e-15)


def test_sgd_lr_multiplier_and_validation():
    p = _param(1.0, 1.0)
    p.lr_mult = 0.0
    sgd_step([p], 1.0, 0.0)
    assert p.data[0] == 1.0
    with pytest.raises(ValueError):
        sgd_step([p], 0.1, 1.0)


# ---------------------------------------------------------------- tape semantics and grad_check


def test_fan_out_accumulates():
    x = T([1.5, -2.0], grad=True)
    with Tape() as tape:
        y = total(add(mul(x, x), x))  # sum(x^2 + x)
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_runs_in_reverse_order():
    x = T([2.0], grad=True)
    with Tape() as tape:
        a = mul(x, x)
        b = mul(a, x)
        c = total(b)
    assert [r.output for r in tape.records] == [a, b, c]
    tape.backward(c)
    assert x.grad[0] == pytest.approx(12.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x, w, b = rng.normal(size=(2, 3, 9, 9)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    a = conv2d(T(x), T(w), T(b), 1, 1).data
    c = conv2d(T(x), T(w), T(b), 1, 1).data
    assert a.tobytes() == c.tobytes()


def test_grad_check_constant_function():
    rep = grad_check(lambda x: weighted_sum(x, np.zeros(x.shape)), T(np.ones(4)))
    assert rep.passed
    assert np.all(rep.analytic[0] == 0) and np.all(rep.numeric[0] == 0)


def test_grad_check_catches_wrong_gradient():
    from dpscnn.core import record

    def bad_square(x):
        return record((x,), x.data ** 2, lambda g: (g * x.data,))  # missing factor 2

    rep = grad_check(bad_square, T([1.0, 2.0, 3.0]))
    assert not rep.passed


def test_grad_check_reports_non_finite():
    rep = grad_check(lambda x: weighted_sum(mul(x, T([np.inf, 1.0])), np.ones(2)), T([1.0, 2.0]))
    assert not rep.passed


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(4, 7), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1),
       st.integers(0, 2**31 - 1))
def test_conv_gradient_property(n, c, size, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = T(rng.uniform(-1, 1, (n, c, size, size)))
    w = T(rng.uniform(-1, 1, (2, c, k, k)))
    b = T(rng.uniform(-1, 1, 2))
    rep = grad_check(lambda x, w, b: conv2d(x, w, b, stride, pad), [x, w, b], tolerance=1e-5)
    assert rep.passed, rep


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_outputs_finite_property(n, d, seed):
    rng = np.random.default_rng(seed)
    x = T(rng.uniform(-1, 1, (n, d)), grad=True)
    w = Parameter(rng.uniform(-1, 1, (d, 3)))
    b = Parameter(rng.uniform(-1, 1, 3))
    with Tape() as tape:
        loss = softmax_cross_entropy(relu(dense(x, w, b)), rng.integers(0, 3, n))
    tape.backward(loss)
    assert np.isfinite(loss.data).all()
    assert all(np.isfinite(t.grad).all() for t in (x, w, b))
