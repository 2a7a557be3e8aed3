from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossview_pid import tensorlib as tl
from crossview_pid.tensorlib import Adam, Mlp, NonFiniteError, Parameter, ShapeError, Tensor


def numeric_grad(fn, arrays_, h=1e-6):
    """Central differences of ``sum(fn(*arrays) * w)`` for a fixed random ``w``."""
    out0 = fn(*arrays_)
    w = np.random.default_rng(99).normal(size=out0.shape)
    grads = []
    for a in arrays_:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            hi = float((fn(*arrays_) * w).sum())
            a[i] = old - h
            lo = float((fn(*arrays_) * w).sum())
            a[i] = old
            g[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return w, grads


def check_op(tensor_fn, numpy_fn, *shapes, seed=0, tol=1e-6, low=None):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if low is not None:
        xs = [np.where(np.abs(x) < low, np.sign(x) * low + x, x) for x in xs]
    np.testing.assert_allclose(tensor_fn(*[Tensor(x) for x in xs]).data, numpy_fn(*xs), rtol=1e-12, atol=1e-12)
    w, num = numeric_grad(numpy_fn, [x.copy() for x in xs])
    ts = [Tensor(x, requires_grad=True) for x in xs]
    tensor_fn(*ts).backward(w)
    for t, g in zip(ts, num):
        np.testing.assert_allclose(t.grad, g, rtol=tol, atol=tol)


def test_add_sub_mul_broadcast():
    check_op(tl.add, np.add, (3, 4), (4,))
    check_op(tl.sub, np.subtract, (2, 1, 4), (3, 1))
    check_op(tl.mul, np.multiply, (3, 4), (3, 1))


def test_matmul_variants():
    check_op(tl.matmul, np.matmul, (3, 4), (4, 2))
    check_op(tl.matmul, np.matmul, (2, 3, 4), (4, 5))  # 2-D weight fast path
    check_op(tl.matmul, np.matmul, (2, 3, 4), (2, 4, 5))
    check_op(tl.matmul, np.matmul, (2, 2, 3, 4), (4, 2))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        tl.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_elementwise_nonlinearities():
    check_op(lambda x: tl.leaky_relu(x, 0.1), lambda x: np.where(x > 0, x, 0.1 * x), (5, 3), low=1e-3)
    check_op(tl.tabs, np.abs, (4, 4), low=1e-3)


def test_reductions():
    check_op(lambda x: tl.tsum(x, axis=1), lambda x: x.sum(axis=1), (3, 4, 2))
    check_op(lambda x: tl.tsum(x), lambda x: np.asarray(x.sum()), (3, 4))
    check_op(lambda x: tl.mean(x, axis=(0, 2), keepdims=True), lambda x: x.mean(axis=(0, 2), keepdims=True),
             (3, 4, 2))
    check_op(lambda x: tl.l2_norm(x, axis=-1), lambda x: np.sqrt((x * x).sum(-1)), (4, 3))


def test_structural_ops():
    check_op(lambda a, b: tl.concat([a, b], axis=1), lambda a, b: np.concatenate([a, b], axis=1), (2, 3), (2, 1))
    check_op(lambda x: tl.reshape(x, (6, 2)), lambda x: x.reshape(6, 2), (3, 4))
    check_op(lambda x: tl.transpose(x, (2, 0, 1)), lambda x: x.transpose(2, 0, 1), (2, 3, 4))
    check_op(lambda x: x[:, 1:3], lambda x: x[:, 1:3], (3, 4))
    check_op(lambda x: tl.getitem(x, (slice(None), 0)), lambda x: x[:, 0], (3, 4))


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = tl.add(tl.mul(x, x), x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with tl.no_grad():
        y = tl.mul(x, 2.0)
    assert not y.requires_grad


def test_non_finite_is_reported_with_op():
    with pytest.raises(NonFiniteError) as exc, np.errstate(over="ignore"):
        tl.mul(Tensor(np.array([1e308])), 1e10)
    assert exc.value.op == "mul"


def test_cast_round_trip_gradient_dtype():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = tl.cast(x, np.float64)
    assert y.dtype == np.float64
    tl.tsum(tl.mul(y, 3.0)).backward()
    assert x.grad.dtype == np.float32
    np.testing.assert_allclose(x.grad, 3.0)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    mlp = Mlp((3, 5, 2), rng, "m", dtype=np.float64)
    x = rng.normal(size=(4, 3))
    w0 = mlp.layers[0][0]

    def f(W):
        old = w0.data
        w0.data = W
        try:
            return mlp(Tensor(x)).data
        finally:
            w0.data = old

    wts, (num,) = numeric_grad(f, [w0.data.copy()])
    mlp(Tensor(x)).backward(wts)
    np.testing.assert_allclose(w0.grad, num, rtol=1e-5, atol=1e-7)
    with pytest.raises(ShapeError):
        mlp(Tensor(np.ones((2, 4))))


@settings(max_examples=50, deadline=None)
@given(st.lists(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)), min_size=1, max_size=4),
       st.floats(0.1, 50.0))
def test_clip_global_norm_bound(grads, max_norm):
    clipped, before = tl.clip_global_norm(grads, max_norm)
    after = math.sqrt(sum(float((g * g).sum()) for g in clipped))
    assert after <= max_norm + 1e-6
    if before <= max_norm:
        for a, b in zip(grads, clipped):
            np.testing.assert_array_equal(a, b)
    else:
        # direction preserved
        for a, b in zip(grads, clipped):
            np.testing.assert_allclose(b, a * (max_norm / before), rtol=1e-12, atol=1e-300)


def test_clip_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        tl.clip_global_norm([np.array([np.inf])])


def test_adam_step_against_hand_formula():
    p, g = np.array([1.0, -2.0]), np.array([0.5, 0.1])
    m, v = np.zeros(2), np.zeros(2)
    (p1,), (m1,), (v1,) = tl.adam_step([p], [g], [m], [v], 1, lr=0.1)
    # first bias-corrected step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p1, p - 0.1 * g / (np.abs(g) + 1e-8))
    np.testing.assert_allclose(m1, 0.1 * g)
    np.testing.assert_allclose(v1, 0.001 * g * g)
    with pytest.raises(ValueError):
        tl.adam_step([p], [g], [m], [v], 0)


def test_adam_per_parameter_rates_and_clipping():
    a = Parameter(np.array([1.0]), "a", np.float64)
    b = Parameter(np.array([1.0]), "b", np.float64)
    opt = Adam([a, b], lr=1.0, lrs=[0.1, 0.0], max_norm=1.0)
    a.grad = np.array([30.0])
    b.grad = np.array([40.0])
    opt.step()
    assert opt.last_grad_norm == pytest.approx(50.0)
    assert a.data[0] == pytest.approx(0.9)
    assert b.data[0] == 1.0
    with pytest.raises(ValueError):
        Adam([a], lrs=[0.1, 0.2])


def test_l1_pose_loss_value_and_wrap():
    est = Tensor(np.array([[1.0, 2.0, math.pi - 0.1]]), requires_grad=True)
    gt = np.array([[0.0, 0.0, -math.pi + 0.1]])
    loss = tl.l1_pose_loss([est], gt, angle_weight=2.0)
    assert loss.item() == pytest.approx(1.0 + 2.0 + 2.0 * 0.2)
    loss.backward()
    np.testing.assert_allclose(est.grad, [[1.0, 1.0, -2.0]])
    two = tl.l1_pose_loss([est, est], gt)
    assert two.item() == pytest.approx(2 * (3.0 + 0.2))
    with pytest.raises(ValueError):
        tl.l1_pose_loss([], gt)
