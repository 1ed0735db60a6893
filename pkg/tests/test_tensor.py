import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from minidetr import tensor as T
from minidetr.tensor import ShapeError, Tensor

from oracles import central_difference, conv2d_loops, rel_err


def grad_of(fn, *arrays_):
    """Analytic gradients of scalar ``fn(*tensors)`` w.r.t. every input."""
    ts = [Tensor(a, requires_grad=True) for a in arrays_]
    fn(*ts).backward()
    return [t.grad.copy() for t in ts]


def fd_of(fn, arrays_, i, h=1e-6):
    def f(x):
        args = [Tensor(a) for a in arrays_]
        args[i] = Tensor(x)
        return fn(*args).item()
    return central_difference(f, arrays_[i], h)


def assert_fd(fn, *arrays_, tol=1e-6):
    analytic = grad_of(fn, *arrays_)
    for i in range(len(arrays_)):
        assert rel_err(analytic[i], fd_of(fn, arrays_, i)) < tol, f"input {i}"


# ---------------------------------------------------------------------------
# tensor basics and tape
# ---------------------------------------------------------------------------
def test_fresh_grad_is_zero_and_shapes_agree():
    t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert t.grad.shape == t.shape and not t.grad.any()
    (t * 2.0).sum().backward()
    assert t.grad.any()
    t.zero_grad()
    assert not t.grad.any()
    assert t.size == t.data.size == t.grad.size


def test_tape_is_topological_and_visits_once():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    z = y + x  # diamond: x reaches z twice
    loss = (z * y).sum()
    tape = T.build_tape(loss)
    pos = {id(n): k for k, n in enumerate(tape)}
    assert len(pos) == len(tape)
    for node in tape:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    loss.backward()
    # d/dx sum((2x + x) * 2x) = 12x
    np.testing.assert_allclose(x.grad, 12.0 * np.ones(3))


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_add_zero_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(T.add(x, T.zeros_like(x)).data, x.data)


def test_mul_gradient_hand_values():
    da, db = grad_of(lambda a, b: (a * b).sum(), np.array([2.0, 3.0]), np.array([5.0, 7.0]))
    np.testing.assert_array_equal(da, [5.0, 7.0])
    np.testing.assert_array_equal(db, [2.0, 3.0])
    assert_fd(lambda a, b: (a * b).sum(), np.array([2.0, 3.0]), np.array([5.0, 7.0]))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_ops_broadcast_gradients(op):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,))
    f = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}[op]
    assert_fd(lambda x, y: (f(x, y) ** 2).sum(), a, b)


@pytest.mark.parametrize("fn", [T.sigmoid, T.texp, lambda x: T.power(x, 3.0), lambda x: T.tlog(x * x + 1.0),
                                lambda x: T.maximum(x, 0.1), lambda x: T.minimum(x, 0.1), T.tsin, T.tcos])
def test_unary_gradients(fn):
    x = np.random.default_rng(2).normal(size=(5,))
    assert_fd(lambda t: (fn(t) * Tensor(np.arange(1.0, 6.0))).sum(), x)


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_elementwise_dispatch():
    a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    np.testing.assert_array_equal(T.elementwise("add", a, b).data, [4.0, 2.0])
    np.testing.assert_array_equal(T.elementwise("relu", a).data, [1.0, 0.0])
    with pytest.raises(ValueError):
        T.elementwise("nope", a, b)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------
def test_matmul_identity_and_hand_value():
    m = np.random.default_rng(3).normal(size=(3, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])).data,
                                  [[3.0], [7.0]])


def test_matmul_gradient_fd():
    rng = np.random.default_rng(4)
    assert_fd(lambda a, b: (T.matmul(a, b) ** 2).sum(), rng.normal(size=(4, 5)), rng.normal(size=(5, 3)))


def test_batched_matmul_gradient_fd():
    rng = np.random.default_rng(5)
    assert_fd(lambda a, b: (T.matmul(a, b) ** 2).sum(), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------
def test_conv_identity_kernel():
    x = np.random.default_rng(6).normal(size=(1, 5, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data
    np.testing.assert_array_equal(out, x)


def test_conv_counting():
    out = T.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data
    np.testing.assert_array_equal(out, np.full((1, 3, 3), 9.0))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_nested_loop_oracle_exactly(stride, padding):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_array_equal(out, conv2d_loops(x, k, b, stride, padding))


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    batched = T.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    for i in range(2):
        np.testing.assert_array_equal(batched[i], T.conv2d(Tensor(x[i]), Tensor(k), stride=2, padding=1).data)


def test_conv_gradients_fd():
    rng = np.random.default_rng(9)
    x, k, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    assert_fd(lambda x_, k_, b_: (T.conv2d(x_, k_, b_, stride=2, padding=1) ** 2).sum(), x, k, b)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


# ---------------------------------------------------------------------------
# softmax / layernorm / composite
# ---------------------------------------------------------------------------
def test_softmax_symmetry_and_shift():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    x = np.random.default_rng(10).normal(size=6)
    np.testing.assert_allclose(T.softmax(Tensor(x + 3.7)).data, T.softmax(Tensor(x)).data, atol=1e-15)


def test_softmax_jacobian_fd():
    x = np.random.default_rng(11).normal(size=6)
    w = np.random.default_rng(12).normal(size=6)
    analytic = grad_of(lambda t: (T.softmax(t) * Tensor(w)).sum(), x)[0]
    assert rel_err(analytic, fd_of(lambda t: (T.softmax(t) * Tensor(w)).sum(), [x], 0)) < 1e-5


def test_softmax_mask_gives_exact_zeros():
    p = T.softmax(Tensor([1.0, 2.0, 3.0]), mask=np.array([True, False, True])).data
    assert p[1] == 0.0 and abs(p.sum() - 1.0) < 1e-15


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        T.softmax(Tensor([0.0, np.nan]))


def test_layernorm_cases():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(T.layernorm(Tensor([[4.0, 4.0]]), g, b).data, [[0.0, 0.0]])
    out = T.layernorm(Tensor([[1.0, 3.0]]), g, b).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-5)


def test_layernorm_gradients_fd():
    rng = np.random.default_rng(13)
    x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    assert_fd(lambda x_, g_, b_: (T.layernorm(x_, g_, b_) * Tensor(w)).sum(), x, g, b, tol=1e-4)


def test_loss_sum_gives_ones_and_constant_gives_zero():
    x = np.random.default_rng(14).normal(size=(2, 3))
    np.testing.assert_array_equal(grad_of(lambda t: t.sum(), x)[0], np.ones((2, 3)))
    np.testing.assert_array_equal(grad_of(lambda t: t.sum() * 0.0 + 5.0, x)[0], np.zeros((2, 3)))


def test_softmax_cross_entropy_gradient_fd():
    rng = np.random.default_rng(15)
    logits = rng.normal(size=(4, 5))
    labels = np.array([0, 3, 1, 4])

    def ce(t):
        return -T.log_softmax(t, axis=-1)[np.arange(4), labels].mean()
    assert_fd(ce, logits, tol=1e-4)


def test_getitem_concat_reshape_transpose_gradients():
    rng = np.random.default_rng(16)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))

    def f(x, y):
        z = T.concat([x, y], axis=0).reshape(4, 5).transpose(1, 0)
        return (z[1:, ::2] ** 2).sum() + z.mean()
    assert_fd(f, a, b)


def test_gradcheck_helper_agrees():
    rng = np.random.default_rng(17)
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    assert T.gradcheck(lambda: (T.sigmoid(x) @ x).sum(), [x]) < 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
