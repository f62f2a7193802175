import numpy as np
import pytest

from passt import autograd as ag


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check(op, *shapes, seed=0, tol=1e-6):
    """Compare backward of ``sum(op(*inputs) * w)`` against central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal(s) for s in shapes]
    w = None

    def loss_value(*arrs):
        nonlocal w
        out = op(*[ag.Tensor(a) for a in arrs]).data
        if w is None:
            w = rng.standard_normal(out.shape)
        return float((out * w).sum())

    loss_value(*xs)
    leaves = [ag.Tensor(x.copy(), requires_grad=True) for x in xs]
    out = op(*leaves)
    ag.backward(ag.mul(out, w).sum())
    for k, x in enumerate(xs):
        def f(v, k=k):
            args = list(xs)
            args[k] = v
            return loss_value(*args)
        num = numeric_grad(f, x.copy())
        np.testing.assert_allclose(leaves[k].grad, num, rtol=tol, atol=tol)


def test_add_broadcast():
    check(ag.add, (3, 4), (4,))
    check(ag.add, (2, 1, 4), (3, 1))


def test_mul_broadcast():
    check(ag.mul, (3, 4), (3, 1))


def test_matmul_batched():
    check(ag.matmul, (2, 3, 4), (4, 5))
    check(ag.matmul, (2, 2, 3, 4), (2, 2, 4, 3))


def test_shape_ops():
    check(lambda a: a.reshape(6, 2), (3, 4))
    check(lambda a: a.transpose(0, 2, 1), (2, 3, 4))
    check(lambda a: a.sum(axis=1), (3, 4))
    check(lambda a: a.mean(axis=0, keepdims=True), (3, 4))
    check(lambda a: ag.take(a, [2, 0, 2], axis=1), (2, 3))
    check(lambda a, b: ag.concat([a, b], axis=1), (2, 3), (2, 1))
    check(lambda a: ag.broadcast_to(a, (3, 2, 4)), (2, 1))


def test_nonlinearities():
    check(lambda a: ag.softmax(a, axis=-1), (3, 5))
    check(lambda a, g, b: ag.layer_norm(a, g, b), (4, 6), (6,), (6,))
    check(ag.gelu, (4, 5))


def test_bce_gradient_closed_form():
    z = np.array([[-3.0, 0.0, 2.5], [40.0, -40.0, 0.3]])
    y = np.array([[0, 1, 1], [1, 0, 0.5]])
    t = ag.Tensor(z.copy(), requires_grad=True)
    ag.backward(ag.bce_with_logits(t, y))
    expected = (1 / (1 + np.exp(-z)) - y) / z.size
    np.testing.assert_allclose(t.grad, expected, atol=1e-15)


def test_bce_value_matches_naive():
    rng = np.random.default_rng(3)
    z, y = rng.standard_normal((5, 4)), rng.random((5, 4))
    s = 1 / (1 + np.exp(-z))
    naive = -(y * np.log(s) + (1 - y) * np.log(1 - s)).mean()
    assert float(ag.bce_with_logits(ag.Tensor(z), y).data) == pytest.approx(naive, rel=1e-12)


def test_bce_stable_at_extremes():
    loss = ag.bce_with_logits(ag.Tensor(np.array([1000.0, -1000.0])), np.array([1.0, 0.0]))
    assert float(loss.data) == 0.0


def test_softmax_rows():
    s = ag.softmax(ag.Tensor(np.random.default_rng(0).standard_normal((4, 7)) * 50)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
    assert s.min() >= 0 and s.max() <= 1


def test_shared_node_accumulates():
    x = ag.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = x * x + x
    ag.backward(y.sum())
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_scalar_keeps_float32():
    x = ag.Tensor(np.ones(3, dtype=np.float32))
    assert (x * 0.5 + 1.0).data.dtype == np.float32


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ag.backward(ag.Tensor(np.ones(3), requires_grad=True))


def test_non_finite_gradient_raises():
    x = ag.Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(FloatingPointError):
        ag.backward((x * np.inf).sum())
