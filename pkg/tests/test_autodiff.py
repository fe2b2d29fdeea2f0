import numpy as np
import pytest

from motionlab import autodiff as ad
from motionlab.autodiff import NumericalFault, Tensor, backward


def finite_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function over an array."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_square_scalar():
    x = Tensor(3.0, requires_grad=True)
    y = x * x
    backward(y)
    assert x.grad == pytest.approx(6.0)


def test_norm_squared_vector():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_unreached_leaf_has_no_grad():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(5.0, requires_grad=True)
    backward(x * x)
    assert y.grad is None


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * x)


def test_nan_raises_numerical_fault():
    x = Tensor(-1.0, requires_grad=True)
    with np.errstate(invalid="ignore"):
        y = ad.log(x)  # nan
    with pytest.raises(NumericalFault):
        backward(y)


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(0)
    w1 = rng.normal(size=(4, 8))
    b1 = rng.normal(size=8)
    w2 = rng.normal(size=(8, 1))
    x0 = rng.normal(size=4)

    def f(x):
        return float((np.tanh(x @ w1 + b1) @ w2)[0])

    x = Tensor(x0, requires_grad=True)
    out = ad.matmul(ad.tanh(ad.matmul(x, Tensor(w1)) + Tensor(b1)), Tensor(w2)).sum()
    backward(out)
    expected = finite_diff(f, x0)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-4)


@pytest.mark.parametrize("trial", range(10))
def test_random_op_mix_matches_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    x0 = rng.normal(size=(3, 4)) + 2.5  # keep log/sqrt in-domain

    def build(xt):
        a = ad.softplus(xt)
        b = ad.tanh(ad.mul(xt, 0.5))
        c = ad.log(ad.add(ad.mul(a, a), 1.0))
        d = ad.sqrt(ad.add(ad.mul(b, b), 0.1))
        e = ad.maximum(c, d)
        return ad.tsum(ad.add(e, ad.tmin(xt))) + ad.norm(xt)

    x = Tensor(x0, requires_grad=True)
    backward(build(x))

    def f(arr):
        t = Tensor(arr)
        return float(build(t).data)

    expected = finite_diff(f, x0)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-4, atol=1e-8)


def test_min_subgradient_goes_to_first_argmin():
    x = Tensor([2.0, 1.0, 1.0, 5.0], requires_grad=True)
    backward(ad.tmin(x))
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0, 0.0])


def test_max_subgradient_goes_to_first_argmax():
    x = Tensor([[3.0, 3.0], [1.0, 2.0]], requires_grad=True)
    backward(ad.tsum(ad.tmax(x, axis=1)))
    np.testing.assert_allclose(x.grad, [[1.0, 0.0], [0.0, 1.0]])


def test_elementwise_maximum_tie_goes_to_first_argument():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 3.0], requires_grad=True)
    backward(ad.tsum(ad.maximum(a, b)))
    np.testing.assert_allclose(a.grad, [1.0, 0.0])
    np.testing.assert_allclose(b.grad, [0.0, 1.0])


def test_detach_blocks_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.tsum(ad.mul(x, x.detach()))
    backward(y)
    np.testing.assert_allclose(x.grad, x.data)  # only the live branch


def test_matmul_batched_gradients():
    rng = np.random.default_rng(7)
    a0 = rng.normal(size=(2, 3, 4))
    w0 = rng.normal(size=(4, 5))
    a = Tensor(a0, requires_grad=True)
    w = Tensor(w0, requires_grad=True)
    backward(ad.tsum(ad.matmul(a, w)))
    np.testing.assert_allclose(a.grad, np.ones((2, 3, 5)) @ w0.T)
    np.testing.assert_allclose(w.grad, sum(a0[i].T @ np.ones((3, 5)) for i in range(2)))


def test_cumsum_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    wts = np.array([1.0, 10.0, 100.0])
    backward(ad.tsum(ad.mul(ad.cumsum(x), Tensor(wts))))
    np.testing.assert_allclose(x.grad, [111.0, 110.0, 100.0])


def test_take_and_concat_gradients():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    top = x[0]
    bottom = x[1]
    y = ad.tsum(ad.concat([top, ad.mul(bottom, 2.0)]))
    backward(y)
    np.testing.assert_allclose(x.grad, [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])


def test_softmax_rows_sum_to_one_and_grads_finite():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 5)), requires_grad=True)
    s = ad.softmax(x, axis=-1)
    np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(4), atol=1e-12)
    backward(ad.tsum(ad.mul(s, s)))
    assert np.isfinite(x.grad).all()


def test_numpy_fast_path_matches_graph_path():
    x0 = np.random.default_rng(2).normal(size=(3, 3))
    graph = ad.tanh(ad.matmul(Tensor(x0), Tensor(x0))).data
    plain = ad.tanh(ad.matmul(x0, x0))
    np.testing.assert_array_equal(graph, plain)
