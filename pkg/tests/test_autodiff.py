import numpy as np
import pytest

from driverig import autodiff as ad


def finite_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, *shapes, seed=0, atol=1e-6):
    """build(tensors) -> Tensor; compares tape gradients to differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(0.0, 0.8, s) for s in shapes]

    def value():
        tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
        return float(ad.total(build(tensors)).data)

    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = ad.total(build(tensors))
    out.backward()
    for k, (arr, t) in enumerate(zip(arrays, tensors)):
        expect = finite_diff(lambda: value(), arr)
        assert t.grad is not None, f"input {k} got no gradient"
        assert np.allclose(t.grad, expect, atol=atol), f"input {k} gradient off"


def test_add_mul_broadcast():
    check_op(lambda t: ad.add(t[0], t[1]), (3, 4), (3, 4))
    check_op(lambda t: ad.add(t[0], t[1]), (3, 4), (4,))   # bias broadcast
    check_op(lambda t: ad.mul(t[0], t[1]), (2, 5), (2, 5))


def test_matmul():
    check_op(lambda t: ad.matmul(t[0], t[1]), (3, 4), (4, 2))


def test_elementwise_nonlinearities():
    check_op(lambda t: ad.tanh(t[0]), (4, 3))
    check_op(lambda t: ad.sigmoid(t[0]), (4, 3))
    check_op(lambda t: ad.softplus(t[0]), (4, 3))
    check_op(lambda t: ad.square(t[0]), (4, 3))


def test_log_and_reciprocal_positive_domain():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.5, 2.0, (3, 3))

    t = ad.Tensor(x.copy(), requires_grad=True)
    out = ad.total(ad.log(t))
    out.backward()
    assert np.allclose(t.grad, 1.0 / x)

    t = ad.Tensor(x.copy(), requires_grad=True)
    out = ad.total(ad.reciprocal(t))
    out.backward()
    assert np.allclose(t.grad, -1.0 / x**2)


def test_concat_narrow_reshape_sum():
    check_op(lambda t: ad.concat([t[0], t[1]], axis=1), (2, 3), (2, 4))
    check_op(lambda t: ad.narrow(t[0], 1, 1, 2), (3, 5))
    check_op(lambda t: ad.reshape(t[0], (6,)), (2, 3))
    check_op(lambda t: ad.sum_axis(t[0], 1), (3, 4))
    check_op(lambda t: ad.mean_all(t[0]), (4, 4))
    check_op(lambda t: ad.scale(t[0], -2.5), (3, 3))
    check_op(lambda t: ad.shift(t[0], 1.5), (3, 3))


def test_gaussian_log_density_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 1, (4, 2))

    def build(t):
        sigma = ad.shift(ad.softplus(t[1]), 1e-3)
        return ad.gaussian_log_density(x, t[0], sigma)

    check_op(build, (4, 2), (4, 2), atol=1e-5)


def test_value_reuse_accumulates_gradients():
    # y = x * x via two references to the same tensor
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    out = ad.total(ad.mul(x, x))
    out.backward()
    assert np.allclose(x.grad, [6.0])


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.add(x, x).backward()


def test_constants_get_no_gradient():
    c = ad.constant(np.ones(3))
    x = ad.Tensor(np.ones(3), requires_grad=True)
    out = ad.total(ad.mul(c, x))
    out.backward()
    assert c.grad is None
    assert x.grad is not None
