import numpy as np
import pytest

from flimseg import autodiff as ad


def finite_difference(f, x, eps=1e-6):
    """Central-difference gradient of a scalar function over array x."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        grad[i] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return grad


def check_op(build, shapes, seed=0, tol=1e-6):
    """FD-check every input of an op; build(tensors) -> output Tensor."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    weights = rng.normal(size=build(*[ad.Tensor(a) for a in arrays]).shape)

    def objective(values):
        out = build(*[ad.Tensor(v) for v in values])
        return float((out.data * weights).sum())

    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    ad.backward(out, weights)
    for i, t in enumerate(tensors):
        def f(x, i=i):
            vals = [a.copy() for a in arrays]
            vals[i] = x
            return objective(vals)

        fd = finite_difference(f, arrays[i])
        assert t.grad is not None
        assert np.abs(t.grad - fd).max() < tol, f"input {i} gradient mismatch"


def test_conv3d_gradients():
    check_op(lambda x, w: ad.conv3d(x, w, 3), [(4, 5, 6, 2), (3, 54)])


def test_conv1_gradients():
    check_op(lambda x, w: ad.conv3d(x, w, 1), [(3, 4, 5, 2), (4, 2)])


def test_conv_transpose_gradients():
    check_op(lambda x, w: ad.conv_transpose2(x, w), [(3, 3, 3, 2), (2, 4, 2, 2, 2)])


def test_bias_relu_maxpool_gradients():
    check_op(lambda x, b: ad.relu(ad.bias_add(x, b)), [(4, 4, 4, 3), (3,)])
    check_op(lambda x: ad.maxpool2(x), [(4, 6, 4, 2)])


def test_concat_and_centralize_gradients():
    check_op(lambda a, b: ad.concat([a, b]), [(3, 3, 3, 2), (3, 3, 3, 4)])
    mean = np.array([0.3, -0.2])
    std = np.array([1.5, 0.7])
    check_op(lambda x: ad.centralize(x, mean, std), [(3, 3, 3, 2)])


def test_composite_graph_and_weight_reuse():
    rng = np.random.default_rng(1)
    x_data = rng.normal(size=(4, 4, 4, 1))
    w_data = rng.normal(size=(2, 27))
    weights = rng.normal(size=(4, 4, 4, 4))

    def build(x, w):
        # the same weight tensor feeds two branches; grads must accumulate
        return ad.concat([ad.relu(ad.conv3d(x, w, 3)), ad.conv3d(x, w, 3)])

    def objective(w_val):
        out = build(ad.Tensor(x_data), ad.Tensor(w_val))
        return float((out.data * weights).sum())

    w = ad.Tensor(w_data, requires_grad=True)
    out = build(ad.Tensor(x_data), w)
    ad.backward(out, weights)
    fd = finite_difference(objective, w_data)
    assert np.abs(w.grad - fd).max() < 1e-5


def test_no_grad_graphs_build_no_tape():
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.normal(size=(4, 4, 4, 1)))
    w = ad.Tensor(rng.normal(size=(2, 27)))
    out = ad.conv3d(x, w, 3)
    assert not out.requires_grad
    assert out.parents == ()


def test_float32_path():
    rng = np.random.default_rng(3)
    x = ad.Tensor(rng.normal(size=(4, 4, 4, 2)).astype(np.float32), requires_grad=True)
    w = ad.Tensor(rng.normal(size=(3, 54)).astype(np.float32), requires_grad=True)
    out = ad.relu(ad.conv3d(x, w, 3))
    ad.backward(out, np.ones_like(out.data))
    assert x.grad.dtype == np.float32
    assert w.grad.dtype == np.float32
