import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fab.autodiff import Tensor, functional as F, gradcheck
from fab.autodiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fab.autodiff.gradcheck import max_gradcheck_error
from fab.autodiff.optim import Adam, make_optimizer
from fab.autodiff.tensor import clip, concat, default_dtype, get_default_dtype, no_grad, softmax, stack, tanh

TOL = 1e-4


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "pow", "exp", "log", "relu", "sigmoid", "abs",
                                "matmul", "mean_axis", "reshape_t", "getitem"])
def test_elementwise_gradients(rng, op):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    m = leaf(rng, 4, 2)
    probe = Tensor(rng.normal(size=(3, 4)))
    fns = {
        "add": (lambda: ((a + b) * probe).sum(), [a, b]),
        "sub": (lambda: ((a - b) * probe).sum(), [a, b]),
        "mul": (lambda: (a * b).sum(), [a, b]),
        "div": (lambda: (a / pos).sum(), [a, pos]),
        "pow": (lambda: (pos ** 2.5).sum(), [pos]),
        "exp": (lambda: (a.exp() * probe).sum(), [a]),
        "log": (lambda: (pos.log() * probe).sum(), [pos]),
        "relu": (lambda: ((a + 0.05).relu() * probe).sum(), [a]),
        "sigmoid": (lambda: (a.sigmoid() * probe).sum(), [a]),
        "abs": (lambda: ((a + 0.05).abs() * probe).sum(), [a]),
        "matmul": (lambda: ((a @ m) ** 2).sum(), [a, m]),
        "mean_axis": (lambda: (a.mean(axis=1) * Tensor(np.arange(3.0))).sum(), [a]),
        "reshape_t": (lambda: (a.reshape(4, 3).transpose(1, 0) * probe).sum(), [a]),
        "getitem": (lambda: (a[1:, ::2] ** 2).sum(), [a]),
    }
    fn, inputs = fns[op]
    assert max_gradcheck_error(fn, inputs) < TOL


@pytest.mark.parametrize("op", ["linear", "avg_pool", "upsample", "global_pool", "concat", "stack", "tanh", "clip"])
def test_layer_gradients(rng, op):
    x, y = leaf(rng, 2, 3, 4, 4), leaf(rng, 2, 3, 4, 4)
    v, w, b = leaf(rng, 5, 3), leaf(rng, 2, 3), leaf(rng, 2)
    fns = {
        "linear": (lambda: (F.linear(v, w, b) ** 2).sum(), [v, w, b]),
        "avg_pool": (lambda: (F.avg_pool2d(x) ** 2).sum(), [x]),
        "upsample": (lambda: (F.upsample2x(x) ** 2).sum(), [x]),
        "global_pool": (lambda: (F.global_avg_pool(x) ** 2).sum(), [x]),
        "concat": (lambda: (concat([x, y], axis=1) ** 2).sum(), [x, y]),
        "stack": (lambda: (stack([x, y], axis=0) ** 3).sum(), [x, y]),
        "tanh": (lambda: (tanh(x) ** 2).sum(), [x]),
        "clip": (lambda: (clip(x + 0.013, -0.5, 0.5) ** 2).sum(), [x]),
    }
    fn, inputs = fns[op]
    assert max_gradcheck_error(fn, inputs) < TOL


def test_broadcast_gradient_reduces_to_operand_shape(rng):
    a, bias = leaf(rng, 2, 3, 4), leaf(rng, 3, 1)
    assert max_gradcheck_error(lambda: ((a + bias) ** 2).sum(), [a, bias]) < TOL
    assert bias.grad.shape == (3, 1)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv2d_gradients(rng, stride, pad):
    x, w, b = leaf(rng, 2, 3, 7, 6), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
    assert max_gradcheck_error(lambda: (F.conv2d(x, w, b, stride, pad) ** 2).sum(), [x, w, b]) < TOL


def test_conv2d_matches_direct_correlation(rng):
    x, w, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for i in range(6):
        for j in range(5):
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", xp[:, :, i : i + 3, j : j + 3], w) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_normalization_gradients(rng):
    x, g, b = leaf(rng, 2, 3, 4, 4), leaf(rng, 3), leaf(rng, 3)
    probe = Tensor(rng.normal(size=(2, 3, 4, 4)))
    assert max_gradcheck_error(lambda: (F.instance_norm(x, g, b) * probe).sum(), [x, g, b]) < TOL
    bn = lambda: (F.batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True) * probe).sum()  # noqa: E731
    assert max_gradcheck_error(bn, [x, g, b]) < TOL


def test_softmax_gradient_and_rows_sum_to_one(rng):
    z = leaf(rng, 2, 5, 3)
    probe = Tensor(rng.normal(size=(2, 5, 3)))
    assert max_gradcheck_error(lambda: (softmax(z, axis=1) * probe).sum(), [z]) < TOL
    np.testing.assert_allclose(softmax(z, axis=1).data.sum(axis=1), 1.0, atol=1e-12)


def test_warp_gradients_in_source_and_flow(rng):
    src = Tensor(rng.random((2, 2, 6, 7)), requires_grad=True)
    flow = Tensor(rng.uniform(-1.3, 1.3, (2, 2, 6, 7)), requires_grad=True)
    probe = Tensor(rng.normal(size=(2, 2, 6, 7)))
    assert max_gradcheck_error(lambda: (F.warp(src, flow) * probe).sum(), [src, flow], eps=1e-6) < TOL


def test_losses_gradients(rng):
    p, t = leaf(rng, 3, 4), Tensor(rng.normal(size=(3, 4)))
    assert max_gradcheck_error(lambda: F.mse_loss(p, t), [p]) < TOL
    assert max_gradcheck_error(lambda: F.l1_loss(p, t, normalizer=7.0), [p]) < TOL
    assert F.l1_loss(p, t, normalizer=7.0).item() == pytest.approx(np.abs(p.data - t.data).sum() / 7.0)


def test_no_grad_builds_no_graph(rng):
    a = leaf(rng, 3)
    with no_grad():
        out = (a * 2).sum()
    assert not out.requires_grad


def test_default_dtype_context_restores():
    assert get_default_dtype() == np.float64
    with default_dtype(np.float32):
        assert Tensor([1.0, 2.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(4, 9), st.integers(4, 9),
       st.floats(-3, 3, allow_nan=False), st.floats(-3, 3, allow_nan=False))
def test_warp_of_constant_image_is_constant(c, h, w, du, dv):
    val = 0.37
    src = np.full((1, c, h, w), val)
    flow = np.zeros((1, 2, h, w))
    flow[:, 0], flow[:, 1] = du, dv
    np.testing.assert_allclose(F.warp(Tensor(src), Tensor(flow)).data, val, atol=1e-12)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        p.grad = None
        loss = (p * p).sum()
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_unknown_optimizer_rejected():
    with pytest.raises(ValueError):
        make_optimizer([], "lbfgs")


def test_checkpoint_round_trip_and_corruption(tmp_path, rng):
    state = {"a.weight": rng.normal(size=(2, 3)), "b.bias": rng.normal(size=4)}
    path = save_checkpoint(tmp_path / "m.npz", state, {"kind": "x", "width": 4})
    loaded, manifest = load_checkpoint(path)
    assert manifest == {"kind": "x", "width": 4}
    for k in state:
        assert np.array_equal(loaded[k], state[k])
    bad = tmp_path / "bad.npz"
    bad.write_bytes(path.read_bytes()[:50])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_gradcheck_detects_wrong_backward(rng):
    a = leaf(rng, 4)

    def broken():
        out = Tensor._make(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")
        return out.sum()

    errors = gradcheck(broken, [a])
    assert errors[0] > 0.1
