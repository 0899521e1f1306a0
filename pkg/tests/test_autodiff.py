import numpy as np
import pytest

from dpnet.autodiff import Rng, Tensor, backward, conv2d, grad, gradcheck, no_grad, tensor_create
from dpnet.autodiff.functional import conv2d_unfolded
from dpnet.errors import NumericError, OracleInvalidError, ShapeError, UsageError
from dpnet.oracles import HIGHER_ORDER, LOSS_CASES, OP_CASES, check_op


@pytest.mark.parametrize("name", list(OP_CASES))
def test_op_matches_central_differences(name):
    rep = check_op(name)
    assert rep.checked > 0
    assert rep.max_rel_err <= 1e-4, rep.worst


@pytest.mark.parametrize("name", sorted(set(OP_CASES) - HIGHER_ORDER - LOSS_CASES))
@pytest.mark.parametrize("seed", [1, 2])
def test_primitive_op_gradients_are_tight(name, seed):
    rep = check_op(name, seed)
    assert rep.max_rel_err <= 1e-6, rep.worst


def _direct_conv(x, w, stride, pad):
    """Seven-loop reference convolution."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (5, 1, 2), (3, 2, 1), (1, 1, 0), (3, 2, 0), (1, 2, 0)])
def test_conv_forward_matches_loops(rng, k, stride, pad):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, k, k))
    ref = _direct_conv(x, w, stride, pad)
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w), None, stride, pad).data, ref, atol=1e-12)
    np.testing.assert_allclose(conv2d_unfolded(Tensor(x), Tensor(w), stride, pad).data, ref, atol=1e-12)


@pytest.mark.parametrize("cin,cout,k,stride,pad", [(17, 16, 5, 1, 2), (16, 3, 3, 1, 1), (18, 20, 3, 2, 1)])
def test_wide_conv_forward_and_gradients(rng, cin, cout, k, stride, pad):
    # wide channel counts take the per-tap product path
    x = Tensor(rng.normal(size=(2, cin, 7, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(cout, cin, k, k)) * 0.2, requires_grad=True)
    np.testing.assert_allclose(conv2d(x, w, None, stride, pad).data, _direct_conv(x.data, w.data, stride, pad), atol=1e-11)
    probe = rng.normal(size=conv2d(x, w, None, stride, pad).shape)
    rep = gradcheck(lambda: (conv2d(x, w, None, stride, pad) * probe).sum(), [x, w], max_elements=40, rng=Rng(3))
    assert rep.max_rel_err <= 1e-6, rep.worst


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 4, 3, 3))))


def test_grad_matches_backward(rng):
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    out = ((a @ b).sigmoid() * a).sum()
    ga, gb = grad(out, [a, b])
    backward(((a @ b).sigmoid() * a).sum())
    np.testing.assert_array_equal(ga.data, a.grad)
    np.testing.assert_array_equal(gb.data, b.grad)


def test_grad_of_unused_leaf_is_zero(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    ga, gb = grad((a * a).sum(), [a, b])
    np.testing.assert_array_equal(gb.data, 0.0)
    np.testing.assert_allclose(ga.data, 2 * a.data)


def test_second_derivative_of_cubic():
    x = Tensor(np.array([0.7, -1.3]), requires_grad=True)
    (g,) = grad((x**3).sum(), [x], create_graph=True)
    (h,) = grad(g.sum(), [x])
    np.testing.assert_allclose(h.data, 6 * x.data, rtol=1e-14)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    with pytest.raises(UsageError):
        backward(y)


def test_overflow_raises_numeric_error():
    with pytest.raises(NumericError):
        Tensor(np.array([1000.0])).exp()


def test_gradcheck_rejects_nondeterministic_program():
    x = Tensor(np.ones(3), requires_grad=True)
    state = {"n": 0}

    def f():
        state["n"] += 1
        return (x * state["n"]).sum()

    with pytest.raises(OracleInvalidError):
        gradcheck(f, [x])


def test_gradcheck_skips_kink_elements():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    rep = gradcheck(lambda: x.relu().sum(), [x])
    assert rep.skipped_kinks == 1 and rep.checked == 2


def test_gradcheck_detects_a_wrong_gradient():
    from dpnet.autodiff.tensor import Function

    class BadSquare(Function):
        def forward(self, a):
            self.a = a
            return a * a

        def backward(self, g):
            return (g * Tensor(3 * self.a),)

    x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
    rep = gradcheck(lambda: BadSquare.apply(x).sum(), [x])
    assert not rep.passed(1e-4)


def test_rng_streams_are_reproducible():
    a, b = Rng((3, 4)), Rng((3, 4))
    np.testing.assert_array_equal(a.uniform(size=5), b.uniform(size=5))
    assert not np.array_equal(Rng(1).child(0).uniform(size=3), Rng(1).child(1).uniform(size=3))


def test_tensor_create_kaiming_bounds():
    t = tensor_create((64, 8, 3, 3), "kaiming", fan_in=72, rng=Rng(0))
    assert np.abs(t.data).max() <= np.sqrt(6 / 72)
    with pytest.raises(ShapeError):
        tensor_create((0, 2))
