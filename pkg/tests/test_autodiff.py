import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modnic import autodiff as ad
from modnic import gradcheck
from modnic.autodiff import ShapeError, Tensor


def _grad(fn, *arrays):
    ts = [Tensor(a, True) for a in arrays]
    ad.backward(fn(*ts))
    return [t.grad for t in ts]


def _numeric_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 4, 5, 5))
    k = np.eye(4).reshape(4, 4, 1, 1)
    out = ad.conv2d(x, k, np.zeros(4), 1, 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_output_shape():
    x = np.zeros((1, 3, 32, 32))
    out = ad.conv2d(x, np.zeros((8, 3, 3, 3)), np.zeros(8), 2, 1)
    assert out.shape == (1, 8, 16, 16)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ad.conv2d(x, k, b, 2, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * k[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("bad", [
    dict(kernel=(4, 2, 3, 3)),  # channel mismatch
    dict(kernel=(4, 3, 3, 3), bias=5),  # bias length
    dict(kernel=(4, 3, 2, 2)),  # unsupported kernel size
    dict(kernel=(4, 3, 3, 3), stride=3),  # unsupported stride
])
def test_conv_rejects_bad_shapes(bad):
    x = np.zeros((1, 3, 8, 8))
    k = np.zeros(bad["kernel"])
    b = np.zeros(bad.get("bias", bad["kernel"][0]))
    with pytest.raises(ShapeError):
        ad.conv2d(x, k, b, bad.get("stride", 1), 1)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    w = rng.standard_normal((1, 3, 3, 3))
    f = lambda x_, k_, b_: ad.sum(ad.mul(ad.conv2d(x_, k_, b_, 2, 1), ad.constant(w)))
    gx, gk, gb = _grad(f, x, k, b)
    val = lambda **kw: f(Tensor(kw.get("x", x)), Tensor(kw.get("k", k)), Tensor(kw.get("b", b))).item()
    np.testing.assert_allclose(gx, _numeric_grad(lambda v: val(x=v), x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gk, _numeric_grad(lambda v: val(k=v), k), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, _numeric_grad(lambda v: val(b=v), b), rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------- transposed conv


def test_transposed_identity():
    x = np.random.default_rng(3).standard_normal((1, 3, 4, 4))
    out = ad.transposed_conv2d(x, np.eye(3).reshape(3, 3, 1, 1), np.zeros(3), 1, 0)
    np.testing.assert_array_equal(out.data, x)


def test_transposed_output_shape():
    out = ad.transposed_conv2d(np.zeros((1, 4, 2, 2)), np.zeros((4, 5, 3, 3)), np.zeros(5), 2, 1)
    assert out.shape == (1, 5, 3, 3)
    out = ad.transposed_conv2d(np.zeros((1, 4, 2, 2)), np.zeros((4, 5, 3, 3)), np.zeros(5), 2, 1, 1)
    assert out.shape == (1, 5, 4, 4)


@pytest.mark.parametrize("k,s", [(1, 1), (3, 1), (3, 2), (5, 2)])
def test_transposed_is_adjoint_of_conv(k, s):
    rng = np.random.default_rng(k * 10 + s)
    pad = k // 2
    a = rng.standard_normal((2, 3, 4, 4))
    K = rng.standard_normal((5, 3, k, k))
    y = ad.conv2d(a, K, None, s, pad).data
    b = rng.standard_normal(y.shape)
    op = (a.shape[2] + 2 * pad - k) - (y.shape[2] - 1) * s
    back = ad.transposed_conv2d(b, K, None, s, pad, op).data
    assert back.shape == a.shape
    np.testing.assert_allclose(np.sum(y * b), np.sum(a * back), rtol=1e-12)


# ---------------------------------------------------------------- dense, pointwise


def test_dense_examples():
    assert np.array_equal(ad.dense([[1.0, 2.0]], [[1, 1], [1, -1]], [0, 0]).data, [[3.0, -1.0]])
    x = np.random.default_rng(4).standard_normal((3, 4))
    np.testing.assert_array_equal(ad.dense(x, np.eye(4), np.zeros(4)).data, x)
    with pytest.raises(ShapeError):
        ad.dense(x, np.eye(3), np.zeros(3))


def test_pointwise_values():
    assert np.array_equal(ad.pointwise("relu", [-1.0, 2.0]).data, [0.0, 2.0])
    assert ad.pointwise("sigmoid", 0.0).item() == 0.5
    assert ad.pointwise("tanh", 0.0).item() == 0.0
    assert np.isclose(ad.pointwise("softplus", 0.0).item(), np.log(2.0))
    assert np.array_equal(ad.pointwise("mul", [2.0, 3.0], [4.0, 5.0]).data, [8.0, 15.0])
    with pytest.raises(ShapeError):
        ad.pointwise("add", np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        ad.pointwise("exp", 1.0)


def test_sigmoid_softplus_are_stable_for_large_inputs():
    x = np.array([-800.0, -50.0, 0.0, 50.0, 800.0])
    s = ad.sigmoid(x).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[-1] == 1.0
    sp = ad.softplus(x).data
    assert np.all(np.isfinite(sp)) and sp[-1] == 800.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_mul_gradient_is_other_operand(values):
    a = np.array(values)
    b = a[::-1] + 1.0
    ga, gb = _grad(lambda x, y: ad.sum(ad.mul(x, y)), a, b)
    np.testing.assert_array_equal(ga, b)
    np.testing.assert_array_equal(gb, a)


# ---------------------------------------------------------------- broadcast, reductions, backward


def test_broadcast_spatial():
    out = ad.broadcast_spatial([[1.0, 2.0]], 2, 2)
    np.testing.assert_array_equal(out.data, [[np.ones((2, 2)), 2 * np.ones((2, 2))]])
    (g,) = _grad(lambda v: ad.sum(ad.broadcast_spatial(v, 3, 5)), np.ones((2, 4)))
    np.testing.assert_array_equal(g, np.full((2, 4), 15.0))
    v = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ad.broadcast_spatial(v, 1, 1).data, v.reshape(2, 3, 1, 1))


def test_reductions():
    assert ad.mean(np.full((3, 4), 2.5)).item() == 2.5
    (g,) = _grad(ad.sum, np.random.default_rng(5).standard_normal((2, 3)))
    np.testing.assert_array_equal(g, np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.backward(Tensor(np.ones(3), True))


def test_shared_node_accumulates_gradient():
    (g,) = _grad(lambda x: ad.sum(ad.add(ad.mul(x, x), x)), np.array([1.0, -2.0]))
    np.testing.assert_array_equal(g, [3.0, -3.0])


def test_constant_inputs_receive_no_gradient():
    x = Tensor([1.0, 2.0], True)
    c = ad.constant([3.0, 4.0])
    ad.backward(ad.sum(ad.mul(x, c)))
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_non_finite_inputs_rejected():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])


def test_identical_runs_give_bit_identical_gradients():
    def run():
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), True)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)), True)
        out = ad.relu(ad.conv2d(x, k, np.zeros(4), 2, 1))
        ad.backward(ad.mean(ad.mul(out, out)))
        return x.grad, k.grad

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


# ---------------------------------------------------------------- gradcheck harness


@pytest.mark.parametrize("name", [n for n in gradcheck.CASES if not n.startswith("loss")])
def test_gradcheck_op(name):
    result = gradcheck.check_case(name, points=20, seed=1)
    assert result.ok, f"{name}: {result.max_rel_error:.2e}"


def test_directional_error_detects_a_wrong_gradient():
    x = Tensor(np.array([0.3, -0.7]), True)

    def broken():
        out = ad.sum(ad.mul(x, x))
        # tamper with the analytic gradient: claim d/dx = x instead of 2x
        out._backward = lambda g: (g * 0.5,)
        return out

    err = gradcheck.directional_error(gradcheck.Case([x], broken), np.random.default_rng(0))
    assert err > 0.1
