import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddcmnet import tensor as T
from ddcmnet.tensor import ConvSpec, ShapeError
from oracles import interp_weights, naive_conv


def ints(rng, shape):
    # Small integers keep float64 sums exact in any order.
    return rng.integers(-8, 9, shape).astype(np.float64)


def _case(rng, c=4, o=4, k=3, r=2, s=1, g=2, h=7, w=6, n=2):
    spec = ConvSpec(c, o, k, r, s, g)
    return spec, ints(rng, (n, c, h, w)), ints(rng, spec.weight_shape), ints(rng, o)


@pytest.mark.parametrize("k,r,s,g", [(1, 1, 1, 1), (3, 1, 1, 1), (3, 3, 2, 2), (3, 5, 3, 4), (5, 2, 1, 1)])
def test_conv_matches_loop_oracle(k, r, s, g):
    rng = np.random.default_rng(k * 100 + r * 10 + s + g)
    spec, x, wt, b = _case(rng, k=k, r=r, s=s, g=g, h=9, w=8)
    ref = naive_conv(x, wt, b, k, r, s, g, spec.padding)
    np.testing.assert_array_equal(T.conv2d(x, wt, b, spec, method="gemm"), ref)


@pytest.mark.parametrize("method", ["gemm", "direct"])
def test_conv_methods_agree(method):
    rng = np.random.default_rng(1)
    spec, x, wt, b = _case(rng, c=8, o=8, r=3, s=2, g=2, h=13, w=11)
    ref = naive_conv(x, wt, b, 3, 3, 2, 2, spec.padding)
    np.testing.assert_allclose(T.conv2d(x, wt, b, spec, method=method), ref, rtol=0, atol=0)


def test_direct_and_gemm_are_bit_identical_in_float32():
    rng = np.random.default_rng(2)
    spec = ConvSpec(6, 6, 3, 2, 1, 3)
    x = rng.standard_normal((2, 6, 10, 10)).astype(np.float32)
    wt = rng.standard_normal(spec.weight_shape).astype(np.float32)
    b = rng.standard_normal(6).astype(np.float32)
    a = T.conv2d(x, wt, b, spec, method="gemm")
    d = T.conv2d(x, wt, b, spec, method="direct")
    assert a.dtype == np.float32
    np.testing.assert_array_equal(a, d)
    g = rng.standard_normal(a.shape).astype(np.float32)
    for ga, gd in zip(T.conv2d_backward(g, x, wt, spec, "gemm"), T.conv2d_backward(g, x, wt, spec, "direct")):
        np.testing.assert_array_equal(ga, gd)


@given(st.integers(1, 7), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_strided_conv_is_subsampled_unit_conv(r, s, seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(2, 2, 3, r, s)
    unit = ConvSpec(2, 2, 3, r, 1)
    x, wt, b = ints(rng, (1, 2, 9, 8)), ints(rng, spec.weight_shape), ints(rng, 2)
    sub = T.conv2d(x, wt, b, unit)[:, :, ::s, ::s]
    np.testing.assert_array_equal(T.conv2d(x, wt, b, spec), sub)


def test_effective_kernel_and_same_padding():
    assert [T.effective_kernel(3, r) for r in (1, 2, 4, 9)] == [3, 5, 9, 19]
    spec = ConvSpec(1, 1, 3, 4)
    assert spec.padding == 4
    assert spec.output_size(10, 7) == (10, 7)
    assert ConvSpec(1, 1, 3, 1, stride=2).output_size(9, 8) == (5, 4)


def test_conv_no_bias_and_errors():
    rng = np.random.default_rng(0)
    spec = ConvSpec(2, 3, 3, has_bias=False)
    x, wt = ints(rng, (1, 2, 5, 5)), ints(rng, spec.weight_shape)
    out = T.conv2d(x, wt, None, spec)
    np.testing.assert_array_equal(out, naive_conv(x, wt, None, 3, 1, 1, 1, 1))
    assert T.conv2d_backward(np.ones_like(out), x, wt, spec)[2] is None
    with pytest.raises(ShapeError):
        T.conv2d(x, wt, np.zeros(3), spec)
    with pytest.raises(ShapeError):
        T.conv2d(x[:, :1], wt, None, spec)
    with pytest.raises(ShapeError):
        T.conv2d(x, wt, None, ConvSpec(2, 3, 3, dilation=4, padding=0, has_bias=False))
    with pytest.raises(ValueError):
        ConvSpec(3, 4, 3, groups=2)
    with pytest.raises(ValueError):
        ConvSpec(2, 2, 2)
    with pytest.raises(ShapeError):
        T.check_tensor(np.zeros((2, 3, 4)))
    with pytest.raises(TypeError):
        T.check_tensor(np.zeros((1, 1, 2, 2), dtype=np.int32))


@pytest.mark.parametrize("n_in,n_out", [(4, 8), (5, 11), (1, 3), (7, 7), (8, 3)])
def test_interp_matrix_matches_per_pixel_oracle(n_in, n_out):
    np.testing.assert_allclose(T.interp_matrix(n_in, n_out), interp_weights(n_in, n_out), atol=1e-15)
    np.testing.assert_allclose(T.interp_matrix(n_in, n_out).sum(axis=1), 1.0)


def test_upsample_identity_constant_and_adjoint():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(T.bilinear_upsample(x, 4, 5), x)
    const = np.full((1, 1, 3, 3), 2.5)
    np.testing.assert_allclose(T.bilinear_upsample(const, 7, 9), 2.5)
    g = rng.standard_normal((2, 3, 9, 11))
    lhs = np.sum(T.bilinear_upsample(x, 9, 11) * g)
    rhs = np.sum(x * T.bilinear_upsample_backward(g, 4, 5))
    assert abs(lhs - rhs) < 1e-10
    with pytest.raises(ShapeError):
        T.bilinear_upsample(x, 3, 5)


def test_pools_match_loops():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 7, 6))
    out, idx = T.max_pool(x, 3, 2)
    avg = T.avg_pool(x, 2, 2)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            win = x[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            np.testing.assert_array_equal(out[:, :, i, j], win.max(axis=(2, 3)))
    for i in range(avg.shape[2]):
        for j in range(avg.shape[3]):
            np.testing.assert_allclose(avg[:, :, i, j], x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(2, 3)))
    g = rng.standard_normal(out.shape)
    gx = T.max_pool_backward(g, idx, x.shape, 3, 2)
    assert np.isclose(gx.sum(), g.sum())


def test_softmax_and_channel_concat():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((2, 5, 3, 3)) * 50
    np.testing.assert_allclose(T.softmax(z).sum(axis=1), 1.0, atol=1e-12)
    a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
    cat = T.concat_channels(a, b)
    back = T.split_channels(cat, 2)
    np.testing.assert_array_equal(back[0], a)
    np.testing.assert_array_equal(back[1], b)
    with pytest.raises(ShapeError):
        T.concat_channels(a, np.zeros((1, 1, 2, 3)))


def test_batch_norm_eval_formula():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 4, 4))
    g, b = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
    mu, var = rng.standard_normal(3), rng.uniform(0.1, 2, 3)
    ref = (x - mu[:, None, None]) / np.sqrt(var[:, None, None] + T.BN_EPS) * g[:, None, None] + b[:, None, None]
    np.testing.assert_allclose(T.batch_norm_eval(x, g, b, mu, var), ref, atol=1e-12)
    out, (xhat, _, mean, v) = T.batch_norm_train(x, g, b)
    np.testing.assert_allclose(xhat.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(v, x.var(axis=(0, 2, 3)))


def test_dilated_impulse_response():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    out = T.conv2d(x, np.ones((1, 1, 3, 3)), None, ConvSpec(1, 1, 3, 2, padding=2, has_bias=False))
    expected = np.zeros((5, 5))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(out[0, 0], expected)


def test_unit_dilation_is_standard_conv():
    rng = np.random.default_rng(8)
    x, wt = ints(rng, (1, 3, 6, 6)), ints(rng, (2, 3, 3, 3))
    a = T.conv2d(x, wt, None, ConvSpec(3, 2, 3, 1, has_bias=False))
    np.testing.assert_array_equal(a, naive_conv(x, wt, None, 3, 1, 1, 1, 1))


def test_zero_grad_out_gives_zero_gradients():
    rng = np.random.default_rng(9)
    spec = ConvSpec(2, 2, 3, 2)
    x = rng.standard_normal((1, 2, 6, 6))
    grads = T.conv2d_backward(np.zeros((1, 2, 6, 6)), x, rng.standard_normal(spec.weight_shape), spec)
    assert all(not g.any() for g in grads)


def test_prelu_pointwise_values():
    x = np.array([[[[-2.0, 3.0]]]])
    np.testing.assert_array_equal(T.prelu(x, np.array([0.25])), [[[[-0.5, 3.0]]]])
    np.testing.assert_array_equal(T.prelu(x, np.array([1.0])), x)


def test_ramp_max_pool_and_unit_window():
    ramp = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(T.max_pool(ramp, 2, 2)[0][0, 0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(T.max_pool(ramp, 1, 1)[0], ramp)


def test_batch_norm_train_normalises():
    x = np.random.default_rng(10).standard_normal((4, 3, 5, 5)) * 3 + 2
    out, _ = T.batch_norm_train(x, np.ones(3), np.zeros(3))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_upsample_matches_per_pixel_oracle_3_to_6():
    x = np.random.default_rng(11).standard_normal((1, 1, 3, 3))
    m = interp_weights(3, 6)
    ref = np.einsum("oi,ij,pj->op", m, x[0, 0], m)
    np.testing.assert_allclose(T.bilinear_upsample(x, 6, 6)[0, 0], ref, atol=1e-6)
