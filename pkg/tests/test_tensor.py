import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distseg import _backend
from distseg.tensor import (
    KernelBank,
    NumericError,
    ShapeError,
    activation,
    activation_deriv,
    conv2d,
    conv2d_transpose,
    conv2d_weight_grad,
    load_tensor,
    same_padding,
    save_tensor,
    softmax_channels,
    softmax_channels_backward,
)


def naive_conv(x, w):
    """Direct summation with explicit bounds checks (zero outside the grid)."""
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    pt, _ = same_padding(kh)
    pl, _ = same_padding(kw)
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                s = 0.0
                for c in range(C):
                    for a in range(kh):
                        for b in range(kw):
                            r, q = i + a - pt, j + b - pl
                            if 0 <= r < H and 0 <= q < W:
                                s += w[o, c, a, b] * x[c, r, q]
                out[o, i, j] = s
    return out


def test_identity_kernel(backend, rng):
    x = rng.standard_normal((1, 3, 3))
    K = KernelBank(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(conv2d(x, K), x)
    np.testing.assert_array_equal(conv2d_transpose(x, K), x)


def test_all_ones_border_truncation(backend):
    x = np.ones((1, 2, 2))
    K = KernelBank(np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(conv2d(x, K), np.full((1, 2, 2), 4.0))


def test_zeros_map_to_zeros(backend, rng):
    K = KernelBank(rng.standard_normal((3, 2, 3, 3)))
    assert not conv2d(np.zeros((2, 5, 4)), K).any()
    assert not conv2d_transpose(np.zeros((3, 5, 4)), K).any()


@pytest.mark.parametrize("kh,kw", [(1, 1), (3, 3), (2, 2), (4, 3), (5, 2)])
def test_conv_matches_direct_summation(backend, rng, kh, kw):
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((3, 2, kh, kw))
    np.testing.assert_allclose(conv2d(x, KernelBank(w)), naive_conv(x, w), rtol=1e-12, atol=1e-12)


def test_adjoint_dot_test(backend, rng):
    u = rng.standard_normal((2, 4, 4))
    v = rng.standard_normal((3, 4, 4))
    K = KernelBank(rng.standard_normal((3, 2, 3, 3)))
    lhs = np.vdot(conv2d(u, K), v)
    rhs = np.vdot(u, conv2d_transpose(v, K))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


@settings(max_examples=40, deadline=None)
@given(
    c_in=st.integers(1, 3), c_out=st.integers(1, 3), H=st.integers(1, 7), W=st.integers(1, 7),
    kh=st.integers(1, 5), kw=st.integers(1, 5), seed=st.integers(0, 2**31 - 1),
)
def test_adjoint_identity_random_shapes(c_in, c_out, H, W, kh, kw, seed):
    r = np.random.default_rng(seed)
    u = r.standard_normal((c_in, H, W))
    v = r.standard_normal((c_out, H, W))
    K = KernelBank(r.standard_normal((c_out, c_in, kh, kw)))
    lhs = np.vdot(conv2d(u, K), v)
    rhs = np.vdot(u, conv2d_transpose(v, K))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_weight_grad_is_gradient_of_inner_product(backend, rng):
    x = rng.standard_normal((2, 5, 5))
    g = rng.standard_normal((3, 5, 5))
    w = rng.standard_normal((3, 2, 3, 2))
    gw = conv2d_weight_grad(x, g, 3, 2)
    # <conv(x, K), g> is linear in K, so the gradient is exact on basis kernels
    expect = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = 1.0
        expect[idx] = np.vdot(conv2d(x, KernelBank(e)), g)
    np.testing.assert_allclose(gw, expect, rtol=1e-12, atol=1e-12)


def test_backends_agree(rng):
    if len(_backend.BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    x = rng.standard_normal((4, 9, 11))
    K = KernelBank(rng.standard_normal((5, 4, 3, 3)))
    g = rng.standard_normal((5, 9, 11))
    out = {}
    for name in ("python", "cython"):
        _backend.use(name)
        out[name] = (conv2d(x, K), conv2d_transpose(g, K), conv2d_weight_grad(x, g, 3, 3))
    _backend.use("cython")
    for a, b in zip(out["python"], out["cython"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_float32_path(backend, rng):
    x = rng.standard_normal((2, 6, 6)).astype(np.float32)
    K = KernelBank(rng.standard_normal((2, 2, 3, 3)))
    out = conv2d(x, K)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, naive_conv(x.astype(np.float64), K.weights), rtol=1e-4, atol=1e-4)


def test_batched_leading_axis(backend, rng):
    x = rng.standard_normal((3, 2, 5, 5))
    K = KernelBank(rng.standard_normal((4, 2, 3, 3)))
    out = conv2d(x, K)
    assert out.shape == (3, 4, 5, 5)
    for i in range(3):
        np.testing.assert_allclose(out[i], conv2d(x[i], K), rtol=1e-14)


@pytest.mark.parametrize("k,expect", [(1, (0, 0)), (3, (1, 1)), (2, (0, 1)), (12, (5, 6)), (9, (4, 4))])
def test_same_padding_split(k, expect):
    assert same_padding(k) == expect


@pytest.mark.parametrize("k", [2, 4, 12])
def test_even_kernels_preserve_shape(backend, rng, k):
    x = rng.standard_normal((1, 13, 10))
    K = KernelBank(rng.standard_normal((2, 1, k, k)))
    assert conv2d(x, K).shape == (2, 13, 10)
    assert conv2d_transpose(conv2d(x, K), K).shape == (1, 13, 10)


def test_shape_and_numeric_errors(rng):
    K = KernelBank(rng.standard_normal((2, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((2, 4, 4)), K)
    with pytest.raises(ShapeError):
        conv2d_transpose(np.zeros((3, 4, 4)), K)
    bad = np.zeros((3, 4, 4))
    bad[0, 1, 1] = np.nan
    with pytest.raises(NumericError):
        conv2d(bad, K)
    with pytest.raises(ValueError):
        KernelBank(np.zeros((2, 3, 0, 3)))
    with pytest.raises(NumericError):
        KernelBank(np.full((1, 1, 1, 1), np.inf))


def test_flat_block_kernel_allowed(rng):
    K = KernelBank(rng.standard_normal((12, 53, 3, 3)))
    assert (K.out_channels, K.in_channels) == (12, 53)


def test_softmax_examples():
    p = softmax_channels(np.zeros((3, 1, 1)))
    np.testing.assert_allclose(p, 1 / 3, rtol=1e-15)
    p = softmax_channels(np.array([0.0, math.log(2)]).reshape(2, 1, 1))
    np.testing.assert_allclose(p.ravel(), [1 / 3, 2 / 3], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 300.0))
def test_softmax_simplex_and_shift_invariance(seed, scale):
    r = np.random.default_rng(seed)
    x = scale * r.standard_normal((3, 2, 3))
    p = softmax_channels(x)
    assert np.all(p >= 0) and np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_channels(x + r.standard_normal((1, 2, 3))), p, atol=1e-12)


def test_softmax_positive_for_moderate_logits(rng):
    p = softmax_channels(5 * rng.standard_normal((4, 6, 6)))
    assert p.min() > 0


def test_softmax_needs_two_classes():
    with pytest.raises(ShapeError):
        softmax_channels(np.zeros((1, 2, 2)))


def test_softmax_backward_examples(rng):
    y = softmax_channels(rng.standard_normal((3, 2, 2)))
    u = np.broadcast_to(rng.standard_normal((1, 2, 2)), (3, 2, 2))
    np.testing.assert_allclose(softmax_channels_backward(y, u), 0.0, atol=1e-15)
    onehot = np.zeros((3, 2, 2))
    onehot[1] = 1.0
    assert np.abs(softmax_channels_backward(onehot, rng.standard_normal((3, 2, 2)))).max() == 0.0


def test_softmax_backward_finite_differences(rng):
    from distseg.gradcheck import fd_gradient, rel_error

    for _ in range(5):
        x = rng.standard_normal((3, 2, 2))
        u = rng.standard_normal((3, 2, 2))
        fd = fd_gradient(lambda z: float(np.vdot(softmax_channels(z), u)), x)
        assert rel_error(fd, softmax_channels_backward(softmax_channels(x), u)) <= 1e-6


@pytest.mark.parametrize("kind", ["tanh", "relu-smooth"])
def test_activation_derivative_finite_differences(kind, rng):
    x = 3 * rng.standard_normal(50)
    h = 1e-5
    fd = (activation(x + h, kind) - activation(x - h, kind)) / (2 * h)
    np.testing.assert_allclose(activation_deriv(x, kind), fd, rtol=1e-8, atol=1e-10)


def test_tanh_values_and_saturation():
    assert activation(np.array([0.0]))[0] == 0.0
    assert activation_deriv(np.array([0.0]))[0] == 1.0
    np.testing.assert_allclose(activation(np.array([-100.0, 100.0])), [-1.0, 1.0], atol=1e-12)


def test_relu_smooth_is_overflow_safe():
    y = activation(np.array([-800.0, 800.0]), "relu-smooth")
    assert np.all(np.isfinite(y)) and y[1] == 800.0
    d = activation_deriv(np.array([-800.0, 800.0]), "relu-smooth")
    np.testing.assert_allclose(d, [0.0, 1.0])


def test_unknown_activation():
    with pytest.raises(ValueError):
        activation(np.zeros(2), "swish")


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_tensor_file_round_trip(tmp_path, rng, dtype):
    x = rng.standard_normal((2, 3, 4)).astype(dtype)
    p = save_tensor(tmp_path / "x.raw", x)
    y = load_tensor(p)
    assert y.dtype == dtype and y.shape == x.shape
    np.testing.assert_array_equal(x, y)
    header = (tmp_path / "x.raw.hdr").read_text()
    assert "shape=2,3,4" in header and "dtype=" in header
    # payload is exactly the little-endian bytes
    assert (tmp_path / "x.raw").read_bytes() == x.astype(x.dtype.newbyteorder("<")).tobytes()


def test_tensor_file_size_mismatch(tmp_path, rng):
    p = save_tensor(tmp_path / "x.raw", rng.standard_normal(6))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_tensor(p)
