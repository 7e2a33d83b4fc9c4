import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnx.errors import ShapeError
from bnnx.tensors import (
    BitMatrix,
    ConvGeometry,
    binary_gemm,
    col2im,
    float_gemm,
    im2col,
    pack_signs,
    sign,
    unpack,
    xnor_dot,
)

from .conftest import pm1


def row_bits(b, row=0):
    return [int(b.bits[row, j // 64] >> np.uint64(j % 64) & np.uint64(1)) for j in range(b.cols)]


def tails_clear(b):
    rem = b.cols % 64
    return rem == 0 or not np.any(b.bits[:, -1] >> np.uint64(rem))


# -- pack_signs / unpack ----------------------------------------------------

def test_pack_signs_zero_is_plus_one(backend):
    assert row_bits(pack_signs([[0.5, -0.3, 0.0]])) == [1, 0, 1]


def test_pack_signs_all_negative(backend):
    assert row_bits(pack_signs([[-1.0, -1.0]])) == [0, 0]


def test_pack_signs_rejects_non_matrix(backend):
    with pytest.raises(ShapeError):
        pack_signs(np.zeros(3))
    with pytest.raises(ShapeError):
        pack_signs(np.zeros((2, 2, 2)))


def test_unpack_matches_elementwise_sign(backend, rng):
    x = rng.standard_normal((3, 70))
    x[0, 5] = 0.0
    b = pack_signs(x)
    assert b.words_per_row == 2 and tails_clear(b)
    np.testing.assert_array_equal(unpack(b), np.where(x >= 0, 1.0, -1.0))


def test_unpack_small():
    b = BitMatrix.from_words(1, 2, np.array([[0b01]], dtype=np.uint64))
    np.testing.assert_array_equal(unpack(b), [[1.0, -1.0]])


def test_unpack_word_boundary(backend):
    b = pack_signs(np.ones((2, 65)))
    np.testing.assert_array_equal(unpack(b), np.ones((2, 65)))
    assert tails_clear(b)


def test_from_words_rejects_dirty_tail():
    with pytest.raises(ShapeError):
        BitMatrix.from_words(1, 3, np.array([[0b1000]], dtype=np.uint64))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_pack_unpack_roundtrip(rows, cols, seed):
    r = np.random.default_rng(seed)
    b = pack_signs(r.standard_normal((rows, cols)))
    assert tails_clear(b)
    assert pack_signs(unpack(b)) == b


# -- xnor_dot -----------------------------------------------------------------

def test_xnor_dot_example(backend):
    a = pack_signs([[1, -1, 1]])
    b = pack_signs([[1, 1, -1]])
    assert xnor_dot(a, b, 3) == -1 == int(np.dot([1, -1, 1], [1, 1, -1]))


def test_xnor_dot_self(backend, rng):
    a = pack_signs(pm1(rng, (1, 70)))
    assert xnor_dot(a, a, 70) == 70


def test_xnor_dot_complement(backend, rng):
    x = pm1(rng, (1, 5))
    assert xnor_dot(pack_signs(x), pack_signs(-x), 5) == -5


def test_xnor_dot_length_mismatch(backend):
    with pytest.raises(ShapeError):
        xnor_dot(pack_signs(np.ones((1, 3))), pack_signs(np.ones((1, 4))))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_xnor_dot_range_and_parity(n, seed):
    r = np.random.default_rng(seed)
    a, b = pm1(r, (1, n)), pm1(r, (1, n))
    d = xnor_dot(pack_signs(a), pack_signs(b), n)
    assert -n <= d <= n and (d - n) % 2 == 0
    assert d == int(a[0] @ b[0])


# -- binary_gemm / float_gemm --------------------------------------------------

def test_binary_gemm_example(backend):
    a = np.array([[1, -1, 1], [-1, -1, 1]], dtype=float)
    b = np.array([[1, -1], [1, 1], [-1, -1]], dtype=float)
    expected = a @ b  # float oracle
    np.testing.assert_array_equal(expected, [[-1, -3], [-3, -1]])
    np.testing.assert_array_equal(binary_gemm(pack_signs(a), pack_signs(b.T)), expected)


def test_binary_gemm_identity_pattern(backend):
    k = 70
    a = -np.ones((4, k))
    for i in range(4):
        a[i, i] = 1
    out = binary_gemm(pack_signs(a), pack_signs(a))
    np.testing.assert_array_equal(np.diag(out), np.full(4, k))


def test_binary_gemm_inner_mismatch(backend):
    with pytest.raises(ShapeError):
        binary_gemm(pack_signs(np.ones((2, 3))), pack_signs(np.ones((2, 4))))


@pytest.mark.parametrize("k", [1, 63, 64, 65, 127, 128, 129, 200])
def test_binary_gemm_matches_float_oracle(backend, rng, k):
    a, bt = pm1(rng, (7, k)), pm1(rng, (5, k))
    np.testing.assert_array_equal(binary_gemm(pack_signs(a), pack_signs(bt)), a @ bt.T)


def test_backends_agree(rng):
    from bnnx import tensors

    backends = tensors.available_backends()
    a, bt = pm1(rng, (33, 130)), pm1(rng, (17, 130))
    outs = [mod.binary_gemm(mod.pack_signs(a), mod.pack_signs(bt), 130) for mod in backends.values()]
    for out in outs[1:]:
        np.testing.assert_array_equal(out, outs[0])


def test_float_gemm_examples():
    m = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(float_gemm(np.eye(2), m), m)
    np.testing.assert_array_equal(float_gemm([[1, 2]], [[3], [4]]), [[11]])
    with pytest.raises(ShapeError):
        float_gemm(np.ones((2, 3)), np.ones((2, 3)))


def test_float_gemm_matches_binary_gemm(rng):
    a, b = pm1(rng, (6, 90)), pm1(rng, (90, 4))
    np.testing.assert_array_equal(float_gemm(a, b), binary_gemm(pack_signs(a), pack_signs(b.T)))


def test_sign():
    np.testing.assert_array_equal(sign([0.3, -2.0, 0.0]), [1, -1, 1])


# -- im2col / col2im ------------------------------------------------------------

def naive_patches(x, g):
    """Direct enumeration of receptive fields (oracle)."""
    n, c, h, w = x.shape
    p = g.padding
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p : p + h, p : p + w] = x
    ho, wo = g.output_hw(h, w)
    rows = []
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                patch = xp[b, :, i * g.stride : i * g.stride + g.kernel_h, j * g.stride : j * g.stride + g.kernel_w]
                rows.append(patch.ravel())
    return np.array(rows)


def naive_conv(x, k, stride, pad):
    n, c, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b, o, i, j in itertools.product(range(n), range(cout), range(ho), range(wo)):
        out[b, o, i, j] = np.sum(xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw] * k[o])
    return out


def test_im2col_example(backend):
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    cols = im2col(x, ConvGeometry(1, 1, 2, 2))
    assert cols.shape == (4, 4)
    np.testing.assert_array_equal(cols[0], [1, 2, 4, 5])
    np.testing.assert_array_equal(cols, naive_patches(x, ConvGeometry(1, 1, 2, 2)))


def test_im2col_single_patch(backend):
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(im2col(x, ConvGeometry(1, 1, 2, 2)), x.reshape(1, 4))


def test_im2col_nonintegral_output(backend):
    with pytest.raises(ShapeError):
        im2col(np.zeros((1, 1, 4, 4)), ConvGeometry(1, 1, 3, 3, stride=2))
    with pytest.raises(ShapeError):
        im2col(np.zeros((1, 2, 4, 4)), ConvGeometry(1, 1, 3, 3))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 0)])
def test_conv_via_im2col_matches_naive(backend, rng, stride, pad):
    c, cout, k = 2, 3, 3
    h = w = 3 * stride + k - 2 * pad if stride > 1 else 6
    g = ConvGeometry(c, cout, k, k, stride, pad)
    x = rng.standard_normal((2, c, h, w))
    kern = rng.standard_normal((cout, c, k, k))
    np.testing.assert_array_equal(im2col(x, g), naive_patches(x, g))
    ho, wo = g.output_hw(h, w)
    got = (im2col(x, g) @ kern.reshape(cout, -1).T).reshape(2, ho, wo, cout).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(got, naive_conv(x, kern, stride, pad), rtol=1e-12, atol=1e-12)


def test_im2col_pad_value(backend):
    cols = im2col(np.zeros((1, 1, 1, 1)), ConvGeometry(1, 1, 3, 3, padding=1), pad_value=1.0)
    np.testing.assert_array_equal(cols, [[1, 1, 1, 1, 0, 1, 1, 1, 1]])


def test_col2im_overlap_counts(backend):
    g = ConvGeometry(1, 1, 2, 2)
    out = col2im(im2col(np.ones((1, 1, 3, 3)), g), g, (1, 1, 3, 3))
    np.testing.assert_array_equal(out[0, 0], [[1, 2, 1], [2, 4, 2], [1, 2, 1]])


def test_col2im_zero(backend):
    g = ConvGeometry(2, 1, 3, 3, 1, 1)
    np.testing.assert_array_equal(col2im(np.zeros((2 * 16, 18)), g, (2, 2, 4, 4)), 0)


def test_col2im_shape_mismatch(backend):
    with pytest.raises(ShapeError):
        col2im(np.zeros((3, 4)), ConvGeometry(1, 1, 2, 2), (1, 1, 3, 3))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(0, 2),
    st.integers(0, 2**32 - 1),
)
def test_im2col_col2im_adjoint(n, c, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    # smallest extent >= k whose padded span is a multiple of the stride
    h = w = next(s for s in range(k, k + 3 * stride) if (s + 2 * pad - k) % stride == 0)
    g = ConvGeometry(c, 1, k, k, stride, pad)
    x = r.standard_normal((n, c, h, w))
    cols = im2col(x, g)
    y = r.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * col2im(y, g, x.shape))
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


def test_conv_geometry_validation():
    with pytest.raises(ShapeError):
        ConvGeometry(1, 1, 3, 3, stride=0)
    assert ConvGeometry(1, 1, 3, 3, 1, 1).output_hw(5, 5) == (5, 5)
