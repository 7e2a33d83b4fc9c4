import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnx.errors import ShapeError, StateError
from bnnx.layers import (
    BatchNorm,
    BatchNormState,
    BinaryConv2d,
    BinaryDense,
    Dense,
    Flatten,
    Sign,
    ap2,
    batchnorm_backward,
    batchnorm_forward,
    fold_bn_to_shift,
    maxpool_backward,
    maxpool_forward,
    sign_backward_ste,
    sign_forward,
    softmax_cross_entropy,
)
from bnnx.model import Model
from bnnx.tensors import ConvGeometry, im2col, pack_signs, unpack

from .conftest import pm1
from .gradcheck import numeric_grad, rel_err


# -- sign / STE ------------------------------------------------------------------

def test_sign_forward_examples(rng):
    np.testing.assert_array_equal(sign_forward([0.3, -2.0, 0.0]), [1, -1, 1])
    x = pm1(rng, (4, 5))
    np.testing.assert_array_equal(sign_forward(x), x)
    y = rng.standard_normal((3, 70))
    np.testing.assert_array_equal(sign_forward(y), unpack(pack_signs(y)))


@pytest.mark.parametrize("x,g,expected", [(0.5, 2.0, 2.0), (1.5, 2.0, 0.0), (-1.0, 3.0, 3.0), (1.0, -1.0, -1.0)])
def test_ste_examples(x, g, expected):
    assert sign_backward_ste(np.array([x]), np.array([g]))[0] == expected


def test_ste_shape_mismatch():
    with pytest.raises(ShapeError):
        sign_backward_ste(np.zeros(3), np.zeros(4))


def test_sign_layer_requires_training_forward():
    s = Sign()
    s.forward(np.ones((2, 2)))
    assert not s.has_cache
    with pytest.raises(StateError):
        s.backward(np.ones((2, 2)))
    s.forward(np.ones((2, 2)), train=True)
    assert s.has_cache


# -- binary dense ---------------------------------------------------------------

def test_binary_dense_example():
    x = np.array([[1, -1, 1], [-1, -1, 1]], dtype=float)
    b = np.array([[1, -1], [1, 1], [-1, -1]], dtype=float)
    layer = BinaryDense(3, 2, weight=(0.3 * b.T).astype(np.float32))
    np.testing.assert_array_equal(layer.forward(x), x @ b)
    np.testing.assert_array_equal(layer.forward(x), [[-1, -3], [-3, -1]])


def test_binary_dense_all_positive():
    layer = BinaryDense(5, 3, weight=np.full((3, 5), 0.2, np.float32))
    np.testing.assert_array_equal(layer.forward(np.ones((1, 5))), np.full((1, 3), 5))


def test_binary_dense_dual_path(rng):
    layer = BinaryDense(130, 17, rng=rng)
    ref = BinaryDense(130, 17, weight=layer.weight.copy())
    ref.path = "float"
    for _ in range(100):
        x = pm1(rng, (int(rng.integers(1, 9)), 130))
        np.testing.assert_array_equal(layer.forward(x), ref.forward(x))


def test_binary_dense_backward_single_sample(rng):
    layer = BinaryDense(6, 2, rng=rng)
    layer.forward(pm1(rng, (1, 6)), train=True)
    grad_in = layer.backward(np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(grad_in[0], np.where(layer.weight[0] >= 0, 1.0, -1.0))


def test_binary_dense_zero_grad(rng):
    layer = BinaryDense(4, 3, rng=rng)
    layer.forward(rng.standard_normal((2, 4)), train=True)
    gi = layer.backward(np.zeros((2, 3)))
    assert not gi.any() and not layer.grads["weight"].any()


def test_binary_dense_backward_without_forward():
    with pytest.raises(StateError):
        BinaryDense(3, 2).backward(np.zeros((1, 2)))


def test_binary_dense_gradients_match_surrogate(rng):
    layer = BinaryDense(7, 4, rng=rng)
    wb = np.where(layer.weight >= 0, 1.0, -1.0)
    x = rng.standard_normal((3, 7))
    r = rng.standard_normal((3, 4))
    layer.forward(x, train=True)
    gi = layer.backward(r)
    # surrogate network: binarized weights frozen, treated as continuous
    assert rel_err(gi, numeric_grad(lambda v: np.sum((v @ wb.T) * r), x)) < 1e-3
    assert rel_err(layer.grads["weight"], numeric_grad(lambda w: np.sum((x @ w.T) * r), wb)) < 1e-3


def test_binary_dense_latent_gradient_on_binary_input(rng):
    layer = BinaryDense(70, 3, rng=rng)
    wb = np.where(layer.weight >= 0, 1.0, -1.0)
    x = pm1(rng, (4, 70))
    r = rng.standard_normal((4, 3))
    layer.forward(x, train=True)
    layer.backward(r)
    assert rel_err(layer.grads["weight"], numeric_grad(lambda w: np.sum((x @ w.T) * r), wb)) < 1e-3


# -- binary conv ----------------------------------------------------------------

def naive_binary_conv(x, kern, stride, pad, pad_value):
    n, c, h, w = x.shape
    cout, _, kh, kw = kern.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    kb = np.where(kern >= 0, 1.0, -1.0)
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    out[b, o, i, j] = np.sum(xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw] * kb[o])
    return out


def test_binary_conv_patch_sums(backend, rng):
    x = pm1(rng, (1, 1, 3, 3))
    layer = BinaryConv2d(ConvGeometry(1, 1, 2, 2), weight=np.full((1, 1, 2, 2), 0.5, np.float32))
    out = layer.forward(x)
    assert set(np.unique(out)) <= {-4, -2, 0, 2, 4}
    np.testing.assert_array_equal(out, naive_binary_conv(x, layer.weight, 1, 0, 0.0))


def test_binary_conv_delta_identity(rng):
    x = pm1(rng, (2, 1, 4, 4))
    layer = BinaryConv2d(ConvGeometry(1, 1, 1, 1), weight=np.full((1, 1, 1, 1), 0.1, np.float32))
    np.testing.assert_array_equal(layer.forward(x), x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_binary_conv_matches_naive(backend, rng, stride, pad):
    g = ConvGeometry(3, 4, 3, 3, stride, pad)
    layer = BinaryConv2d(g, rng=rng)
    x_bin = pm1(rng, (2, 3, 7, 7))
    # +/-1 input: padded zeros binarize to +1
    np.testing.assert_array_equal(layer.forward(x_bin), naive_binary_conv(x_bin, layer.weight, stride, pad, 1.0))
    ref = BinaryConv2d(g, weight=layer.weight.copy())
    ref.path = "float"
    np.testing.assert_array_equal(layer.forward(x_bin), ref.forward(x_bin))
    # real input (first layer): float path with literal zero padding
    x_real = rng.standard_normal((2, 3, 7, 7))
    np.testing.assert_allclose(layer.forward(x_real), naive_binary_conv(x_real, layer.weight, stride, pad, 0.0),
                               atol=1e-12)


def test_binary_conv_gradients(rng):
    g = ConvGeometry(2, 3, 3, 3, 1, 1)
    layer = BinaryConv2d(g, rng=rng)
    kb = np.where(layer.weight >= 0, 1.0, -1.0)
    x = rng.standard_normal((2, 2, 4, 4))
    r = rng.standard_normal((2, 3, 4, 4))

    def conv(v, k):
        return naive_binary_conv(v, k, 1, 1, 0.0)

    layer.forward(x, train=True)
    gi = layer.backward(r)
    assert rel_err(gi, numeric_grad(lambda v: np.sum(conv(v, kb) * r), x)) < 1e-3
    gk = numeric_grad(lambda k: np.sum(naive_conv_float(x, k, 1, 1) * r), kb)
    assert rel_err(layer.grads["weight"], gk) < 1e-3


def naive_conv_float(x, k, stride, pad):
    g = ConvGeometry(x.shape[1], k.shape[0], k.shape[2], k.shape[3], stride, pad)
    ho, wo = g.output_hw(x.shape[2], x.shape[3])
    return (im2col(x, g) @ k.reshape(k.shape[0], -1).T).reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2)


# -- batch norm -----------------------------------------------------------------

def test_batchnorm_two_values():
    s = BatchNormState.fresh(1)
    out, _ = batchnorm_forward(np.array([[1.0], [3.0]]), s, "train")
    np.testing.assert_allclose(out[:, 0], [-1, 1], atol=1e-5)
    np.testing.assert_allclose(out[:, 0], np.array([-1, 1]) / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_identity_in_infer_mode(rng):
    x = rng.standard_normal((4, 3))
    out, cache = batchnorm_forward(x, BatchNormState.fresh(3), "infer")
    assert cache is None
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(out, x, atol=1e-5 * np.abs(x).max())


def test_batchnorm_moments(rng):
    x = rng.standard_normal((16, 5, 3, 3)) * 4 + 2
    out, _ = batchnorm_forward(x, BatchNormState.fresh(5), "train")
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.all(np.abs(mean) < 1e-5) and np.all(np.abs(var - 1) < 1e-4)


def test_batchnorm_running_update():
    s = BatchNormState.fresh(1)
    batchnorm_forward(np.array([[1.0], [3.0]]), s, "train")
    assert s.running_mean[0] == pytest.approx(0.1 * 2)
    assert s.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)  # unbiased batch variance of [1, 3]


def test_batchnorm_train_needs_two_samples():
    with pytest.raises(StateError):
        batchnorm_forward(np.ones((1, 2)), BatchNormState.fresh(2), "train")


def test_batchnorm_backward_constant_grad():
    s = BatchNormState.fresh(2)
    rng = np.random.default_rng(0)
    _, cache = batchnorm_forward(rng.standard_normal((5, 2)), s, "train")
    gi, gg, gb = batchnorm_backward(s, cache, np.ones((5, 2)))
    np.testing.assert_allclose(gb, [5, 5])
    np.testing.assert_allclose(gi, 0, atol=1e-12)


def test_batchnorm_backward_missing_cache():
    with pytest.raises(StateError):
        batchnorm_backward(BatchNormState.fresh(2), None, np.ones((2, 2)))


@pytest.mark.parametrize("shape", [(4, 3), (3, 2, 3, 3)])
def test_batchnorm_gradients(rng, shape):
    c = shape[1]
    gamma = rng.uniform(0.5, 2, c)
    beta = rng.standard_normal(c)
    x = rng.standard_normal(shape)
    r = rng.standard_normal(shape)

    def loss(v=None, g=None, b=None):
        st_ = BatchNormState(g if g is not None else gamma.copy(), b if b is not None else beta.copy(),
                             np.zeros(c), np.ones(c))
        return np.sum(batchnorm_forward(x if v is None else v, st_, "train")[0] * r)

    s = BatchNormState(gamma.copy(), beta.copy(), np.zeros(c), np.ones(c))
    _, cache = batchnorm_forward(x, s, "train")
    gi, gg, gb = batchnorm_backward(s, cache, r)
    assert rel_err(gi, numeric_grad(lambda v: loss(v=v), x)) < 1e-3
    assert rel_err(gg, numeric_grad(lambda g: loss(g=g), gamma)) < 1e-3
    assert rel_err(gb, numeric_grad(lambda b: loss(b=b), beta)) < 1e-3


# -- ap2 / shift folding -----------------------------------------------------------

@pytest.mark.parametrize("x,expected", [(1.0, 1.0), (0.3, 0.25), (-6.0, -8.0), (0.0, 0.0), (3.0, 4.0)])
def test_ap2_examples(x, expected):
    assert ap2(x) == expected


@settings(max_examples=300)
@given(st.floats(min_value=1e-30, max_value=1e30) | st.floats(min_value=-1e30, max_value=-1e-30))
def test_ap2_invariants(x):
    q = ap2(x)
    m, _ = np.frexp(abs(q))
    assert m == 0.5  # exact power of two
    assert 2 ** -0.5 - 1e-12 <= q / x <= 2 ** 0.5 + 1e-12


def _bn_with_scale(scale):
    var = np.array([1.0 - 1e-5], np.float32)
    return BatchNormState(np.array([scale], np.float32), np.zeros(1, np.float32), np.zeros(1, np.float32), var)


def test_fold_exponents():
    assert fold_bn_to_shift(_bn_with_scale(1.0)).exponent[0] == 0
    assert fold_bn_to_shift(_bn_with_scale(0.3)).exponent[0] == -2


def test_fold_offset_and_apply():
    s = BatchNormState(np.array([0.3, -6.0]), np.array([0.5, 1.0]), np.array([2.0, -1.0]), np.array([1.0, 4.0]))
    f = fold_bn_to_shift(s)
    scale = s.gamma / np.sqrt(s.running_var + s.eps)
    np.testing.assert_allclose(f.offset, s.beta - ap2(scale) * s.running_mean, rtol=1e-6)
    x = np.array([[1.0, 2.0], [-3.0, 0.5]])
    np.testing.assert_allclose(f.apply(x), x * ap2(scale) + f.offset, rtol=1e-6)


def test_fold_rejects_nonpositive_variance():
    s = BatchNormState.fresh(2)
    s.running_var[0] = 0
    with pytest.raises(StateError):
        fold_bn_to_shift(s)


def test_shift_mode_mostly_agrees_with_exact_bn(rng):
    # BN followed by sign: random positive scales, shift mode must keep >= 99% of signs
    c = 32
    s = BatchNormState(rng.uniform(0.2, 3, c).astype(np.float32), rng.normal(0, 0.1, c).astype(np.float32),
                       rng.normal(0, 1, c).astype(np.float32), rng.uniform(0.5, 4, c).astype(np.float32))
    layer = BatchNorm(state=s)
    x = rng.normal(0, 2, (100, c))
    exact = np.sign(layer.forward(x))
    layer.fold()
    layer.use_shift = True
    shifted = np.sign(layer.forward(x))
    assert np.mean(exact == shifted) >= 0.99


# -- pooling -----------------------------------------------------------------------

def test_maxpool_example(backend):
    out, _ = maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert out.item() == 4


def test_maxpool_tie_goes_to_first(backend):
    x = np.ones((1, 1, 4, 4))
    out, arg = maxpool_forward(x, 2, 2)
    g = maxpool_backward(np.ones_like(out), arg, x.shape, 2, 2)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(g[0, 0], expected)


def naive_maxpool(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = x[:, :, i * s : i * s + k, j * s : j * s + k].max(axis=(2, 3))
    return out


@pytest.mark.parametrize("k,s", [(2, 2), (3, 2), (2, 1)])
def test_maxpool_matches_naive_and_gradients(backend, rng, k, s):
    x = rng.standard_normal((2, 3, 7 if k == 3 else 6, 7 if k == 3 else 6))
    out, arg = maxpool_forward(x, k, s)
    np.testing.assert_array_equal(out, naive_maxpool(x, k, s))
    r = rng.standard_normal(out.shape)
    g = maxpool_backward(r, arg, x.shape, k, s)
    assert rel_err(g, numeric_grad(lambda v: np.sum(naive_maxpool(v, k, s) * r), x)) < 1e-3


def test_maxpool_bad_geometry():
    with pytest.raises(ShapeError):
        maxpool_forward(np.zeros((1, 1, 5, 5)), 2, 2)


# -- dense / flatten ------------------------------------------------------------------

def test_dense_gradients(rng):
    layer = Dense(5, 3, rng=rng)
    layer.weight = layer.weight.astype(np.float64)
    x = rng.standard_normal((4, 5))
    r = rng.standard_normal((4, 3))
    layer.forward(x, train=True)
    gi = layer.backward(r)
    w, b = layer.weight.copy(), layer.bias.copy()
    assert rel_err(gi, numeric_grad(lambda v: np.sum((v @ w.T + b) * r), x)) < 1e-3
    assert rel_err(layer.grads["weight"], numeric_grad(lambda m: np.sum((x @ m.T + b) * r), w)) < 1e-3
    assert rel_err(layer.grads["bias"], numeric_grad(lambda c: np.sum((x @ w.T + c) * r), b)) < 1e-3


def test_flatten_roundtrip(rng):
    f = Flatten()
    x = rng.standard_normal((2, 3, 4, 5))
    assert f.forward(x, train=True).shape == (2, 60)
    assert f.backward(np.ones((2, 60))).shape == x.shape


# -- softmax cross-entropy ------------------------------------------------------------

def test_softmax_uniform():
    loss, grad = softmax_cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(grad, [[-0.5, 0.5]])


def test_softmax_stable():
    loss, grad = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert np.isfinite(loss) and loss == pytest.approx(0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_softmax_label_range():
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.zeros((1, 2)), np.array([2]))


def test_softmax_gradient(rng):
    logits = rng.standard_normal((4, 6))
    labels = rng.integers(0, 6, 4)
    _, grad = softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda z: softmax_cross_entropy(z, labels)[0], logits)
    assert rel_err(grad, num) < 1e-4


@settings(max_examples=50)
@given(st.floats(-50, 50))
def test_softmax_shift_invariance(c):
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((3, 5))
    labels = np.array([0, 2, 4])
    a, _ = softmax_cross_entropy(logits, labels)
    b, _ = softmax_cross_entropy(logits + c, labels)
    assert abs(a - b) < 1e-6


# -- whole-model sanity -------------------------------------------------------------

def test_model_backward_runs_through_blocks(rng):
    m = Model([BinaryDense(8, 6, rng=rng), BatchNorm(6), Sign(), Dense(6, 3, rng=rng)])
    out = m.forward(rng.standard_normal((4, 8)), train=True)
    _, g = softmax_cross_entropy(out, np.array([0, 1, 2, 0]))
    m.backward(g)
    assert all(name in layer.grads for _, name, _, layer in m.parameters())
