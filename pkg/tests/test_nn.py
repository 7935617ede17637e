import numpy as np
import pytest

from conftest import check_grads, leaf
from transop.errors import ConfigError, InputTooSmallError
from transop.nn import ConvStem, LayerNorm, Linear, MLPBlock, MultiHeadSelfAttention, PatchEmbed, dropout
from transop.tensor import Tensor


def softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reference_mhsa(x, wq, wk, wv, wo, heads, shift=None):
    """Loop-over-heads numpy attention; ``shift=(query, c)`` adds c to that query's logits."""
    b, t, k = x.shape
    d = k // heads
    out = np.zeros((b, t, k))
    for bi in range(b):
        cat = []
        for h in range(heads):
            cols = slice(h * d, (h + 1) * d)
            q, kk, v = x[bi] @ wq[:, cols], x[bi] @ wk[:, cols], x[bi] @ wv[:, cols]
            s = q @ kk.T / np.sqrt(d)
            if shift is not None:
                s[shift[0]] += shift[1]
            cat.append(softmax_rows(s) @ v)
        out[bi] = np.concatenate(cat, axis=1) @ wo
    return out


class TestLinear:
    def test_identity(self, rng):
        lin = Linear(4, 4, rng)
        lin.W.data = np.eye(4)
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(lin(Tensor(x)).data, x)

    def test_zero_input_gives_bias(self, rng):
        lin = Linear(3, 5, rng)
        lin.b.data = rng.standard_normal(5)
        np.testing.assert_array_equal(lin(Tensor(np.zeros((2, 3)))).data, np.tile(lin.b.data, (2, 1)))

    def test_matches_dot_product_loop(self, rng):
        lin = Linear(6, 3, rng, std=1.0)
        lin.b.data = rng.standard_normal(3)
        x = rng.standard_normal((4, 6))
        expected = np.array(
            [[sum(x[i, k] * lin.W.data[k, j] for k in range(6)) + lin.b.data[j] for j in range(3)] for i in range(4)]
        )
        np.testing.assert_allclose(lin(Tensor(x)).data, expected, atol=1e-12, rtol=0)


class TestLayerNorm:
    def test_normalises(self):
        y = LayerNorm(3)(Tensor([1.0, 2.0, 3.0])).data
        assert abs(y.mean()) < 1e-12
        assert abs(y.std() - 1.0) < 1e-6

    def test_constant_vector(self):
        np.testing.assert_array_equal(LayerNorm(4)(Tensor(np.full(4, 7.0))).data, 0.0)

    def test_gradient(self, rng):
        ln = LayerNorm(5)
        ln.gamma.data = rng.normal(1, 0.3, 5)
        ln.beta.data = rng.standard_normal(5)
        x = leaf(rng, 3, 5)
        w = Tensor(rng.standard_normal((3, 5)))
        assert check_grads(lambda: (ln(x) * w).sum(), [x, ln.gamma, ln.beta]) < 1e-6


class TestMHSA:
    def test_single_token_attention_is_one(self, rng):
        attn = MultiHeadSelfAttention(4, 2, rng)
        _, a = attn.attend(Tensor(rng.standard_normal((3, 1, 4))))
        np.testing.assert_array_equal(a.data, 1.0)

    def test_rows_sum_to_one(self, rng):
        attn = MultiHeadSelfAttention(8, 4, rng, std=1.0)
        _, a = attn.attend(Tensor(rng.standard_normal((2, 5, 8))))
        np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-10)

    def test_hand_computed_two_tokens(self, rng):
        attn = MultiHeadSelfAttention(2, 1, rng)
        attn.Wq.data = np.array([[1.0, 0.0], [0.0, 1.0]])
        attn.Wk.data = np.array([[1.0, 0.0], [0.0, 1.0]])
        attn.Wv.data = np.array([[1.0, 2.0], [3.0, 4.0]])
        attn.Wo.data = np.eye(2)
        x = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        # Q = K = x, so logits are I / sqrt(2); V = [[1, 2], [3, 4]].
        p = np.exp(1 / np.sqrt(2)) / (np.exp(1 / np.sqrt(2)) + 1.0)
        a = np.array([[p, 1 - p], [1 - p, p]])
        expected = a @ np.array([[1.0, 2.0], [3.0, 4.0]])
        out, att = attn.attend(Tensor(x))
        np.testing.assert_allclose(att.data[0, 0], a, atol=1e-12)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)

    def test_matches_reference_and_shift_invariance(self, rng):
        attn = MultiHeadSelfAttention(6, 3, rng, std=0.5)
        x = rng.standard_normal((2, 4, 6))
        ws = [attn.Wq.data, attn.Wk.data, attn.Wv.data, attn.Wo.data]
        out = attn(Tensor(x)).data
        np.testing.assert_allclose(out, reference_mhsa(x, *ws, 3), atol=1e-12)
        np.testing.assert_allclose(out, reference_mhsa(x, *ws, 3, shift=(2, 17.5)), atol=1e-10)

    def test_indivisible(self, rng):
        with pytest.raises(ConfigError):
            MultiHeadSelfAttention(6, 4, rng)

    def test_gradient(self, rng):
        attn = MultiHeadSelfAttention(4, 2, rng, std=0.7)
        x = leaf(rng, 2, 3, 4)
        w = Tensor(rng.standard_normal((2, 3, 4)))
        assert check_grads(lambda: (attn(x) * w).sum(), [x, *attn.parameters()]) < 1e-6


class TestMLPBlock:
    def test_zero_weights(self, rng):
        mlp = MLPBlock(4, 8, rng)
        for p in mlp.parameters():
            p.data = np.zeros_like(p.data)
        np.testing.assert_array_equal(mlp(Tensor(rng.standard_normal((2, 3, 4)))).data, 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_shape(self, seed):
        rng = np.random.default_rng(seed)
        b, t, k, h = (int(n) for n in rng.integers(1, 9, size=4))
        assert MLPBlock(k, h, rng)(Tensor(np.ones((b, t, k)))).shape == (b, t, k)

    def test_gradient(self, rng):
        mlp = MLPBlock(3, 5, rng, std=0.8)
        x = leaf(rng, 2, 2, 3)
        w = Tensor(rng.standard_normal((2, 2, 3)))
        assert check_grads(lambda: (mlp(x) * w).sum(), [x, *mlp.parameters()]) < 1e-6


class TestDropout:
    def test_infer_is_identity(self, rng):
        x = Tensor(rng.standard_normal((4, 4)))
        assert dropout(x, 0.5, train=False) is x

    def test_zero_rate_is_identity(self, rng):
        x = Tensor(rng.standard_normal(10))
        np.testing.assert_array_equal(dropout(x, 0.0, True, rng).data, x.data)

    def test_monte_carlo(self):
        x = Tensor(np.ones(100_000))
        y = dropout(x, 0.5, True, np.random.default_rng(0)).data
        assert abs(np.mean(y != 0) - 0.5) < 0.01
        assert abs(y.mean() - 1.0) < 0.01
        assert set(np.unique(y)) == {0.0, 2.0}

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, p):
        with pytest.raises(ConfigError):
            dropout(Tensor(np.ones(3)), p, True, np.random.default_rng(0))

    def test_reproducible(self):
        x = Tensor(np.ones(50))
        a = dropout(x, 0.3, True, np.random.default_rng(9)).data
        b = dropout(x, 0.3, True, np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)


def unfold_oracle(vol, p):
    d, w, h = (n // p for n in vol.shape)
    rows = []
    for i in range(d):
        for j in range(w):
            for k in range(h):
                rows.append(vol[i * p : (i + 1) * p, j * p : (j + 1) * p, k * p : (k + 1) * p].reshape(-1))
    return np.array(rows)


class TestPatchEmbed:
    def test_full_crop_token_count(self, rng):
        pe = PatchEmbed(16, 4, rng)
        assert pe.num_tokens((32, 192, 128)) == 192
        out = pe(Tensor(rng.standard_normal((1, 32, 192, 128, 1))))
        assert out.shape == (1, 192, 4)

    def test_single_patch(self, rng):
        pe = PatchEmbed(5, 3, rng)
        assert pe(Tensor(rng.standard_normal((2, 5, 5, 5, 1)))).shape == (2, 1, 3)

    def test_matches_unfold_matmul_oracle(self, rng):
        pe = PatchEmbed(3, 4, rng, std=1.0)
        pe.bias.data = rng.standard_normal(4)
        vol = rng.standard_normal((7, 9, 6))  # 7 is not a multiple of 3: remainder dropped
        expected = unfold_oracle(vol, 3) @ pe.projection.data + pe.bias.data
        out = pe(Tensor(vol[None, ..., None])).data[0]
        np.testing.assert_allclose(out, expected, atol=1e-12, rtol=0)

    def test_projection_permutation(self, rng):
        pe = PatchEmbed(2, 5, rng)
        x = Tensor(rng.standard_normal((1, 4, 4, 4, 1)))
        before = pe(x).data
        perm = rng.permutation(5)
        pe.projection.data = pe.projection.data[:, perm]
        np.testing.assert_array_equal(pe(x).data, before[..., perm])

    def test_too_small(self, rng):
        with pytest.raises(InputTooSmallError):
            PatchEmbed(4, 3, rng)(Tensor(np.ones((1, 3, 8, 8, 1))))

    def test_gradient(self, rng):
        pe = PatchEmbed(2, 3, rng, std=0.5)
        x = leaf(rng, 1, 4, 4, 2, 1)
        w = Tensor(rng.standard_normal((1, 4, 3)))
        assert check_grads(lambda: (pe(x) * w).sum(), [x, *pe.parameters()]) < 1e-6


def conv_oracle(vol, kernel, bias):
    """Loop convolution, stride 2, zero padding 1; kernel is [3, 3, 3, c_out] (single input channel)."""
    padded = np.pad(vol, 1)
    out_dims = [-(-n // 2) for n in vol.shape]
    out = np.zeros((*out_dims, kernel.shape[-1]))
    for i, j, k in np.ndindex(*out_dims):
        patch = padded[2 * i : 2 * i + 3, 2 * j : 2 * j + 3, 2 * k : 2 * k + 3]
        out[i, j, k] = np.einsum("abc,abco->o", patch, kernel) + bias
    return out


class TestConvStem:
    def test_full_crop_output(self, rng):
        stem = ConvStem([2, 2, 2], rng)
        assert stem.output_shape((32, 192, 128)) == (4, 24, 16)
        out = stem(Tensor(rng.standard_normal((1, 32, 192, 128, 1))))
        assert out.shape == (1, 4, 24, 16, 2)

    def test_zero_weights(self, rng):
        stem = ConvStem([3, 4, 5], rng)
        for conv in stem.kernels:
            conv.W.data[:] = 0.0
        np.testing.assert_array_equal(stem(Tensor(rng.standard_normal((1, 8, 8, 8, 1)))).data, 0.0)

    def test_hand_set_kernel(self, rng):
        stem = ConvStem([2], rng)
        kernel = np.arange(54, dtype=float).reshape(3, 3, 3, 2) / 10.0
        stem.kernels[0].W.data = kernel.reshape(27, 2)
        stem.kernels[0].b.data = np.array([0.5, -1.0])
        vol = np.arange(27, dtype=float).reshape(3, 3, 3)
        out = stem.conv(0, Tensor(vol[None, ..., None])).data[0]
        assert out.shape == (2, 2, 2, 2)
        np.testing.assert_allclose(out, conv_oracle(vol, kernel, stem.kernels[0].b.data), atol=1e-12)
        # Output voxel (0,0,0) sees input [0:2, 0:2, 0:2] at kernel offsets 1..2.
        manual = sum(vol[a, b, c] * kernel[a + 1, b + 1, c + 1, 0] for a in range(2) for b in range(2) for c in range(2))
        assert out[0, 0, 0, 0] == pytest.approx(manual + 0.5, abs=1e-12)

    def test_too_small(self, rng):
        with pytest.raises(InputTooSmallError):
            ConvStem([2, 2, 2], rng)(Tensor(np.ones((1, 4, 16, 16, 1))))

    def test_gradient(self, rng):
        stem = ConvStem([2, 3], rng, std=0.4)
        x = leaf(rng, 1, 4, 4, 5, 1)
        w = Tensor(rng.standard_normal((1, 1, 1, 2, 3)))
        assert check_grads(lambda: (stem(x) * w).sum(), [x, *stem.parameters()]) < 1e-6
