import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import module_grad_err
from mvtk import Tensor, no_grad, ops
from mvtk.cost import profile_module
from mvtk.errors import ConfigError, ShapeError
from mvtk.layers import (
    BatchNorm2d,
    Conv2d,
    ConvLayer,
    FeedForward,
    GroupNorm,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    PatchSpec,
    SeparableAttention,
    TransformerLayer,
    fold,
    unfold,
)


def randomize(module, seed=0, scale=0.5):
    """float64 copy with every parameter drawn from N(0, scale^2)."""
    module.to(np.float64)
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale
    return module


def tokens(rng, *shape):
    return rng.standard_normal(shape)


# ----------------------------------------------------------------- unfold / fold


class TestPatches:
    def test_unit_patch_is_reshape(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        t = unfold(Tensor(x), PatchSpec(1, 1))
        assert t.shape == (2, 1, 20, 3)
        assert np.array_equal(t.data[:, 0], x.reshape(2, 3, 20).transpose(0, 2, 1))

    def test_counting(self):
        t = unfold(Tensor(np.zeros((1, 7, 4, 4))), PatchSpec(2, 2))
        assert t.shape == (1, 4, 4, 7)

    def test_sequence_semantics(self):
        # value encodes (y, x); sequence p gathers the pixel at offset p of every patch
        h = w = 4
        x = np.array([[[[10 * y + xx for xx in range(w)] for y in range(h)]]], dtype=np.float64)
        t = unfold(Tensor(x), PatchSpec(2, 2)).data[0, :, :, 0]
        assert list(t[0]) == [0, 2, 20, 22]
        assert list(t[1]) == [1, 3, 21, 23]
        assert list(t[2]) == [10, 12, 30, 32]
        assert list(t[3]) == [11, 13, 31, 33]

    def test_round_trip_100_shapes(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            ph, pw = rng.integers(1, 4, size=2)
            n, d = rng.integers(1, 4), rng.integers(1, 9)
            h, w = ph * rng.integers(1, 6), pw * rng.integers(1, 6)
            x = rng.standard_normal((n, d, h, w)).astype(rng.choice([np.float32, np.float64]))
            patch = PatchSpec(int(ph), int(pw))
            t = unfold(Tensor(x), patch)
            assert t.shape == (n, ph * pw, (h // ph) * (w // pw), d)
            back = fold(t, patch, h, w).data
            assert back.dtype == x.dtype and np.array_equal(back, x)

    @settings(max_examples=50, deadline=None)
    @given(ph=st.integers(1, 3), pw=st.integers(1, 3), gh=st.integers(1, 4), gw=st.integers(1, 4),
           d=st.integers(1, 5), seed=st.integers(0, 1000))
    def test_unfold_of_fold_is_identity(self, ph, pw, gh, gw, d, seed):
        patch = PatchSpec(ph, pw)
        t = np.random.default_rng(seed).standard_normal((1, ph * pw, gh * gw, d))
        x = fold(Tensor(t), patch, gh * ph, gw * pw)
        assert np.array_equal(unfold(x, patch).data, t)

    def test_non_divisible_names_dims(self):
        with pytest.raises(ShapeError) as exc:
            unfold(Tensor(np.zeros((1, 2, 5, 4))), PatchSpec(2, 2))
        msg = str(exc.value)
        assert "H=5" in msg and "W=4" in msg and "ph=2" in msg and "pw=2" in msg

    def test_fold_token_mismatch(self):
        with pytest.raises(ShapeError):
            fold(Tensor(np.zeros((1, 4, 3, 2))), PatchSpec(2, 2), 4, 4)

    def test_gradient_is_permutation(self, rng):
        from mvtk import backward

        x = Tensor(rng.standard_normal((1, 2, 4, 6)), requires_grad=True)
        w = rng.standard_normal((1, 4, 6, 2))
        backward(ops.sum(ops.mul(unfold(x, PatchSpec(2, 2)), Tensor(w))))
        assert np.array_equal(x.grad, fold(Tensor(w), PatchSpec(2, 2), 4, 6).data)


# ----------------------------------------------------------------- attention


class TestMultiHeadAttention:
    def test_single_token(self, rng):
        mha = randomize(MultiHeadAttention(8, 2))
        x = tokens(rng, 1, 1, 1, 8)
        w = mha.attention_weights(Tensor(x)).data
        assert np.all(w == 1.0)
        v = x @ mha.qkv.weight.data[16:].T + mha.qkv.bias.data[16:]
        want = v @ mha.out.weight.data.T + mha.out.bias.data
        assert np.allclose(mha(Tensor(x)).data, want, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        mha = randomize(MultiHeadAttention(16, 4))
        w = mha.attention_weights(Tensor(tokens(rng, 2, 4, 9, 16))).data
        assert w.shape == (8, 4, 9, 9)
        assert np.max(np.abs(w.sum(-1) - 1)) <= 1e-6

    def test_matches_direct_formula(self, rng):
        d, h = 8, 2
        mha = randomize(MultiHeadAttention(d, h))
        x = tokens(rng, 1, 1, 5, d)[0, 0]
        qkv = x @ mha.qkv.weight.data.T + mha.qkv.bias.data
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        heads = []
        for i in range(h):
            sl = slice(i * d // h, (i + 1) * d // h)
            s = q[:, sl] @ k[:, sl].T / np.sqrt(d // h)
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            heads.append(a @ v[:, sl])
        want = np.concatenate(heads, 1) @ mha.out.weight.data.T + mha.out.bias.data
        assert np.allclose(mha(Tensor(x[None, None])).data[0, 0], want, atol=1e-12)

    def test_gradient(self, rng):
        mha = randomize(MultiHeadAttention(8, 2), seed=1)
        assert module_grad_err(mha, tokens(rng, 1, 1, 4, 8)) < 1e-5

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 4)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            MultiHeadAttention(8, 2)(Tensor(tokens(rng, 1, 1, 4, 6)))

    def test_param_count(self):
        assert MultiHeadAttention(16, 4).param_count() == 16 * 48 + 48 + 16 * 16 + 16


class TestSeparableAttention:
    def test_single_token(self, rng):
        sa = randomize(SeparableAttention(8))
        x = tokens(rng, 1, 1, 1, 8)
        assert sa.context_scores(Tensor(x)).data.item() == 1.0
        W, b = sa.qkv.weight.data, sa.qkv.bias.data
        key = x @ W[1:9].T + b[1:9]
        value = x @ W[9:].T + b[9:]
        want = (np.maximum(value, 0) * key) @ sa.out.weight.data.T + sa.out.bias.data
        assert np.allclose(sa(Tensor(x)).data, want, atol=1e-12)

    def test_matches_direct_formula(self, rng):
        sa = randomize(SeparableAttention(6))
        x = tokens(rng, 1, 1, 7, 6)[0, 0]
        W, b = sa.qkv.weight.data, sa.qkv.bias.data
        logits = x @ W[0] + b[0]
        score = np.exp(logits - logits.max())
        score /= score.sum()
        ctx = score @ (x @ W[1:7].T + b[1:7])
        out = np.maximum(x @ W[7:].T + b[7:], 0) * ctx
        want = out @ sa.out.weight.data.T + sa.out.bias.data
        assert np.allclose(sa(Tensor(x[None, None])).data[0, 0], want, atol=1e-12)

    def test_scores_sum_to_one_over_tokens(self, rng):
        sa = randomize(SeparableAttention(8))
        s = sa.context_scores(Tensor(tokens(rng, 2, 4, 6, 8))).data
        assert np.allclose(s.sum(axis=2), 1.0)

    def test_gradient(self, rng):
        sa = randomize(SeparableAttention(8), seed=2)
        assert module_grad_err(sa, tokens(rng, 1, 1, 6, 8)) < 1e-5

    def test_param_count(self):
        assert SeparableAttention(16).param_count() == 16 * 33 + 33 + 16 * 16 + 16


class TestAttentionCost:
    @pytest.mark.parametrize("seq", [4, 16, 64])
    def test_multihead_quadratic_separable_linear(self, seq):
        d = 16

        def attn_macs(module, s, convention):
            rep = profile_module(module, (1, 4, s, d), attention=convention)
            return sum(r.macs for r in rep.rows if r.kind == "attention")

        mha, sep = MultiHeadAttention(d, 4), SeparableAttention(d)
        assert attn_macs(mha, 2 * seq, "executed") == 4 * attn_macs(mha, seq, "executed")
        assert attn_macs(sep, 2 * seq, "executed") == 2 * attn_macs(sep, seq, "executed")
        assert attn_macs(sep, 2 * seq, "profiler") == 2 * attn_macs(sep, seq, "profiler")

    def test_executed_matches_instrumented(self, rng):
        from mvtk.cost import instrumented_macs

        for module in (MultiHeadAttention(8, 2), SeparableAttention(8), TransformerLayer(8, 16, "multihead", 2),
                       TransformerLayer(8, 16, "separable", norm="group")):
            shape = (1, 4, 6, 8)
            static = profile_module(module, shape, attention="executed").total_macs
            assert instrumented_macs(module, rng.standard_normal(shape).astype(np.float32)) == static


# ----------------------------------------------------------------- feed-forward, linear, transformer


class TestFeedForward:
    def test_zero_weights(self, rng):
        ffn = FeedForward(8, 16)
        for _, p in ffn.named_parameters():
            p.data[...] = 0
        assert np.all(ffn(Tensor(tokens(rng, 1, 2, 3, 8).astype(np.float32))).data == 0)

    def test_param_count(self):
        d, hid = 12, 40
        assert FeedForward(d, hid).param_count() == d * hid + hid + hid * d + d

    def test_gradient(self, rng):
        assert module_grad_err(randomize(FeedForward(8, 16)), tokens(rng, 1, 2, 3, 8)) < 1e-5

    def test_shape_preserving(self, rng):
        assert FeedForward(8, 4)(Tensor(tokens(rng, 2, 4, 5, 8).astype(np.float32))).shape == (2, 4, 5, 8)


class TestTransformerLayer:
    @pytest.mark.parametrize("attention,norm", [("multihead", "layer"), ("separable", "group")])
    def test_gradient(self, rng, attention, norm):
        layer = randomize(TransformerLayer(8, 16, attention, heads=2, norm=norm), seed=3)
        assert module_grad_err(layer, tokens(rng, 1, 2, 3, 8)) < 1e-5

    @pytest.mark.parametrize("attention", ["multihead", "separable"])
    def test_shape_preserving(self, rng, attention):
        layer = TransformerLayer(16, 32, attention)
        assert layer(Tensor(tokens(rng, 2, 4, 9, 16).astype(np.float32))).shape == (2, 4, 9, 16)

    def test_unknown_attention(self):
        with pytest.raises(ConfigError):
            TransformerLayer(8, 16, "sparse")


class TestConvAndNormLayers:
    def test_linear_gradient(self, rng):
        assert module_grad_err(randomize(Linear(5, 3)), rng.standard_normal((2, 5))) < 1e-7

    def test_conv_layer_gradient(self, rng):
        layer = randomize(ConvLayer(3, 4, 3, stride=2))
        assert module_grad_err(layer, rng.standard_normal((2, 3, 6, 6))) < 1e-5

    def test_conv_param_counts(self):
        assert Conv2d(3, 16, 3).param_count() == 432
        assert ConvLayer(3, 16, 3).param_count() == 432 + 32
        assert ConvLayer(3, 16, 3, norm=None, act=None, bias=True).param_count() == 432 + 16

    def test_layernorm_groupnorm_gradient(self, rng):
        assert module_grad_err(randomize(LayerNorm(6)), rng.standard_normal((2, 3, 6))) < 1e-6
        assert module_grad_err(randomize(GroupNorm(1, 6, channel_axis=-1)), rng.standard_normal((1, 2, 3, 6))) < 1e-6

    def test_batchnorm_eval_uses_running_stats(self, rng):
        bn = BatchNorm2d(3).to(np.float64)
        bufs = dict(bn.named_buffers())
        bufs["running_mean"][...] = [1.0, 2.0, 3.0]
        bufs["running_var"][...] = [4.0, 1.0, 0.25]
        bn.eval()
        x = rng.standard_normal((2, 3, 2, 2))
        mean, var = bufs["running_mean"][None, :, None, None], bufs["running_var"][None, :, None, None]
        want = (x - mean) / np.sqrt(var + 1e-5)
        assert np.allclose(bn(Tensor(x)).data, want, atol=1e-12)

    def test_train_eval_differ(self, rng):
        bn = BatchNorm2d(2).to(np.float64)
        x = Tensor(rng.standard_normal((4, 2, 3, 3)) * 3 + 1)
        with no_grad():
            a = bn.train()(x).data
            b = bn.eval()(x).data
        assert not np.allclose(a, b)

    def test_to_and_dtype(self):
        layer = ConvLayer(2, 3, 3)
        assert layer.dtype == np.float32
        layer.to(np.float64)
        assert all(p.dtype == np.float64 for p in layer.parameters())
