import math

import numpy as np
import pytest
import torch

from craniopy.attention import (
    CrossAttention,
    Direction,
    FeedForward,
    LayerNorms,
    attention_weights,
    enhance,
    global_embed,
    multi_head_cross_attention,
)
from craniopy.errors import ShapeError


def t(array):
    return torch.as_tensor(np.asarray(array), dtype=torch.float64)


def dense_attention(xq, xkv, wq, wk, wv, wo, heads):
    """Per-head loop with explicit softmax."""
    d = xq.shape[1]
    dk = d // heads
    Q, K, V = xq @ wq, xkv @ wk, xkv @ wv
    outputs = []
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        logits = Q[:, cols] @ K[:, cols].T / math.sqrt(dk)
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        outputs.append(weights @ V[:, cols])
    return np.concatenate(outputs, axis=1) @ wo


def random_modules(d, heads, rng, d_ff=None):
    attn, ffn, ln = CrossAttention(d, heads), FeedForward(d, d_ff or 4 * d), LayerNorms(d)
    with torch.no_grad():
        for module in (attn, ffn, ln):
            module.double()
            for param in module.parameters():
                param.copy_(t(rng.standard_normal(tuple(param.shape)) * 0.3))
    return attn, ffn, ln


class TestMultiHeadCrossAttention:
    def test_single_key(self, rng):
        d = 4
        ws = [rng.standard_normal((d, d)) for _ in range(4)]
        xq, xkv = rng.standard_normal((3, d)), rng.standard_normal((1, d))
        out = multi_head_cross_attention(t(xq), t(xkv), *map(t, ws), heads=2)
        expected = np.repeat(xkv @ ws[2] @ ws[3], 3, axis=0)
        np.testing.assert_allclose(out.numpy(), expected, atol=1e-12)

    def test_identical_keys_give_uniform_rows(self, rng):
        q = t(rng.standard_normal((2, 3, 4)))
        k = t(np.repeat(rng.standard_normal((1, 1, 4)), 5, axis=1)).expand(2, 5, 4)
        torch.testing.assert_close(attention_weights(q, k), torch.full((2, 3, 5), 0.2, dtype=torch.float64))

    def test_matches_dense_reimplementation(self, rng):
        ws = [rng.standard_normal((8, 8)) for _ in range(4)]
        xq, xkv = rng.standard_normal((3, 8)), rng.standard_normal((4, 8))
        out = multi_head_cross_attention(t(xq), t(xkv), *map(t, ws), heads=2)
        np.testing.assert_allclose(out.numpy(), dense_attention(xq, xkv, *ws, heads=2), atol=1e-12)

    def test_random_shapes(self, rng):
        for _ in range(100):
            heads = int(rng.integers(1, 4))
            d = heads * int(rng.integers(1, 4))
            tq, tkv = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            ws = [t(rng.standard_normal((d, d))) for _ in range(4)]
            xq, xkv = t(rng.standard_normal((tq, d))), t(rng.standard_normal((tkv, d)))
            out, weights = multi_head_cross_attention(xq, xkv, *ws, heads=heads, return_weights=True)
            assert torch.all(weights >= 0) and torch.all(weights <= 1)
            assert torch.max(torch.abs(weights.sum(dim=-1) - 1)) <= 1e-6

            # permuting keys and values together leaves the output unchanged
            perm_kv = torch.as_tensor(rng.permutation(tkv))
            torch.testing.assert_close(multi_head_cross_attention(xq, xkv[perm_kv], *ws, heads=heads), out)
            perm_q = torch.as_tensor(rng.permutation(tq))
            torch.testing.assert_close(multi_head_cross_attention(xq[perm_q], xkv, *ws, heads=heads), out[perm_q])

    def test_softmax_shift_invariance(self, rng):
        logits = t(rng.standard_normal((3, 5)))
        shifted = logits + t(rng.standard_normal((3, 1)))
        torch.testing.assert_close(torch.softmax(shifted, dim=-1), torch.softmax(logits, dim=-1))

    def test_heads_must_divide(self):
        w = torch.zeros(6, 6)
        with pytest.raises(ShapeError, match="divisible"):
            multi_head_cross_attention(torch.zeros(2, 6), torch.zeros(3, 6), w, w, w, w, heads=4)

    def test_dim_mismatch(self):
        w = torch.zeros(4, 4)
        with pytest.raises(ShapeError):
            multi_head_cross_attention(torch.zeros(2, 4), torch.zeros(3, 6), w, w, w, w, heads=2)

    def test_banks(self):
        attn = CrossAttention(4, 2)
        assert attn.bank(Direction.SKULL_QUERY)[0] is attn.WQ
        assert attn.bank(Direction.FACE_QUERY)[0] is attn.WQp


class TestEnhance:
    def test_pure_residual_path(self, rng):
        attn, ffn, ln = random_modules(4, 2, rng)
        with torch.no_grad():
            for param in list(attn.parameters()) + list(ffn.parameters()):
                param.zero_()
        tokens_s, tokens_f = t(rng.standard_normal((3, 4))), t(rng.standard_normal((5, 4)))
        out = enhance(tokens_s, tokens_f, attn, ffn, ln, use_layer_norm=False)
        torch.testing.assert_close(out.skull, tokens_s)
        torch.testing.assert_close(out.face, tokens_f)

    def test_swapping_inputs_and_banks_swaps_outputs(self, rng):
        attn, ffn, ln = random_modules(4, 2, rng)
        swapped_attn, swapped_ffn, swapped_ln = CrossAttention(4, 2).double(), FeedForward(4, 16).double(), LayerNorms(4).double()
        pairs = [(n, n + "p") for n in ("WQ", "WK", "WV", "WO")]
        with torch.no_grad():
            for plain, primed in pairs:
                getattr(swapped_attn, plain).copy_(getattr(attn, primed))
                getattr(swapped_attn, primed).copy_(getattr(attn, plain))
            for module, target in ((ffn, swapped_ffn), (ln, swapped_ln)):
                for name, param in module.named_parameters():
                    other = name[:-1] + ("f" if name.endswith("s") else "s")
                    getattr(target, other).copy_(param)
        tokens_s, tokens_f = t(rng.standard_normal((3, 4))), t(rng.standard_normal((5, 4)))
        out = enhance(tokens_s, tokens_f, attn, ffn, ln)
        swapped = enhance(tokens_f, tokens_s, swapped_attn, swapped_ffn, swapped_ln)
        torch.testing.assert_close(swapped.skull, out.face)
        torch.testing.assert_close(swapped.face, out.skull)

    def test_post_norm_block(self, rng):
        attn, ffn, ln = random_modules(4, 2, rng)
        tokens_s, tokens_f = t(rng.standard_normal((3, 4))), t(rng.standard_normal((2, 4)))
        out = enhance(tokens_s, tokens_f, attn, ffn, ln)

        def layer_norm(x, g, b):
            mean = x.mean(dim=-1, keepdim=True)
            var = x.var(dim=-1, unbiased=False, keepdim=True)
            return (x - mean) / torch.sqrt(var + 1e-5) * g + b

        Y = layer_norm(tokens_s + attn(tokens_s, tokens_f, Direction.SKULL_QUERY), ln.g1s, ln.b1s)
        hidden = torch.relu(Y @ ffn.W1s + ffn.b1s) @ ffn.W2s + ffn.b2s
        torch.testing.assert_close(out.skull, layer_norm(Y + hidden, ln.g2s, ln.b2s))

    def test_shapes_preserved(self, rng):
        attn, ffn, ln = random_modules(6, 3, rng)
        out = enhance(t(rng.standard_normal((2, 4, 6))), t(rng.standard_normal((2, 7, 6))), attn, ffn, ln)
        assert tuple(out.skull.shape) == (2, 4, 6) and tuple(out.face.shape) == (2, 7, 6)

    def test_gradients_match_finite_differences(self, rng):
        attn, ffn, ln = random_modules(4, 2, rng, d_ff=6)
        tokens_s = t(rng.standard_normal((3, 4))).requires_grad_()
        tokens_f = t(rng.standard_normal((2, 4))).requires_grad_()

        def scalar(a, b):
            out = enhance(a, b, attn, ffn, ln)
            return (out.skull.sin().sum() + (out.face ** 2).sum())

        assert torch.autograd.gradcheck(scalar, (tokens_s, tokens_f), eps=1e-6, atol=1e-6, rtol=1e-4)


class TestGlobalEmbed:
    def test_three_four_five(self):
        torch.testing.assert_close(global_embed(t([[3.0, 4.0]])).g, t([0.6, 0.8]))

    def test_two_tokens(self):
        half = math.sqrt(2) / 2
        torch.testing.assert_close(global_embed(t([[1.0, 0.0], [0.0, 1.0]])).g, t([half, half]))

    def test_scale_invariance(self, rng):
        tokens = t(rng.standard_normal((4, 5)))
        torch.testing.assert_close(global_embed(3.7 * tokens).g, global_embed(tokens).g)

    def test_unit_norm(self, rng):
        g = global_embed(t(rng.standard_normal((6, 4, 5)))).g
        torch.testing.assert_close(torch.linalg.vector_norm(g, dim=-1), torch.ones(6, dtype=torch.float64))

    def test_zero_mean_is_flagged(self):
        result = global_embed(t([[1.0, -1.0], [-1.0, 1.0]]))
        assert bool(result.degenerate)
        assert torch.count_nonzero(result.g) == 0
