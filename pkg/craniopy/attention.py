"""Bidirectional multi-head cross-attention between the two modalities.

The unprimed bank (WQ, WK, WV, WO) serves the skull-query direction: skull
tokens query face keys and values. The primed bank (WQp, WKp, WVp, WOp)
serves the face-query direction.
"""
import logging
import math
from enum import Enum
from typing import NamedTuple, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


class Direction(Enum):
    SKULL_QUERY = "s"
    FACE_QUERY = "f"


class EnhancedTokens(NamedTuple):
    skull: torch.Tensor  # F_s^enh
    face: torch.Tensor  # F_f^enh


class GlobalEmbedding(NamedTuple):
    g: torch.Tensor
    degenerate: torch.Tensor  # True where the pooled mean was the zero vector


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # (..., T, d) -> (..., h, T, d_k)
    return x.reshape(*x.shape[:-1], heads, x.shape[-1] // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # (..., h, T, d_k) -> (..., T, d)
    x = x.transpose(-3, -2)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax(q k^T / sqrt(d_k)) over the key axis."""
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


def multi_head_cross_attention(
    x_q: torch.Tensor,
    x_kv: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    heads: int,
    return_weights: bool = False,
) -> Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
    """Queries from x_q, keys and values from x_kv; heads merged by w_o."""
    d = x_q.shape[-1]
    if heads <= 0 or d % heads != 0:
        raise ShapeError(f"token dim {d} is not divisible by {heads} heads")
    if x_kv.shape[-1] != d:
        raise ShapeError(f"query dim {d} != key/value dim {x_kv.shape[-1]}")
    for name, w in (("W_Q", w_q), ("W_K", w_k), ("W_V", w_v), ("W_O", w_o)):
        if tuple(w.shape) != (d, d):
            raise ShapeError(f"{name} has shape {tuple(w.shape)}, expected ({d}, {d})")

    q = _split_heads(x_q @ w_q, heads)
    k = _split_heads(x_kv @ w_k, heads)
    v = _split_heads(x_kv @ w_v, heads)
    weights = attention_weights(q, k)
    out = _merge_heads(weights @ v) @ w_o
    if return_weights:
        return out, weights
    return out


class CrossAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if heads <= 0 or d % heads != 0:
            raise ShapeError(f"token dim {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        for name in ("WQ", "WK", "WV", "WO", "WQp", "WKp", "WVp", "WOp"):
            self.register_parameter(name, nn.Parameter(torch.empty(d, d)))

    def bank(self, direction: Direction) -> Tuple[torch.Tensor, ...]:
        if direction is Direction.SKULL_QUERY:
            return self.WQ, self.WK, self.WV, self.WO
        return self.WQp, self.WKp, self.WVp, self.WOp

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor, direction: Direction, return_weights: bool = False):
        return multi_head_cross_attention(x_q, x_kv, *self.bank(direction), self.heads, return_weights)


class FeedForward(nn.Module):
    """Two-layer ReLU network per direction, d -> d_ff -> d."""

    def __init__(self, d: int, d_ff: int):
        super().__init__()
        for side in ("s", "f"):
            self.register_parameter(f"W1{side}", nn.Parameter(torch.empty(d, d_ff)))
            self.register_parameter(f"b1{side}", nn.Parameter(torch.zeros(d_ff)))
            self.register_parameter(f"W2{side}", nn.Parameter(torch.empty(d_ff, d)))
            self.register_parameter(f"b2{side}", nn.Parameter(torch.zeros(d)))

    def forward(self, x: torch.Tensor, direction: Direction) -> torch.Tensor:
        side = direction.value
        hidden = torch.relu(x @ getattr(self, f"W1{side}") + getattr(self, f"b1{side}"))
        return hidden @ getattr(self, f"W2{side}") + getattr(self, f"b2{side}")


class LayerNorms(nn.Module):
    """Scale/shift pairs for the two post-norm stages of each direction."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        for side in ("s", "f"):
            for stage in (1, 2):
                self.register_parameter(f"g{stage}{side}", nn.Parameter(torch.ones(d)))
                self.register_parameter(f"b{stage}{side}", nn.Parameter(torch.zeros(d)))

    def forward(self, x: torch.Tensor, stage: int, direction: Direction) -> torch.Tensor:
        side = direction.value
        return F.layer_norm(
            x, (self.d,), getattr(self, f"g{stage}{side}"), getattr(self, f"b{stage}{side}"), LAYER_NORM_EPS
        )


def _refine(
    tokens: torch.Tensor,
    attended: torch.Tensor,
    ffn: FeedForward,
    ln: LayerNorms,
    direction: Direction,
    use_layer_norm: bool,
) -> torch.Tensor:
    Y = tokens + attended
    if use_layer_norm:
        Y = ln(Y, 1, direction)
    out = Y + ffn(Y, direction)
    if use_layer_norm:
        out = ln(out, 2, direction)
    return out


def enhance(
    tokens_s: torch.Tensor,
    tokens_f: torch.Tensor,
    attn: CrossAttention,
    ffn: FeedForward,
    ln: LayerNorms,
    use_layer_norm: bool = True,
) -> EnhancedTokens:
    """Post-norm cross-attention block applied in both directions."""
    attended_s = attn(tokens_s, tokens_f, Direction.SKULL_QUERY)
    attended_f = attn(tokens_f, tokens_s, Direction.FACE_QUERY)
    return EnhancedTokens(
        skull=_refine(tokens_s, attended_s, ffn, ln, Direction.SKULL_QUERY, use_layer_norm),
        face=_refine(tokens_f, attended_f, ffn, ln, Direction.FACE_QUERY, use_layer_norm),
    )


def global_embed(tokens: torch.Tensor) -> GlobalEmbedding:
    """Mean over tokens followed by L2 normalisation; zero stays zero."""
    if tokens.shape[-2] == 0:
        raise ShapeError("cannot pool an empty token sequence")
    pooled = tokens.mean(dim=-2)
    degenerate = torch.linalg.vector_norm(pooled, dim=-1) == 0
    if bool(degenerate.any()):
        logger.warning(f"{int(degenerate.sum())} pooled embedding(s) are zero; left unnormalised")
    return GlobalEmbedding(g=F.normalize(pooled, dim=-1, eps=1e-12), degenerate=degenerate)
