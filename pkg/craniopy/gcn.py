"""Graph convolution encoder, pooling and token fusion."""
import logging
from typing import List, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError

logger = logging.getLogger(__name__)


class TokenSequence(NamedTuple):
    tokens: torch.Tensor  # (..., N, d_embed + d_g)
    pooled: torch.Tensor  # (..., d_embed + d_g), the [z || f_global] vector


def normalize_adjacency(edges: np.ndarray, n: int) -> np.ndarray:
    """D^-1/2 (A_sym + I) D^-1/2 for a directed edge list over n nodes."""
    adjacency = np.zeros((n, n), dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        if edges.min() < 0 or edges.max() >= n:
            raise ShapeError(f"edge endpoint outside [0, {n})")
        adjacency[edges[:, 0], edges[:, 1]] = 1.0
    adjacency = np.maximum(adjacency, adjacency.T)
    np.fill_diagonal(adjacency, 1.0)
    inv_sqrt = 1.0 / np.sqrt(adjacency.sum(axis=1))
    return adjacency * inv_sqrt[:, None] * inv_sqrt[None, :]


def gcn_forward(
    X: torch.Tensor,
    adjacency: torch.Tensor,
    weights: Sequence[torch.Tensor],
    relu_last: bool = True,
) -> torch.Tensor:
    """H^(l+1) = relu(A H^(l) W^(l)); batched over leading dimensions."""
    if X.shape[-2] != adjacency.shape[-1] or adjacency.shape[-1] != adjacency.shape[-2]:
        raise ShapeError(f"node matrix {tuple(X.shape)} incompatible with adjacency {tuple(adjacency.shape)}")
    H = X
    last = len(weights) - 1
    for layer, W in enumerate(weights):
        if H.shape[-1] != W.shape[0]:
            raise ShapeError(f"layer {layer}: input dim {H.shape[-1]} != weight rows {W.shape[0]}")
        H = adjacency @ H @ W
        if layer < last or relu_last:
            H = torch.relu(H)
    return H


def global_mean_pool(H: torch.Tensor) -> torch.Tensor:
    if H.shape[-2] == 0:
        raise ShapeError("cannot pool an empty node set")
    return H.mean(dim=-2)


def build_tokens(H: torch.Tensor, f_global: torch.Tensor) -> TokenSequence:
    """Token i = [H_i || f_global]; one token per landmark."""
    if f_global.shape[:-1] != H.shape[:-2]:
        raise ShapeError(f"global feature batch {tuple(f_global.shape)} does not match nodes {tuple(H.shape)}")
    expanded = f_global.unsqueeze(-2).expand(*H.shape[:-1], f_global.shape[-1])
    tokens = torch.cat([H, expanded], dim=-1)
    pooled = torch.cat([global_mean_pool(H), f_global], dim=-1)
    return TokenSequence(tokens=tokens, pooled=pooled)


class GcnEncoder(nn.Module):
    """Stack of graph convolutions with weights named W0, W1, ..."""

    def __init__(self, in_dim: int, hidden: int, d_embed: int, layers: int = 2, relu_last: bool = True):
        super().__init__()
        if layers < 1:
            raise ShapeError(f"GCN needs at least one layer, got {layers}")
        dims = [in_dim] + [hidden] * (layers - 1) + [d_embed]
        self.layers = layers
        self.relu_last = relu_last
        for i in range(layers):
            self.register_parameter(f"W{i}", nn.Parameter(torch.empty(dims[i], dims[i + 1])))

    @property
    def weights(self) -> List[torch.Tensor]:
        return [getattr(self, f"W{i}") for i in range(self.layers)]

    def forward(self, X: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        return gcn_forward(X, adjacency, self.weights, self.relu_last)
