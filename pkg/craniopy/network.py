"""The full matching network: shared GCN, per-modality heads and the
bidirectional cross-attention block, with checkpoint conversion."""
import logging
import math
from typing import Any, Dict, Mapping, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

from .attention import CrossAttention, FeedForward, LayerNorms, enhance, global_embed
from .config import RunConfig, build_config
from .dataset import GraphBatch
from .errors import CheckpointError, ShapeError
from .gcn import GcnEncoder, TokenSequence, build_tokens
from .models import Modality, ModelCheckpoint
from .utils import STREAM_INIT, torch_generator

logger = logging.getLogger(__name__)

# Config keys that describe data locations rather than the model
_RUN_ONLY_KEYS = ("train", "val", "out_dir")


class PairOutput(NamedTuple):
    skull: torch.Tensor  # (Q, G, N_s, d) enhanced skull tokens per pair
    face: torch.Tensor  # (Q, G, N_f, d)
    g_s: torch.Tensor  # (Q, G, d)
    g_f: torch.Tensor  # (Q, G, d)


class ProjectionHeads(nn.Module):
    """Modality-specific linear maps applied to the fused tokens."""

    def __init__(self, d: int):
        super().__init__()
        self.Ps = nn.Parameter(torch.empty(d, d))
        self.Pf = nn.Parameter(torch.empty(d, d))

    def forward(self, tokens: torch.Tensor, modality: Modality) -> torch.Tensor:
        return tokens @ (self.Ps if modality is Modality.A else self.Pf)


class CranioNet(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        self.gcn = GcnEncoder(2 + config.d_feat, config.hidden, config.d_embed, config.gcn_layers, config.relu_last)
        self.head = ProjectionHeads(config.d)
        self.attn = CrossAttention(config.d, config.heads)
        self.ffn = FeedForward(config.d, config.d_ff)
        self.ln = LayerNorms(config.d)
        self.to(config.torch_dtype)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices, zero biases, unit LN scales."""
        generator = torch_generator(seed, STREAM_INIT)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if param.dim() == 2:
                    bound = 1.0 / math.sqrt(param.shape[0])
                    param.uniform_(-bound, bound, generator=generator)
                elif name.startswith("ln.g"):
                    param.fill_(1.0)
                else:
                    param.zero_()
        logger.debug(f"Initialised {sum(p.numel() for p in self.parameters())} parameters with seed {seed}")

    def encode(self, batch: GraphBatch) -> TokenSequence:
        """Per-landmark tokens [H_i || f_global] mapped by the modality head."""
        if batch.X.shape[-1] != 2 + self.config.d_feat:
            raise ShapeError(f"node features have dim {batch.X.shape[-1]}, model expects {2 + self.config.d_feat}")
        H = self.gcn(batch.X, batch.adjacency)
        fused = build_tokens(H, batch.f_global)
        return TokenSequence(tokens=self.head(fused.tokens, batch.modality), pooled=fused.pooled)

    def pair_forward(self, tokens_s: torch.Tensor, tokens_f: torch.Tensor, aligned: bool = False) -> PairOutput:
        """Enhance and pool every (skull, face) pair.

        tokens_s is (Q, N_s, d) and tokens_f is (G, N_f, d). All Q x G pairs
        are formed, or only the Q aligned pairs (i, i) with `aligned`, in
        which case the pair axis has size 1.
        """
        if aligned:
            if tokens_s.shape[0] != tokens_f.shape[0]:
                raise ShapeError(f"aligned pairing needs equal counts, got {tokens_s.shape[0]} and {tokens_f.shape[0]}")
            s = tokens_s.unsqueeze(1)
            f = tokens_f.unsqueeze(1)
        else:
            q, g = tokens_s.shape[0], tokens_f.shape[0]
            s = tokens_s.unsqueeze(1).expand(q, g, *tokens_s.shape[1:])
            f = tokens_f.unsqueeze(0).expand(q, g, *tokens_f.shape[1:])

        if self.config.use_ca:
            enhanced = enhance(s, f, self.attn, self.ffn, self.ln, self.config.use_layer_norm)
            s, f = enhanced.skull, enhanced.face
        return PairOutput(skull=s, face=f, g_s=global_embed(s).g, g_f=global_embed(f).g)

    def to_checkpoint(self, extra: Optional[Mapping[str, Any]] = None) -> ModelCheckpoint:
        tensors = {name: param.detach().cpu().numpy().astype("<f4") for name, param in self.named_parameters()}
        config = {key: value for key, value in self.config.to_dict().items() if key not in _RUN_ONLY_KEYS}
        if extra:
            config.update(extra)
        return ModelCheckpoint(tensors=tensors, config=config)

    def load_tensors(self, tensors: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = [name for name in own if name not in tensors]
        unexpected = [name for name in tensors if name not in own]
        if missing or unexpected:
            raise CheckpointError(f"checkpoint tensors do not match the model: missing {missing}, unexpected {unexpected}")
        with torch.no_grad():
            for name, param in own.items():
                value = tensors[name]
                if tuple(value.shape) != tuple(param.shape):
                    raise CheckpointError(
                        f"shape mismatch for {name!r}: checkpoint {tuple(value.shape)}, model {tuple(param.shape)}"
                    )
                param.copy_(torch.as_tensor(np.asarray(value), dtype=param.dtype))

    @classmethod
    def from_checkpoint(cls, checkpoint: ModelCheckpoint, overrides: Optional[Mapping[str, Any]] = None) -> "CranioNet":
        """Rebuild the model from a checkpoint; `overrides` may change scoring settings."""
        fields = set(RunConfig.__dataclass_fields__)
        values: Dict[str, Any] = {
            key: value for key, value in checkpoint.config.items() if key in fields and key not in _RUN_ONLY_KEYS
        }
        values.update({key: value for key, value in (overrides or {}).items() if value is not None})
        model = cls(build_config(values))
        model.load_tensors(checkpoint.tensors)
        return model
