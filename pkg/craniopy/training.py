"""Combined similarity, hardest-negative triplet loss and the training loop."""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import torch

from .config import RunConfig
from .dataset import GraphBatch, PairedView
from .errors import ConfigError, NonFiniteLossError, ShapeError
from .models import ModelCheckpoint, View
from .network import CranioNet, PairOutput
from .transport import TransportPlan, ot_loss, solve
from .utils import STREAM_SAMPLING, torch_generator

logger = logging.getLogger(__name__)

Number = Union[float, torch.Tensor]


@dataclass
class SimilarityBundle:
    S: torch.Tensor  # (B, B) global cosine matrix, diagonal = positive pairs
    negatives: torch.Tensor  # (B,) mined j_i^-
    sim_pos: torch.Tensor
    sim_neg: torch.Tensor
    ot_pos: Optional[torch.Tensor] = None  # S_OT^pos = -<T*, C>
    ot_neg: Optional[torch.Tensor] = None
    cost_pos: Optional[torch.Tensor] = None  # <T*, C> of the positive pairs


@dataclass
class EpochMetrics:
    epoch: int
    l_triplet: float
    l_ot: float
    l_total: float
    batch_r1: float
    val_r1: Optional[float] = None
    seconds: float = 0.0


@dataclass
class FitResult:
    checkpoint: ModelCheckpoint
    best_epoch: int
    history: List[EpochMetrics] = field(default_factory=list)


def global_similarity_matrix(g_s: torch.Tensor, g_f: torch.Tensor) -> torch.Tensor:
    """S_ij = g_s,i . g_f,j.

    Accepts per-sample embeddings of shape (B, d), or per-pair embeddings of
    shape (B, B, d) where entry (i, j) was computed for the pair (i, j).
    """
    if g_s.shape[-1] != g_f.shape[-1]:
        raise ShapeError(f"embedding dims differ: {g_s.shape[-1]} vs {g_f.shape[-1]}")
    if g_s.dim() == 2 and g_f.dim() == 2:
        return g_s @ g_f.transpose(0, 1)
    if g_s.dim() == 3 and g_s.shape == g_f.shape:
        return (g_s * g_f).sum(dim=-1)
    raise ShapeError(f"unsupported embedding shapes {tuple(g_s.shape)} and {tuple(g_f.shape)}")


def mine_hardest_negative(S: torch.Tensor, i: int) -> int:
    """argmax over j != i of S_ij; ties go to the lowest index."""
    if S.shape[0] < 2:
        raise ShapeError(f"hardest-negative mining needs B >= 2, got {S.shape[0]}")
    row = S[i].detach().clone()
    row[i] = -math.inf
    return int(torch.argmax(row))


def mine_hardest_negatives(S: torch.Tensor) -> torch.Tensor:
    """Vectorised mine_hardest_negative for every anchor row."""
    if S.dim() != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"expected a square similarity matrix, got {tuple(S.shape)}")
    if S.shape[0] < 2:
        raise ShapeError(f"hardest-negative mining needs B >= 2, got {S.shape[0]}")
    eye = torch.eye(S.shape[0], dtype=torch.bool, device=S.device)
    return torch.argmax(S.detach().masked_fill(eye, -math.inf), dim=1)


def combined_similarity(s_global: Number, s_ot: Optional[Number], beta: float) -> Number:
    """beta * S_global + (1 - beta) * tanh(S_OT); the global term alone without OT."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if s_ot is None:
        return s_global
    squashed = torch.tanh(s_ot) if isinstance(s_ot, torch.Tensor) else math.tanh(s_ot)
    return beta * s_global + (1.0 - beta) * squashed


def triplet_loss(sim_pos: torch.Tensor, sim_neg: torch.Tensor, margin: float) -> torch.Tensor:
    """(1/B) sum_i max(0, m - sim_pos_i + sim_neg_i)."""
    if sim_pos.shape != sim_neg.shape:
        raise ShapeError(f"sim_pos {tuple(sim_pos.shape)} and sim_neg {tuple(sim_neg.shape)} differ")
    return torch.clamp(margin - sim_pos + sim_neg, min=0.0).mean()


def total_loss(l_triplet: torch.Tensor, l_ot: torch.Tensor, lambda_ot: float) -> torch.Tensor:
    if lambda_ot < 0:
        raise ValueError(f"lambda_ot must be non-negative, got {lambda_ot}")
    if lambda_ot == 0:
        return l_triplet
    return l_triplet + lambda_ot * l_ot


def pair_transport(
    out: PairOutput, rows: torch.Tensor, cols: torch.Tensor, config: RunConfig
) -> Tuple[TransportPlan, torch.Tensor]:
    """Transport plans for the selected (row, col) pairs of a pairwise forward."""
    return solve(
        out.skull[rows, cols],
        out.face[rows, cols],
        epsilon=config.epsilon,
        iters=config.sinkhorn_iters,
        envelope=config.envelope,
        tol=config.sinkhorn_tol,
    )


def batch_objective(
    model: CranioNet, skull: GraphBatch, face: GraphBatch
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], SimilarityBundle]:
    """Full forward pass for one identity-aligned batch.

    Returns the total loss, its parts and the similarity bundle.
    """
    config = model.config
    if skull.ids != face.ids:
        raise ShapeError("skull and face batches are not aligned by identity")

    out = model.pair_forward(model.encode(skull).tokens, model.encode(face).tokens)
    S = global_similarity_matrix(out.g_s, out.g_f)
    negatives = mine_hardest_negatives(S)
    anchors = torch.arange(S.shape[0])
    s_pos, s_neg = S[anchors, anchors], S[anchors, negatives]

    if config.ot_active:
        rows = torch.cat([anchors, anchors])
        cols = torch.cat([anchors, negatives])
        transport, cost = pair_transport(out, rows, cols, config)
        pair_cost = ot_loss(transport.plan, cost)
        cost_pos, cost_neg = pair_cost[: len(anchors)], pair_cost[len(anchors):]
        bundle = SimilarityBundle(
            S=S,
            negatives=negatives,
            sim_pos=combined_similarity(s_pos, -cost_pos, config.beta),
            sim_neg=combined_similarity(s_neg, -cost_neg, config.beta),
            ot_pos=-cost_pos,
            ot_neg=-cost_neg,
            cost_pos=cost_pos,
        )
        l_ot = cost_pos.mean()
        lambda_ot = config.lambda_ot
    else:
        bundle = SimilarityBundle(S=S, negatives=negatives, sim_pos=s_pos, sim_neg=s_neg)
        l_ot = torch.zeros((), dtype=S.dtype)
        lambda_ot = 0.0

    l_triplet = triplet_loss(bundle.sim_pos, bundle.sim_neg, config.margin)
    loss = total_loss(l_triplet, l_ot, lambda_ot)
    return loss, {"l_triplet": l_triplet, "l_ot": l_ot, "l_total": loss}, bundle


def make_batches(
    paired: Dict[View, PairedView], batch_size: int, generator: torch.Generator
) -> List[Tuple[View, List[int]]]:
    """Shuffle identities per view and cut identity-disjoint batches.

    A trailing batch of a single identity is folded into the previous batch.
    Batch order across views is shuffled too.
    """
    batches: List[Tuple[View, List[int]]] = []
    for view in sorted(paired, key=lambda v: v.value):
        n = len(paired[view])
        if batch_size > n:
            raise ConfigError(f"batch size {batch_size} exceeds the {n} {view.value} identities available")
        order = torch.randperm(n, generator=generator).tolist()
        chunks = [order[start:start + batch_size] for start in range(0, n, batch_size)]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            chunks[-2].extend(chunks.pop())
        batches.extend((view, chunk) for chunk in chunks)
    permutation = torch.randperm(len(batches), generator=generator).tolist()
    return [batches[i] for i in permutation]


def _diagnostics(model: CranioNet, epoch: int, step: int, view: View, ids: List[str], parts: Dict[str, torch.Tensor]):
    return {
        "epoch": epoch,
        "step": step,
        "view": view.value,
        "ids": ids,
        "losses": {name: float(value.detach()) for name, value in parts.items()},
        "param_norms": {name: float(p.detach().norm()) for name, p in model.named_parameters()},
        "non_finite_params": [name for name, p in model.named_parameters() if not bool(torch.isfinite(p).all())],
    }


def train_epoch(
    model: CranioNet,
    optimizer: torch.optim.Optimizer,
    paired: Dict[View, PairedView],
    generator: torch.Generator,
    epoch: int = 1,
) -> EpochMetrics:
    """One pass over identity-disjoint batches; updates the model in place."""
    started = time.perf_counter()
    model.train()
    totals = {"l_triplet": 0.0, "l_ot": 0.0, "l_total": 0.0}
    hits = 0
    anchors = 0
    batches = make_batches(paired, model.config.triplet.batch_size, generator)

    for step, (view, indices) in enumerate(batches, start=1):
        skull = paired[view].skull.take(indices)
        face = paired[view].face.take(indices)
        optimizer.zero_grad()
        try:
            loss, parts, bundle = batch_objective(model, skull, face)
        except NonFiniteLossError:
            raise
        except ArithmeticError as exc:
            raise NonFiniteLossError(
                f"non-finite forward pass at epoch {epoch}, step {step}: {exc}",
                _diagnostics(model, epoch, step, view, skull.ids, {}),
            ) from exc
        if not bool(torch.isfinite(loss)):
            raise NonFiniteLossError(
                f"non-finite loss at epoch {epoch}, step {step}",
                _diagnostics(model, epoch, step, view, skull.ids, parts),
            )
        loss.backward()
        optimizer.step()

        for name, value in parts.items():
            totals[name] += float(value.detach())
        predicted = torch.argmax(bundle.S.detach(), dim=1)
        hits += int((predicted == torch.arange(len(indices))).sum())
        anchors += len(indices)
        logger.debug(f"epoch {epoch} step {step} ({view.value}, B={len(indices)}): loss {loss.detach().item():.6f}")

    steps = len(batches)
    return EpochMetrics(
        epoch=epoch,
        l_triplet=totals["l_triplet"] / steps,
        l_ot=totals["l_ot"] / steps,
        l_total=totals["l_total"] / steps,
        batch_r1=hits / anchors,
        seconds=time.perf_counter() - started,
    )


def make_optimizer(model: CranioNet) -> torch.optim.Optimizer:
    """Adam moments with decoupled weight decay, constant learning rate."""
    settings = model.config.triplet
    return torch.optim.AdamW(model.parameters(), lr=settings.learning_rate, weight_decay=settings.weight_decay)


def fit(
    model: CranioNet,
    train: Dict[View, PairedView],
    validate: Optional[Callable[[CranioNet], float]] = None,
    log_path: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> FitResult:
    """Train for config.epochs and keep the snapshot with the best validation R@1.

    Ties keep the earlier epoch. Without `validate` the final epoch is kept.
    """
    settings = model.config.triplet
    if settings.epochs < 1:
        raise ConfigError("nothing to train: epochs must be at least 1")

    generator = torch_generator(settings.seed, STREAM_SAMPLING)
    optimizer = make_optimizer(model)
    history: List[EpochMetrics] = []
    best: Optional[ModelCheckpoint] = None
    best_epoch = 0
    best_r1 = -math.inf

    log_handle = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(1, settings.epochs + 1):
            metrics = train_epoch(model, optimizer, train, generator, epoch)
            if validate is not None:
                model.eval()
                with torch.no_grad():
                    metrics.val_r1 = float(validate(model))

            history.append(metrics)
            score = metrics.val_r1 if metrics.val_r1 is not None else 0.0
            if validate is None or score > best_r1:
                best_r1 = score
                best_epoch = epoch
                best = model.to_checkpoint()

            logger.info(
                f"Epoch {epoch}/{settings.epochs}: L_triplet {metrics.l_triplet:.4f}, L_OT {metrics.l_ot:.4f}, "
                f"L_total {metrics.l_total:.4f}, batch R@1 {metrics.batch_r1:.3f}"
                + (f", val R@1 {metrics.val_r1:.3f}" if metrics.val_r1 is not None else "")
            )
            if log_handle is not None:
                log_handle.write(json.dumps(asdict(metrics), sort_keys=True) + "\n")
                log_handle.flush()
            if on_epoch is not None:
                on_epoch(metrics)
    finally:
        if log_handle is not None:
            log_handle.close()

    logger.info(f"Selected epoch {best_epoch}" + (f" (val R@1 {best_r1:.3f})" if validate is not None else ""))
    return FitResult(checkpoint=best, best_epoch=best_epoch, history=history)
