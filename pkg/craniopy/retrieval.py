"""Gallery scoring and rank-based retrieval metrics."""
import logging
from typing import Dict, List, Mapping, Optional, Sequence

import torch

from .dataset import GraphBatch
from .errors import RetrievalError
from .models import MetricReport, RankedRetrieval, View
from .network import CranioNet
from .training import combined_similarity, global_similarity_matrix, pair_transport
from .transport import ot_loss

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10, 20)
MERGED = "merged"
# upper bound on skull/face pairs enhanced in one forward pass
PAIR_CHUNK = 256


def pair_scores(model: CranioNet, tokens_s: torch.Tensor, tokens_f: torch.Tensor) -> torch.Tensor:
    """Combined similarity of every (query, gallery) pair, shape (Q, G)."""
    config = model.config
    out = model.pair_forward(tokens_s, tokens_f)
    S = global_similarity_matrix(out.g_s, out.g_f)
    if not config.use_ot or config.beta >= 1.0:
        return S
    q, g = S.shape
    rows = torch.arange(q).repeat_interleave(g)
    cols = torch.arange(g).repeat(q)
    transport, cost = pair_transport(out, rows, cols, config)
    s_ot = -ot_loss(transport.plan, cost).reshape(q, g)
    return combined_similarity(S, s_ot, config.beta)


def rank_gallery(query_id: str, gallery_ids: Sequence[str], scores: Sequence[float]) -> RankedRetrieval:
    """Sort by descending score; equal scores fall back to gallery id order."""
    order = sorted(range(len(gallery_ids)), key=lambda j: (-scores[j], gallery_ids[j]))
    return RankedRetrieval(
        query_id=query_id,
        gallery_ids=[gallery_ids[j] for j in order],
        scores=[float(scores[j]) for j in order],
    )


def score_gallery(
    model: CranioNet,
    query_tokens: torch.Tensor,
    gallery_tokens: torch.Tensor,
    gallery_ids: Sequence[str],
    query_id: str,
) -> RankedRetrieval:
    """Rank one query (N_s, d) against a gallery (G, N_f, d) of one view."""
    if gallery_tokens.shape[0] == 0 or not gallery_ids:
        raise RetrievalError("empty gallery")
    with torch.no_grad():
        scores = pair_scores(model, query_tokens.unsqueeze(0), gallery_tokens)[0]
    return rank_gallery(query_id, list(gallery_ids), scores.tolist())


def score_all(
    model: CranioNet,
    queries: Mapping[View, GraphBatch],
    gallery: Mapping[View, GraphBatch],
) -> List[RankedRetrieval]:
    """Rank every query against every gallery item of the given views.

    Gallery groups of different views are scored separately (their token
    counts differ) and merged into one ranking per query.
    """
    if not gallery or all(len(batch) == 0 for batch in gallery.values()):
        raise RetrievalError("empty gallery")
    model.eval()
    rankings = []
    with torch.no_grad():
        gallery_tokens = {view: model.encode(batch).tokens for view, batch in gallery.items()}
        for view in sorted(queries, key=lambda v: v.value):
            batch = queries[view]
            tokens_s = model.encode(batch).tokens
            ids: List[str] = []
            columns = []
            for g_view in sorted(gallery, key=lambda v: v.value):
                tokens_f = gallery_tokens[g_view]
                chunk = max(1, PAIR_CHUNK // tokens_f.shape[0])
                parts = [pair_scores(model, tokens_s[start:start + chunk], tokens_f) for start in range(0, len(batch), chunk)]
                columns.append(torch.cat(parts, dim=0))
                ids.extend(gallery[g_view].keys)
            scores = torch.cat(columns, dim=1)
            for row, key in enumerate(batch.keys):
                rankings.append(rank_gallery(key, ids, scores[row].tolist()))
    return rankings


def _relevant_ranks(rankings: Sequence[RankedRetrieval], ground_truth: Mapping[str, str]) -> List[Optional[int]]:
    if not rankings:
        raise RetrievalError("no rankings to evaluate")
    ranks = []
    for ranking in rankings:
        if ranking.query_id not in ground_truth:
            raise RetrievalError(f"missing ground truth for query {ranking.query_id!r}")
        ranks.append(ranking.rank_of(ground_truth[ranking.query_id]))
    return ranks


def recall_at_k(rankings: Sequence[RankedRetrieval], ground_truth: Mapping[str, str], k: int) -> float:
    """Fraction of queries whose relevant item ranks within the top k."""
    ranks = _relevant_ranks(rankings, ground_truth)
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def map_at_k(rankings: Sequence[RankedRetrieval], ground_truth: Mapping[str, str], k: int) -> float:
    """Mean of 1/rank over queries, counting only ranks within k."""
    ranks = _relevant_ranks(rankings, ground_truth)
    return sum(1.0 / r for r in ranks if r is not None and r <= k) / len(ranks)


def metric_report(
    rankings: Sequence[RankedRetrieval],
    ground_truth: Mapping[str, str],
    ks: Sequence[int] = DEFAULT_KS,
    label: str = MERGED,
) -> MetricReport:
    return MetricReport(
        recall={k: recall_at_k(rankings, ground_truth, k) for k in ks},
        mean_ap={k: map_at_k(rankings, ground_truth, k) for k in ks},
        queries=len(rankings),
        label=label,
    )


def paired_ground_truth(queries: Mapping[View, GraphBatch], gallery: Mapping[View, GraphBatch]) -> Dict[str, str]:
    """Map each query key to the gallery item with the same id and view."""
    available = {key for batch in gallery.values() for key in batch.keys}
    truth = {}
    for batch in queries.values():
        for key in batch.keys:
            if key not in available:
                raise RetrievalError(f"query {key!r} has no matching item in the gallery")
            truth[key] = key
    return truth


def evaluate(
    model: CranioNet,
    queries: Mapping[View, GraphBatch],
    gallery: Mapping[View, GraphBatch],
    ks: Sequence[int] = DEFAULT_KS,
) -> Dict[str, MetricReport]:
    """Per-view galleries, plus the merged gallery when several views are present."""
    reports = {}
    for view in sorted(queries, key=lambda v: v.value):
        if view not in gallery:
            raise RetrievalError(f"no {view.value} gallery for the {view.value} queries")
        subset_q, subset_g = {view: queries[view]}, {view: gallery[view]}
        rankings = score_all(model, subset_q, subset_g)
        reports[view.value] = metric_report(rankings, paired_ground_truth(subset_q, subset_g), ks, view.value)
    if len(queries) > 1:
        rankings = score_all(model, queries, gallery)
        reports[MERGED] = metric_report(rankings, paired_ground_truth(queries, gallery), ks, MERGED)
    for label, report in reports.items():
        logger.info(f"[{label}] {report.queries} queries: " + ", ".join(f"{k} {v:.3f}" for k, v in report.as_row().items()))
    return reports


def headline(reports: Mapping[str, MetricReport]) -> MetricReport:
    """The merged report when present, otherwise the single per-view report."""
    if MERGED in reports:
        return reports[MERGED]
    return next(iter(reports.values()))
