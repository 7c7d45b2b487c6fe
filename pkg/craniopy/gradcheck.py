"""Central finite-difference verification of analytic gradients."""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import RUN_PRESETS, RunConfig, build_config
from .dataset import GraphBatch, stack_graphs
from .errors import ConfigError
from .graph import build_graph
from .network import CranioNet
from .synthetic import generate_synthetic
from .training import batch_objective
from .utils import STREAM_PROBES, numpy_generator

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_PROBES = 64
TOLERANCE = 1e-4
DENOMINATOR_FLOOR = 1e-8

TINY_IDENTITIES = 2
TINY_LANDMARKS = 4


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_param: Optional[str]
    worst_index: Optional[int]
    probes: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[Tuple[str, torch.Tensor]],
    probe_count: int = DEFAULT_PROBES,
    h: float = DEFAULT_STEP,
    seed: int = 0,
) -> GradcheckResult:
    """Compare autograd against central differences on random parameter entries.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    if probe_count < 1:
        raise ValueError(f"probe_count must be positive, got {probe_count}")
    params = list(params)
    for name, tensor in params:
        if tensor.dtype != torch.float64:
            raise ValueError(f"gradient checks need 64-bit parameters; {name} is {tensor.dtype}")

    tensors = [t for _, t in params]
    grads = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]

    sizes = np.array([t.numel() for t in tensors])
    total = int(sizes.sum())
    rng = numpy_generator(seed, STREAM_PROBES)
    flat_probes = np.sort(rng.choice(total, size=min(probe_count, total), replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = GradcheckResult(max_rel_error=0.0, worst_param=None, worst_index=None, probes=len(flat_probes))
    with torch.no_grad():
        for flat in flat_probes:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            index = int(flat - offsets[which])
            view = tensors[which].view(-1)
            original = view[index].item()

            view[index] = original + h
            plus = float(loss_fn())
            view[index] = original - h
            minus = float(loss_fn())
            view[index] = original

            numeric = (plus - minus) / (2.0 * h)
            analytic = float(grads[which].reshape(-1)[index])
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), DENOMINATOR_FLOOR)
            if error > worst.max_rel_error:
                worst.max_rel_error = error
                worst.worst_param = params[which][0]
                worst.worst_index = index
    return worst


def tiny_config(**overrides) -> RunConfig:
    return build_config({**RUN_PRESETS["tiny"], **overrides})


def tiny_batches(config: RunConfig) -> Tuple[GraphBatch, GraphBatch]:
    """Two paired identities with four landmarks each, built in memory."""
    data = generate_synthetic(
        TINY_IDENTITIES, TINY_LANDMARKS, config.d_feat, seed=config.seed, d_g=config.d_g
    )
    batches = []
    for manifest in (data.manifest_a, data.manifest_b):
        records = manifest.records
        graphs = [
            build_graph(
                r.landmarks,
                config.patch,
                config.k,
                patch_features=data.features[r.patch_features_ref],
                image_size=(r.width, r.height),
                normalize_coords=config.normalize_coords,
            )
            for r in records
        ]
        vectors = [data.features[r.global_feature_ref].values.astype(np.float64).ravel() for r in records]
        batches.append(stack_graphs(records, graphs, vectors, torch.float64))
    skull, face = batches
    return skull, face


def check_pipeline(
    config: RunConfig, probe_count: int = DEFAULT_PROBES, h: float = DEFAULT_STEP
) -> GradcheckResult:
    """Gradient check of the full training objective on the tiny instance."""
    if config.envelope:
        raise ConfigError(
            "envelope transport treats the plan as constant, so its gradients are approximate "
            "by construction; run the gradient check without --envelope"
        )
    if config.dtype != "float64":
        config = config.replace(dtype="float64")

    model = CranioNet(config)
    skull, face = tiny_batches(config)
    result = finite_difference_check(
        lambda: batch_objective(model, skull, face)[0],
        list(model.named_parameters()),
        probe_count=probe_count,
        h=h,
        seed=config.seed,
    )
    logger.info(
        f"Gradient check: max relative error {result.max_rel_error:.3e} over {result.probes} probes"
        + (f" (worst: {result.worst_param}[{result.worst_index}])" if result.worst_param else "")
    )
    return result
