"""Turn manifest records into batched graph tensors."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .codec import load_feature_file
from .config import RunConfig
from .errors import GraphError
from .extractors import load_image, toy_global_feature
from .gcn import normalize_adjacency
from .graph import build_graph
from .manifest import pair_records
from .models import DatasetManifest, LandmarkGraph, Modality, SampleRecord, View

logger = logging.getLogger(__name__)


@dataclass
class GraphBatch:
    """Graphs of one modality and one view, stacked along the first axis."""
    view: View
    modality: Modality
    ids: List[str]
    X: torch.Tensor  # (B, N, 2 + d_feat)
    adjacency: torch.Tensor  # (B, N, N)
    f_global: torch.Tensor  # (B, d_g)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def keys(self) -> List[str]:
        return [f"{identity}/{self.view.value}" for identity in self.ids]

    def take(self, indices: Sequence[int]) -> "GraphBatch":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return GraphBatch(
            view=self.view,
            modality=self.modality,
            ids=[self.ids[i] for i in indices],
            X=self.X.index_select(0, index),
            adjacency=self.adjacency.index_select(0, index),
            f_global=self.f_global.index_select(0, index),
        )

    def index_of(self, identity: str) -> Optional[int]:
        try:
            return self.ids.index(identity)
        except ValueError:
            return None


@dataclass
class PairedView:
    """Skull and face batches of one view, aligned by identity."""
    view: View
    skull: GraphBatch
    face: GraphBatch

    def __len__(self) -> int:
        return len(self.skull)


def _global_feature(record: SampleRecord, config: RunConfig, image: Optional[np.ndarray]) -> np.ndarray:
    if config.feature_mode == "toy":
        return toy_global_feature(image=image, d_g=config.d_g)
    if record.global_feature_ref is None:
        raise GraphError(f"record {record.id!r} ({record.modality.value}) has no global_feature_ref")
    vector = toy_global_feature(precomputed=load_feature_file(record.global_feature_ref).values)
    if vector.size != config.d_g:
        raise GraphError(f"record {record.id!r}: global feature has {vector.size} values, d_g is {config.d_g}")
    return vector


def record_graph(record: SampleRecord, config: RunConfig) -> Tuple[LandmarkGraph, np.ndarray]:
    """Build the landmark graph and the global feature vector of one record."""
    image = None
    patch_features = None
    if config.feature_mode == "toy":
        if record.image_ref is None:
            raise GraphError(f"record {record.id!r} ({record.modality.value}) has no image_ref for toy features")
        image = load_image(record.image_ref)
    else:
        if record.patch_features_ref is None:
            raise GraphError(f"record {record.id!r} ({record.modality.value}) has no patch_features_ref")
        patch_features = load_feature_file(record.patch_features_ref)

    graph = build_graph(
        record.landmarks,
        config.patch,
        config.k,
        image=image,
        patch_features=patch_features,
        image_size=(record.width, record.height),
        normalize_coords=config.normalize_coords,
    )
    return graph, _global_feature(record, config, image)


def stack_graphs(
    records: Sequence[SampleRecord],
    graphs: Sequence[LandmarkGraph],
    vectors: Sequence[np.ndarray],
    dtype: torch.dtype,
) -> GraphBatch:
    """Stack per-record graphs (already built) into one batch."""
    return GraphBatch(
        view=records[0].view,
        modality=records[0].modality,
        ids=[r.id for r in records],
        X=torch.as_tensor(np.stack([g.X for g in graphs]), dtype=dtype),
        adjacency=torch.as_tensor(np.stack([normalize_adjacency(g.edges, g.N) for g in graphs]), dtype=dtype),
        f_global=torch.as_tensor(np.stack(vectors), dtype=dtype),
    )


def build_batch(records: Sequence[SampleRecord], config: RunConfig) -> GraphBatch:
    if not records:
        raise GraphError("cannot build an empty batch")
    views = {r.view for r in records}
    modalities = {r.modality for r in records}
    if len(views) != 1 or len(modalities) != 1:
        raise GraphError("a batch must hold records of one view and one modality")

    graphs, vectors = zip(*(record_graph(record, config) for record in records))
    batch = stack_graphs(records, graphs, vectors, config.torch_dtype)
    logger.debug(f"Built {batch.modality.value}/{batch.view.value} batch of {len(batch)} graphs")
    return batch


def load_paired(manifest: DatasetManifest, config: RunConfig, require_complete: bool = True) -> Dict[View, PairedView]:
    """Paired skull/face batches per configured view."""
    paired = {}
    for view, pairs in pair_records(manifest, require_complete).items():
        if view not in config.view_set:
            continue
        paired[view] = PairedView(
            view=view,
            skull=build_batch([a for a, _ in pairs], config),
            face=build_batch([b for _, b in pairs], config),
        )
        logger.info(f"Loaded {len(pairs)} {view.value} pairs")
    if not paired:
        raise GraphError(f"no paired records for views {config.views}")
    return paired


def load_side(manifest: DatasetManifest, config: RunConfig, modality: Modality) -> Dict[View, GraphBatch]:
    """All records of one modality, one batch per configured view, ordered by id."""
    batches = {}
    for view in config.view_set:
        records = sorted(manifest.select(modality, view), key=lambda r: r.id)
        if records:
            batches[view] = build_batch(records, config)
    return batches
