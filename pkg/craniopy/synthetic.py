"""Deterministic synthetic paired-modality datasets.

Each identity owns a latent landmark layout and latent feature vectors.
Modality A and modality B records are derived from the same latent through a
fixed per-modality affine feature map plus independent noise of scale
`cross_modal_noise`.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .codec import write_feature_file
from .errors import ConfigError
from .manifest import split_identities, write_manifest
from .models import VIEW_LANDMARKS, DatasetManifest, FeatureMatrix, Landmark, Modality, SampleRecord, Split, View
from .utils import ensure_dir

logger = logging.getLogger(__name__)

IMAGE_SIZE = 640
TEMPLATE_MARGIN = 0.15  # template landmarks stay this far from the border
IDENTITY_JITTER = 0.04  # per-identity layout deviation, fraction of image size
COORD_NOISE_SCALE = 0.2  # coordinate noise std is sigma * this * image size
TRANSFORM_SCALE = 0.3
OFFSET_SCALE = 0.1
FEATURE_DIR = "features"


@dataclass
class SyntheticDataset:
    manifest_a: DatasetManifest
    manifest_b: DatasetManifest
    features: Dict[str, FeatureMatrix] = field(default_factory=dict)  # keyed by relative ref

    def ids(self) -> List[str]:
        return sorted({r.id for r in self.manifest_a.records})


def _row_normalize(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    return np.divide(values, norms, out=np.zeros_like(values), where=norms > 0)


def _affine(rng: np.random.Generator, dim: int, identity: bool):
    if identity:
        return np.eye(dim), np.zeros(dim)
    matrix = np.eye(dim) + TRANSFORM_SCALE * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    offset = OFFSET_SCALE * rng.standard_normal(dim)
    return matrix, offset


def _feature_ref(identity: str, modality: Modality, view: View, kind: str) -> str:
    return f"{FEATURE_DIR}/{identity}_{modality.value}_{view.value}_{kind}.cfv"


def generate_synthetic(
    n_identities: int,
    n_landmarks: Optional[int],
    d_feat: int,
    seed: int = 0,
    cross_modal_noise: float = 0.05,
    d_g: Optional[int] = None,
    views: Sequence[View] = (View.FRONT,),
    identity_transforms: bool = False,
) -> SyntheticDataset:
    """Generate a paired dataset; identical arguments give identical output.

    `n_landmarks` applies to every view; None takes each view's standard count.
    """
    if n_identities < 2:
        raise ConfigError(f"need at least 2 identities, got {n_identities}")
    if n_landmarks is not None and n_landmarks < 2:
        raise ConfigError(f"need at least 2 landmarks, got {n_landmarks}")
    if d_feat < 1:
        raise ConfigError(f"d_feat must be positive, got {d_feat}")
    if cross_modal_noise < 0:
        raise ConfigError(f"cross_modal_noise must be non-negative, got {cross_modal_noise}")
    d_g = d_feat if d_g is None else d_g
    views = list(views)
    counts = {view: VIEW_LANDMARKS[view] if n_landmarks is None else n_landmarks for view in views}

    transform_rng, latent_rng, noise_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    ]

    modalities = list(Modality)
    patch_maps = {m: _affine(transform_rng, d_feat, identity_transforms) for m in modalities}
    global_maps = {m: _affine(transform_rng, d_g, identity_transforms) for m in modalities}

    low, high = TEMPLATE_MARGIN * IMAGE_SIZE, (1 - TEMPLATE_MARGIN) * IMAGE_SIZE
    templates = {view: transform_rng.uniform(low, high, size=(counts[view], 2)) for view in views}

    ids = [f"id{index:04d}" for index in range(n_identities)]
    records: Dict[Modality, List[SampleRecord]] = {m: [] for m in modalities}
    features: Dict[str, FeatureMatrix] = {}

    for identity in ids:
        for view in views:
            layout = templates[view] + IDENTITY_JITTER * IMAGE_SIZE * latent_rng.standard_normal((counts[view], 2))
            patch_latent = latent_rng.standard_normal((counts[view], d_feat))
            global_latent = latent_rng.standard_normal(d_g)

            for modality in modalities:
                coords = layout + cross_modal_noise * COORD_NOISE_SCALE * IMAGE_SIZE * noise_rng.standard_normal(
                    (counts[view], 2)
                )
                coords = np.clip(coords, 0.0, IMAGE_SIZE)

                matrix, offset = patch_maps[modality]
                patch = patch_latent @ matrix + offset
                patch = patch + cross_modal_noise * noise_rng.standard_normal(patch.shape)
                g_matrix, g_offset = global_maps[modality]
                glob = global_latent @ g_matrix + g_offset
                glob = glob + cross_modal_noise * noise_rng.standard_normal(glob.shape)

                patch_ref = _feature_ref(identity, modality, view, "patch")
                global_ref = _feature_ref(identity, modality, view, "global")
                features[patch_ref] = FeatureMatrix.from_array(_row_normalize(patch))
                features[global_ref] = FeatureMatrix.from_array(_row_normalize(glob[None, :]))

                records[modality].append(
                    SampleRecord(
                        id=identity,
                        modality=modality,
                        view=view,
                        landmarks=[Landmark(float(x), float(y), 1) for x, y in coords],
                        width=float(IMAGE_SIZE),
                        height=float(IMAGE_SIZE),
                        patch_features_ref=patch_ref,
                        global_feature_ref=global_ref,
                    )
                )

    manifests = {
        m: DatasetManifest(
            records=records[m],
            n_landmarks_front=counts.get(View.FRONT),
            n_landmarks_side=counts.get(View.SIDE),
        )
        for m in modalities
    }
    logger.info(
        f"Generated {n_identities} synthetic identities x {len(views)} view(s), "
        f"landmarks {({v.value: n for v, n in counts.items()})}, d_feat={d_feat}, d_g={d_g}, "
        f"sigma={cross_modal_noise}, seed={seed}"
    )
    return SyntheticDataset(manifest_a=manifests[Modality.A], manifest_b=manifests[Modality.B], features=features)


def write_synthetic(
    dataset: SyntheticDataset,
    out_dir: Union[str, Path],
    ratios: Optional[Sequence[float]] = None,
    counts: Optional[Sequence[int]] = None,
    seed: int = 0,
) -> List[Path]:
    """Write feature files and one manifest per (modality, split).

    Without `ratios` or `counts` every identity goes to the train split.
    Returns the manifest paths written.
    """
    out = ensure_dir(out_dir)
    ensure_dir(out / FEATURE_DIR)
    for ref in sorted(dataset.features):
        write_feature_file(out / ref, dataset.features[ref])

    if ratios is None and counts is None:
        assignment = {Split.TRAIN: dataset.ids()}
    else:
        assignment = split_identities(dataset.ids(), ratios=ratios or (0.7, 0.2, 0.1), seed=seed, counts=counts)

    written = []
    for split, members in assignment.items():
        if not members:
            continue
        keep = set(members)
        for modality, source in ((Modality.A, dataset.manifest_a), (Modality.B, dataset.manifest_b)):
            subset = DatasetManifest(
                records=[r for r in source.records if r.id in keep],
                split=split,
                n_landmarks_front=source.n_landmarks_front,
                n_landmarks_side=source.n_landmarks_side,
            )
            path = out / f"{modality.value}_{split.value}.jsonl"
            write_manifest(subset, path)
            written.append(path)
        logger.info(f"Split {split.value}: {len(members)} identities")
    return written
