from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import FeatureFileError, GraphError, ManifestError


class Modality(Enum):
    A = "A"  # skull or sketch (queries)
    B = "B"  # face photo (gallery)


class View(Enum):
    FRONT = "front"
    SIDE = "side"


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# Reference landmark counts per view
VIEW_LANDMARKS: Dict[View, int] = {
    View.FRONT: 18,
    View.SIDE: 13,
}


@dataclass(frozen=True)
class Landmark:
    x: float
    y: float
    v: int

    def __post_init__(self):
        if self.v not in (0, 1):
            raise ManifestError(f"visibility must be 0 or 1, got {self.v!r}")
        if self.x < 0 or self.y < 0:
            raise ManifestError(f"negative landmark coordinates ({self.x}, {self.y})")

    @property
    def visible(self) -> bool:
        return self.v == 1

    def in_bounds(self, width: float, height: float) -> bool:
        return 0 <= self.x <= width and 0 <= self.y <= height


@dataclass
class SampleRecord:
    id: str
    modality: Modality
    view: View
    landmarks: List[Landmark]
    width: float
    height: float
    image_ref: Optional[str] = None
    patch_features_ref: Optional[str] = None
    global_feature_ref: Optional[str] = None

    @property
    def key(self) -> Tuple[str, Modality, View]:
        return (self.id, self.modality, self.view)

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)

    def coordinates(self) -> np.ndarray:
        return np.array([[lm.x, lm.y] for lm in self.landmarks], dtype=np.float64)


@dataclass
class DatasetManifest:
    records: List[SampleRecord]
    split: Split = Split.TRAIN
    n_landmarks_front: Optional[int] = None
    n_landmarks_side: Optional[int] = None

    def n_landmarks(self, view: View) -> Optional[int]:
        return self.n_landmarks_front if view is View.FRONT else self.n_landmarks_side

    def select(self, modality: Optional[Modality] = None, view: Optional[View] = None) -> List[SampleRecord]:
        return [
            r for r in self.records
            if (modality is None or r.modality is modality) and (view is None or r.view is view)
        ]

    def views(self) -> List[View]:
        present = {r.view for r in self.records}
        return [v for v in View if v in present]

    def ids(self, modality: Optional[Modality] = None, view: Optional[View] = None) -> List[str]:
        return sorted({r.id for r in self.select(modality, view)})


@dataclass
class FeatureMatrix:
    rows: int
    dim: int
    values: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.values, dtype="<f4").ravel()
        if flat.size != self.rows * self.dim:
            raise FeatureFileError(
                f"value count {flat.size} does not match {self.rows}x{self.dim}"
            )
        self.values = flat.reshape(self.rows, self.dim)
        if not np.all(np.isfinite(self.values)):
            raise FeatureFileError("non-finite value in feature matrix")

    @classmethod
    def from_array(cls, array: np.ndarray) -> "FeatureMatrix":
        array = np.atleast_2d(np.asarray(array))
        return cls(rows=array.shape[0], dim=array.shape[1], values=array)


@dataclass(frozen=True)
class PatchConfig:
    half_size: int = 32  # P; patches span 2P pixels per side
    d_feat: int = 128

    def __post_init__(self):
        if self.half_size <= 0:
            raise GraphError(f"patch half-size must be positive, got {self.half_size}")
        if self.d_feat <= 0:
            raise GraphError(f"d_feat must be positive, got {self.d_feat}")


@dataclass
class LandmarkGraph:
    X: np.ndarray  # N x (2 + d_feat)
    edges: np.ndarray  # E x 2, directed (source, neighbour)
    k: int

    @property
    def N(self) -> int:
        return int(self.X.shape[0])

    @property
    def d_feat(self) -> int:
        return int(self.X.shape[1]) - 2


@dataclass
class TripletConfig:
    """Loss and optimiser settings for the combined triplet objective."""
    margin: float = 0.3
    beta: float = 0.5
    lambda_ot: float = 0.1
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 50
    epsilon: float = 0.1
    sinkhorn_iters: int = 80
    seed: int = 0


@dataclass
class ModelCheckpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)
    version: int = 1


@dataclass
class RankedRetrieval:
    query_id: str
    gallery_ids: List[str]
    scores: List[float]

    def rank_of(self, gallery_id: str) -> Optional[int]:
        """1-based rank of a gallery item, None when absent."""
        try:
            return self.gallery_ids.index(gallery_id) + 1
        except ValueError:
            return None


@dataclass
class MetricReport:
    recall: Dict[int, float]
    mean_ap: Dict[int, float]
    queries: int
    label: str = "all"

    def as_row(self) -> Dict[str, float]:
        row = {f"R@{k}": v for k, v in self.recall.items()}
        row.update({f"mAP@{k}": v for k, v in self.mean_ap.items()})
        return row
