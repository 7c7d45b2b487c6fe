"""Patch extraction and kNN landmark graphs."""
import logging
from typing import Optional, Sequence

import numpy as np

from .errors import GraphError
from .extractors import toy_patch_features
from .models import FeatureMatrix, Landmark, LandmarkGraph, PatchConfig

logger = logging.getLogger(__name__)


def extract_patch(image: np.ndarray, landmark: Landmark, half_size: int) -> np.ndarray:
    """Cut the 2P x 2P window centred on a visible landmark.

    Rows run over y, columns over x. Pixels outside the image are zero.
    """
    if not landmark.visible:
        raise GraphError("cannot extract a patch for an invisible landmark")
    if half_size <= 0:
        raise GraphError(f"patch half-size must be positive, got {half_size}")

    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape
    cx, cy = int(round(landmark.x)), int(round(landmark.y))
    side = 2 * half_size
    patch = np.zeros((side, side), dtype=np.float64)

    top, left = cy - half_size, cx - half_size
    r0, r1 = max(top, 0), min(top + side, height)
    c0, c1 = max(left, 0), min(left + side, width)
    if r0 < r1 and c0 < c1:
        patch[r0 - top:r1 - top, c0 - left:c1 - left] = image[r0:r1, c0:c1]
    return patch


def knn_edges(points: np.ndarray, k: int) -> np.ndarray:
    """Directed edges from every node to its k nearest neighbours.

    Self is excluded; equal distances resolve to the lower node index.
    Returns an (N*k, 2) array grouped by source node, nearest first.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        raise GraphError(f"need at least 2 points for a kNN graph, got {n}")
    if not 1 <= k <= n - 1:
        raise GraphError(f"k must be in [1, {n - 1}] for {n} points, got {k}")

    diff = points[:, None, :] - points[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist, np.inf)

    # stable sort keeps lower indices first among ties
    neighbours = np.argsort(dist, axis=1, kind="stable")[:, :k]
    sources = np.repeat(np.arange(n), k)
    return np.stack([sources, neighbours.reshape(-1)], axis=1).astype(np.int64)


def node_features(
    landmarks: Sequence[Landmark],
    image: Optional[np.ndarray],
    patch_features: Optional[FeatureMatrix],
    config: PatchConfig,
) -> np.ndarray:
    """Per-landmark feature block f_i; rows of invisible landmarks are zero."""
    n = len(landmarks)
    feats = np.zeros((n, config.d_feat), dtype=np.float64)
    if patch_features is not None:
        if patch_features.rows != n:
            raise GraphError(f"feature rows {patch_features.rows} != landmark count {n}")
        if patch_features.dim != config.d_feat:
            raise GraphError(f"feature dim {patch_features.dim} != d_feat {config.d_feat}")
        source = patch_features.values.astype(np.float64)
        for i, landmark in enumerate(landmarks):
            if landmark.visible:
                feats[i] = source[i]
        return feats

    if image is None:
        raise GraphError("either an image or supplied patch features is required")
    for i, landmark in enumerate(landmarks):
        if landmark.visible:
            patch = extract_patch(image, landmark, config.half_size)
            feats[i] = toy_patch_features(patch, config.d_feat)
    return feats


def build_graph(
    landmarks: Sequence[Landmark],
    config: PatchConfig,
    k: int,
    image: Optional[np.ndarray] = None,
    patch_features: Optional[FeatureMatrix] = None,
    image_size: Optional[Sequence[float]] = None,
    normalize_coords: bool = True,
) -> LandmarkGraph:
    """Build G = (X, E) for one sample.

    Node i carries [x_i, y_i, f_i]. With `normalize_coords`, x and y are
    divided by the image width and height. Edges use the annotated
    coordinates of every landmark, visible or not.
    """
    n = len(landmarks)
    if n < 2:
        raise GraphError(f"a landmark graph needs at least 2 landmarks, got {n}")

    coords = np.array([[lm.x, lm.y] for lm in landmarks], dtype=np.float64)
    feats = node_features(landmarks, image, patch_features, config)
    edges = knn_edges(coords, k)

    if normalize_coords:
        if image_size is None:
            if image is None:
                raise GraphError("image size is required to normalise coordinates")
            image_size = (image.shape[1], image.shape[0])
        width, height = image_size
        coords = coords / np.array([width, height], dtype=np.float64)

    X = np.concatenate([coords, feats], axis=1)
    return LandmarkGraph(X=X, edges=edges, k=k)
