"""Deterministic stand-ins for pretrained patch and global feature extractors.

Both extractors area-average the input to a fixed grid with Pillow's box
filter, flatten it, apply a fixed seeded Gaussian projection and
L2-normalise the result (zero maps to zero).
"""
import logging
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .codec import load_feature_file
from .errors import GraphError

logger = logging.getLogger(__name__)

PATCH_GRID = 8
GLOBAL_GRID = 16
PATCH_PROJECTION_SEED = 20240611
GLOBAL_PROJECTION_SEED = 20240612


@lru_cache(maxsize=32)
def projection_matrix(in_dim: int, out_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
    matrix.setflags(write=False)
    return matrix


def area_pool(image: np.ndarray, grid: int) -> np.ndarray:
    """Resize a 2D array to grid x grid by area averaging."""
    image = np.ascontiguousarray(image, dtype=np.float32)
    if image.ndim != 2 or image.size == 0:
        raise GraphError(f"expected a non-empty 2D array, got shape {image.shape}")
    pooled = Image.fromarray(image).resize((grid, grid), Image.Resampling.BOX)
    return np.asarray(pooled, dtype=np.float64)


def l2_normalize(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    if norm == 0:
        return np.zeros_like(vector)
    return vector / norm


def toy_patch_features(patch: np.ndarray, d_feat: int) -> np.ndarray:
    pooled = area_pool(patch, PATCH_GRID).ravel()
    projection = projection_matrix(pooled.size, d_feat, PATCH_PROJECTION_SEED)
    return l2_normalize(pooled @ projection)


def toy_global_feature(
    image: Optional[np.ndarray] = None,
    precomputed: Optional[np.ndarray] = None,
    d_g: int = 128,
) -> np.ndarray:
    """Global image descriptor; a precomputed vector is passed through unchanged."""
    if precomputed is not None:
        return np.asarray(precomputed, dtype=np.float64).ravel()
    if image is None:
        raise GraphError("no global feature source: neither an image nor a precomputed vector")
    pooled = area_pool(image, GLOBAL_GRID).ravel()
    projection = projection_matrix(pooled.size, d_g, GLOBAL_PROJECTION_SEED)
    return l2_normalize(pooled @ projection)


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Load a grayscale image as an H x W float array.

    CFV1 files are read as matrices (rows = height); anything else goes
    through Pillow and is converted to 8-bit grayscale.
    """
    path = Path(path)
    if path.suffix.lower() == ".cfv":
        return load_feature_file(path).values.astype(np.float64)
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64)
