"""2D principal-component projection of embeddings for visual inspection."""
import csv
import logging
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)


class EmbeddingProjector(BaseEstimator, TransformerMixin):
    """
    Mean-centred projection onto the leading principal directions.

    Directions are found by power iteration on the covariance matrix with
    deflation. Each direction is signed so its first nonzero loading is
    positive. Input of rank 0 projects to zeros and sets `degenerate_`.

    Parameters
    ----------
    n_components : int
        Number of output coordinates.
    max_iter : int
        Power-iteration cap per component.
    tol : float
        Stop once successive direction estimates differ by less than this.
    random_state : int
        Seed of the starting vectors.
    """

    def __init__(self, n_components: int = 2, max_iter: int = 10000, tol: float = 1e-13, random_state: int = 0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        n_samples, n_features = X.shape
        if not 1 <= self.n_components <= n_features:
            raise ValueError(f"n_components must lie in [1, {n_features}], got {self.n_components}")

        self.mean_ = X.mean(axis=0)
        centred = X - self.mean_
        covariance = centred.T @ centred / (n_samples - 1)
        scale = max(float(np.trace(covariance)), 1.0)
        rng = np.random.default_rng(self.random_state)

        components = np.zeros((self.n_components, n_features))
        variances = np.zeros(self.n_components)
        residual = covariance.copy()
        for c in range(self.n_components):
            vector = self._leading_direction(residual, components[:c], rng)
            value = float(vector @ covariance @ vector)
            if value <= 1e-12 * scale:
                # nothing left to explain along new directions
                break
            nonzero = np.flatnonzero(np.abs(vector) > 1e-12)
            if nonzero.size and vector[nonzero[0]] < 0:
                vector = -vector
            components[c] = vector
            variances[c] = value
            residual = residual - value * np.outer(vector, vector)

        self.components_ = components
        self.explained_variance_ = variances
        self.degenerate_ = bool(variances[0] == 0.0)
        if self.degenerate_:
            logger.warning("All embeddings are identical; projection is all zeros")
        return self

    def _leading_direction(self, matrix: np.ndarray, previous: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        vector = rng.standard_normal(matrix.shape[0])
        for _ in range(self.max_iter):
            vector = vector - previous.T @ (previous @ vector)
            norm = np.linalg.norm(vector)
            if norm == 0:
                return vector
            vector = vector / norm
            updated = matrix @ vector
            updated = updated - previous.T @ (previous @ updated)
            updated_norm = np.linalg.norm(updated)
            if updated_norm == 0:
                return vector
            updated = updated / updated_norm
            if np.linalg.norm(updated - vector) < self.tol:
                return updated
            vector = updated
        logger.debug(f"power iteration hit max_iter={self.max_iter}")
        return vector

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T


def pca_project(embeddings: np.ndarray, out_dim: int = 2, seed: int = 0) -> Tuple[np.ndarray, EmbeddingProjector]:
    projector = EmbeddingProjector(n_components=out_dim, random_state=seed)
    return projector.fit_transform(embeddings), projector


def write_projection_csv(
    path: Union[str, Path],
    rows: Iterable[Tuple[str, str, float, float]],
    state: str,
    projector: Optional[EmbeddingProjector] = None,
) -> int:
    """Write `id,modality,x,y` rows after a comment line naming the projection.

    Returns the number of data rows written.
    """
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as handle:
        comment = f"# PCA projection of {state} embeddings"
        if projector is not None:
            comment += f"; explained variance {', '.join(f'{v:.6g}' for v in projector.explained_variance_)}"
        handle.write(comment + "\n")
        writer = csv.writer(handle)
        writer.writerow(["id", "modality", "x", "y"])
        for identity, modality, x, y in rows:
            writer.writerow([identity, modality, f"{x:.8g}", f"{y:.8g}"])
            count += 1
    return count
