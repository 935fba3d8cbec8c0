"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .core import NUM_STAGES, FeatureSequence, ShapeMismatch, StagePropError, StageSequence

__all__ = ["as_feature_matrix", "as_label_vector", "check_aligned"]


def as_feature_matrix(features) -> np.ndarray:
    """Return a finite float64 ``(timesteps, dim)`` array."""
    if isinstance(features, FeatureSequence):
        return features.data
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeMismatch(f"expected a non-empty (timesteps, dim) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise StagePropError("features contain non-finite values")
    return x


def as_label_vector(labels) -> np.ndarray:
    if isinstance(labels, StageSequence):
        return labels.labels
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ShapeMismatch(f"expected a 1-D label vector, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= NUM_STAGES or not np.all(y == np.round(y))):
        raise StagePropError("stage labels must be integers in 0..5")
    return y.astype(np.int64)


def check_aligned(x: np.ndarray, y: np.ndarray) -> None:
    if len(x) != len(y):
        raise ShapeMismatch(f"{len(x)} timesteps of features but {len(y)} labels")
