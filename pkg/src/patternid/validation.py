"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from patternid.errors import DataError


def check_image_stack(X) -> np.ndarray:
    """Coerce X to a (N, H, W) uint8 stack of gray images."""
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise DataError(f"expected (N, H, W) image stack, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError("image stack is empty")
    if arr.dtype == np.uint8:
        return arr
    if not np.issubdtype(arr.dtype, np.number):
        raise DataError(f"image stack must be numeric, got dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() > 255:
        raise DataError("image values must lie in [0, 255]")
    return arr.astype(np.uint8)


def check_labels(y, n: int) -> list[str]:
    """Coerce labels to per-row individual-id strings of length n."""
    labels = [str(v) for v in np.asarray(y).reshape(-1)]
    if len(labels) != n:
        raise DataError(f"got {len(labels)} labels for {n} images")
    return labels


def check_embedding_matrix(X, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"expected (N, D) embedding matrix, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DataError(f"embedding width {arr.shape[1]} does not match expected {dim}")
    return arr
