"""Input validation helpers used across the public API."""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError


def as_matrix(x, name: str = "x", n_cols: int | None = None) -> np.ndarray:
    """Coerce array-like input to a finite 2-D float64 array.

    Torch tensors are detached and copied. Raises ShapeError on wrong
    dimensionality or column count, NumericError on NaN/inf entries.
    """
    if hasattr(x, "detach"):  # torch tensor without importing torch here
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ShapeError(f"{name} must have at least one row")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise ShapeError(
            f"{name} must have {n_cols} columns, got {arr.shape[1]}"
        )
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def as_vector(x, name: str = "x", size: int | None = None) -> np.ndarray:
    """Coerce array-like input to a finite 1-D float64 array."""
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise ShapeError(f"{name} must have length {size}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} must have equal shapes, got {a.shape} vs {b.shape}")
