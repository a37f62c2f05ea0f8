"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from ..exceptions import ShapeError


def check_images(X, name: str = "X", multiple: int = 1, dtype=np.float32) -> np.ndarray:
    """Return ``X`` as a finite (n, C, H, W) array of ``dtype``.

    A single (C, H, W) image is promoted to a batch of one.  ``multiple``
    requires both spatial sides to be divisible by it.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"{name} must be (n, C, H, W), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError(f"{name} is empty")
    if not np.issubdtype(X.dtype, np.number) and X.dtype != bool:
        raise TypeError(f"{name} must be numeric, got {X.dtype}")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    if multiple > 1 and (X.shape[2] % multiple or X.shape[3] % multiple):
        raise ShapeError(f"{name} spatial size {X.shape[2:]} is not divisible by {multiple}")
    return X


def check_labels(y, X: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    """Return ``y`` as an (n, H, W) int64 label array aligned with images ``X``."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ShapeError(f"labels of shape {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise ValueError("labels must be integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    if n_classes is not None and y.max() >= n_classes:
        raise ValueError(f"label {int(y.max())} out of range for {n_classes} classes")
    return y


def check_attention(A, X: np.ndarray, heads: int | None = None) -> np.ndarray:
    A = check_images(A, "attention")
    if A.shape[0] != X.shape[0] or A.shape[2:] != X.shape[2:]:
        raise ShapeError(f"attention maps {A.shape} do not align with images {X.shape}")
    if heads is not None and A.shape[1] != heads:
        raise ShapeError(f"expected {heads} attention channels, got {A.shape[1]}")
    return A
