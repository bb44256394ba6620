"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .data import EpochSet


def check_epochs(X, n_channels=None, n_times=None, dtype=np.float32) -> np.ndarray:
    """Return ``X`` as a finite ``(n_epochs, C, T)`` array.

    Accepts an :class:`EpochSet`, a 3-D array, or a 4-D ``(N, 1, C, T)`` array.
    """
    if isinstance(X, EpochSet):
        X = X.data
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"expected epochs of shape (n_epochs, channels, times), got {X.shape}")
    if len(X) == 0:
        raise ValueError("no epochs given")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.shape[1]}")
    if n_times is not None and X.shape[2] != n_times:
        raise ValueError(f"expected {n_times} samples per epoch, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("epochs contain non-finite values")
    return X


def check_labels(y, n=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if n is not None and len(y) != n:
        raise ValueError(f"{len(y)} labels for {n} epochs")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 (unattended) or 1 (attended)")
    return y.astype(np.int64)


def check_paired(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("a paired test needs at least two pairs")
    return a, b
