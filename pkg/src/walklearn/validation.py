"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, image_shape=None):
    """Coerce to a float64 (N, H, W, C) array with finite values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, H, W, C), got {X.shape}")
    if image_shape is not None and X.shape[1:] != tuple(image_shape):
        raise ValueError(f"image shape {X.shape[1:]} does not match {tuple(image_shape)}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_features(X):
    return check_array(X, dtype=np.float64, ensure_all_finite=True)


def check_binary_labels(y, n_rows, multi=False):
    y = np.asarray(y)
    if not multi and y.ndim != 1:
        raise ValueError(f"expected 1-D labels, got shape {y.shape}")
    if multi and y.ndim == 1:
        y = y[:, None]
    if len(y) != n_rows:
        raise ValueError(f"{len(y)} labels for {n_rows} rows")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be binary (0/1)")
    return y.astype(np.int64)


def check_labels(y, n_rows, n_classes):
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise ValueError(f"expected {n_rows} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= n_classes or not np.all(y == np.round(y))):
        raise ValueError(f"labels must be integers in 0..{n_classes - 1}")
    return y.astype(np.int64)
