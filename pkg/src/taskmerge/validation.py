"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .models import check_signal


def check_signals(X, cfg):
    """2-d float32 batch of finite signals in [-1, 1] long enough for ``cfg``."""
    X = check_array(X, dtype=np.float32, ensure_2d=False)
    if X.ndim == 1:
        X = X[None]
    if X.ndim != 2:
        raise ValueError(f"signals must be [n_samples, length], got shape {X.shape}")
    if np.abs(X).max(initial=0.0) > 1.0:
        raise ValueError("signals must lie in [-1, 1]")
    check_signal(cfg, X.shape[1])
    return X


def check_features(X):
    return check_array(X, dtype=np.float32)
