"""Regression metrics. Correlations are ``None`` when a side has zero variance."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _pair(y_true, y_pred):
    a = np.asarray(y_true, dtype=np.float64)
    b = np.asarray(y_pred, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected two equal-length vectors, got {a.shape} and {b.shape}")
    return a, b


def rmse(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((b - a) ** 2)))


def pearson(a, b) -> float | None:
    a, b = _pair(a, b)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    ac = a - a.mean()
    bc = b - b.mean()
    den = np.sqrt((ac @ ac) * (bc @ bc))
    if den == 0 or not np.isfinite(den):
        return None
    return float(np.clip((ac @ bc) / den, -1.0, 1.0))


def spearman(a, b) -> float | None:
    """Pearson correlation of average (tie-aware) ranks."""
    a, b = _pair(a, b)
    return pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def regression_metrics(y_true, y_pred) -> dict:
    return {"rmse": rmse(y_true, y_pred), "pearson": pearson(y_true, y_pred), "spearman": spearman(y_true, y_pred)}
