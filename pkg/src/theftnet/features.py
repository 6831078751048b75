"""Handcrafted statistics for the tree baselines.

43 features per user: five summary statistics over the most recent 30, 60,
90, 180 and 365 days (25), the means of twelve 30-day "months" covering the
most recent 360 days (12), and six statistics of those monthly means (6).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .data import DAYS

WINDOWS = (30, 60, 90, 180, 365)
WINDOW_STATS = ("max", "min", "mean", "var", "median")
MONTH_DAYS = 30
N_MONTHS = 12
MONTHLY_STATS = ("max", "min", "var", "median", "skew", "divergence")

FEATURE_NAMES = tuple(
    [f"last{w}_{s}" for w in WINDOWS for s in WINDOW_STATS]
    + [f"month{m:02d}_mean" for m in range(1, N_MONTHS + 1)]
    + [f"monthly_{s}" for s in MONTHLY_STATS]
)
N_FEATURES = len(FEATURE_NAMES)


@dataclass
class FeatureVector:
    values: np.ndarray
    names: tuple[str, ...] = FEATURE_NAMES
    flags: list[str] = field(default_factory=list)


def lower_median(x) -> float:
    s = np.sort(np.asarray(x, dtype=np.float64))
    return float(s[(len(s) - 1) // 2])


def _series(r) -> np.ndarray:
    x = np.asarray(getattr(r, "readings", r), dtype=np.float64)
    if x.shape != (DAYS,):
        raise ValueError(f"expected {DAYS} readings, got {x.shape}")
    if getattr(r, "missing_mask", None) is not None and np.any(r.missing_mask):
        raise ValueError("features need an imputed record")
    return x


def extract_window_stats(r) -> np.ndarray:
    x = _series(r)
    out = []
    for w in WINDOWS:
        seg = x[-w:]
        out += [seg.max(), seg.min(), seg.mean(), seg.var(), lower_median(seg)]
    return np.array(out)


def monthly_averages(r) -> np.ndarray:
    """Twelve 30-day block means, oldest first; the oldest 5 days are unused."""
    x = _series(r)
    return x[DAYS - N_MONTHS * MONTH_DAYS:].reshape(N_MONTHS, MONTH_DAYS).mean(axis=1)


def monthly_stats(m, flags: list[str] | None = None) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    mu = m.mean()
    var = m.var()
    sd = np.sqrt(var)
    degenerate = sd <= 1e-12 * max(1.0, abs(mu))
    skew = 0.0 if degenerate else float(np.mean((m - mu) ** 3) / sd**3)
    if mu == 0:
        divergence = 0.0
        if flags is not None:
            flags.append("divergence_zero_mean")
    else:
        divergence = 0.0 if degenerate else float(sd / mu)
    return np.array([m.max(), m.min(), var, lower_median(m), skew, divergence])


def extract_features(r) -> FeatureVector:
    flags: list[str] = []
    months = monthly_averages(r)
    values = np.concatenate([extract_window_stats(r), months, monthly_stats(months, flags)])
    return FeatureVector(values, FEATURE_NAMES, flags)


def feature_matrix(series: np.ndarray) -> np.ndarray:
    """Features for every row of an imputed ``[n, 365]`` array."""
    return np.stack([extract_features(row).values for row in series]) if len(series) else np.zeros((0, N_FEATURES))


def feature_matrix_csv(X: np.ndarray, y) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([*FEATURE_NAMES, "label"])
    for row, label in zip(X, y):
        w.writerow([repr(float(v)) for v in row] + [int(label)])
    return out.getvalue()
