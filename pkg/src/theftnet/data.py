"""Consumption records, CSV I/O, imputation, standardisation, synthetic data."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ImputationError, ParseError, StandardizationError

DAYS = 365
HEADER = ["user_id", "label"] + [f"d{i:03d}" for i in range(1, DAYS + 1)]
THEFT_PATTERNS = ("scale", "zero_days", "cap")


@dataclass(eq=False)
class ConsumptionRecord:
    user_id: str
    label: int
    readings: np.ndarray  # kWh/day, NaN where missing
    missing_mask: np.ndarray

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=np.float64)
        if self.missing_mask is None:
            self.missing_mask = np.isnan(self.readings)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.readings.shape != (DAYS,) or self.missing_mask.shape != (DAYS,):
            raise ConfigurationError(f"{self.user_id}: a record holds exactly {DAYS} daily readings")
        if self.label not in (0, 1):
            raise ConfigurationError(f"{self.user_id}: label must be 0 or 1")

    @property
    def observed(self) -> int:
        return int(DAYS - self.missing_mask.sum())


@dataclass
class Dataset:
    records: list[ConsumptionRecord]
    provenance: str = "external-csv"
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.user_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("user ids must be unique")

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def readings(self) -> np.ndarray:
        return np.stack([r.readings for r in self.records]) if self.records else np.zeros((0, DAYS))


# ---------------------------------------------------------------------------
# CSV


def _parse_cell(cell: str, row: int, col: str) -> float:
    s = cell.strip()
    if s == "" or s.lower() == "nan":
        return math.nan
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"column {col}: non-numeric reading {cell!r}", row) from None
    if not math.isfinite(v):
        raise ParseError(f"column {col}: non-finite reading {cell!r}", row)
    return v


def read_csv_text(text: str) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    if [h.strip() for h in header] != HEADER:
        raise ParseError(f"header must be user_id,label,d001..d{DAYS:03d} ({len(HEADER)} columns), "
                         f"got {len(header)} columns", 1)
    records, seen = [], set()
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(HEADER):
            raise ParseError(f"expected {len(HEADER)} columns, got {len(row)}", row_no)
        uid = row[0].strip()
        if not uid:
            raise ParseError("empty user_id", row_no)
        if uid in seen:
            raise ParseError(f"duplicate user_id {uid!r}", row_no)
        seen.add(uid)
        if row[1].strip() not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {row[1]!r}", row_no)
        values = np.array([_parse_cell(c, row_no, HEADER[i + 2]) for i, c in enumerate(row[2:])])
        records.append(ConsumptionRecord(uid, int(row[1]), values, np.isnan(values)))
    return Dataset(records, "external-csv")


def load_csv(path) -> Dataset:
    with open(path, encoding="utf-8", newline="") as f:
        ds = read_csv_text(f.read())
    meta = Path(str(path) + ".meta.json")
    if meta.exists():
        info = json.loads(meta.read_text(encoding="utf-8"))
        ds.provenance = info.get("provenance", ds.provenance)
        ds.seed = info.get("seed")
        ds.params = info.get("params", {})
    return ds


def dataset_to_csv(ds: Dataset) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(HEADER)
    for r in ds.records:
        cells = ["" if m else repr(float(v)) for v, m in zip(r.readings, r.missing_mask)]
        w.writerow([r.user_id, r.label, *cells])
    return out.getvalue()


def save_csv(ds: Dataset, path) -> None:
    """Write the CSV plus a ``<path>.meta.json`` sidecar with provenance and generator settings."""
    from .models import atomic_write

    atomic_write(path, dataset_to_csv(ds).encode("utf-8"))
    meta = {"provenance": ds.provenance, "seed": ds.seed, "params": ds.params, "n_users": len(ds),
            "n_theft": int(ds.labels.sum())}
    atomic_write(str(path) + ".meta.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# imputation


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / diff.prod(axis=1)


def barycentric_eval(nodes, values, t: float) -> float:
    """Evaluate the interpolating polynomial through (nodes, values) at t."""
    nodes = np.asarray(nodes, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    d = t - nodes
    hit = np.flatnonzero(d == 0)
    if hit.size:
        return float(values[hit[0]])
    q = barycentric_weights(nodes) / d
    return float(np.dot(q, values) / q.sum())


def stencil(observed_idx: np.ndarray, t: int, size: int = 4) -> np.ndarray:
    """The ``size`` observed indices nearest to t: half on each side when possible."""
    pos = np.searchsorted(observed_idx, t)
    left = observed_idx[:pos]
    right = observed_idx[pos:]
    half = size // 2
    n_left = min(len(left), max(half, size - len(right)))
    n_right = size - n_left
    return np.concatenate([left[len(left) - n_left:], right[:n_right]])


def impute_missing(r: ConsumptionRecord) -> ConsumptionRecord:
    """Fill gaps by 4-point local barycentric Lagrange interpolation on observed days."""
    if not r.missing_mask.any():
        return ConsumptionRecord(r.user_id, r.label, r.readings.copy(), np.zeros(DAYS, bool))
    observed = np.flatnonzero(~r.missing_mask)
    if observed.size < 4:
        raise ImputationError(f"{r.user_id}: need at least 4 observed readings, have {observed.size}")
    filled = r.readings.copy()
    for t in np.flatnonzero(r.missing_mask):
        nodes = stencil(observed, t)
        filled[t] = barycentric_eval(nodes, r.readings[nodes], float(t))
    return ConsumptionRecord(r.user_id, r.label, filled, np.zeros(DAYS, bool))


def zscore(r: ConsumptionRecord) -> ConsumptionRecord:
    if r.missing_mask.any():
        raise StandardizationError(f"{r.user_id}: impute before standardising")
    x = r.readings
    mu = x.mean()
    sd = x.std()
    if not sd > 1e-12:
        raise StandardizationError(f"{r.user_id}: zero-variance series cannot be standardised")
    return ConsumptionRecord(r.user_id, r.label, (x - mu) / sd, np.zeros(DAYS, bool))


def preprocess(ds: Dataset, standardize=True):
    """Impute then (optionally) z-score every record.

    Returns ``(X, y, ids, excluded)`` where ``excluded`` maps user ids to the
    reason they were dropped (imputation or standardisation failure).
    """
    rows, labels, ids, excluded = [], [], [], {}
    for r in ds.records:
        try:
            r2 = impute_missing(r)
            if standardize:
                r2 = zscore(r2)
        except (ImputationError, StandardizationError) as e:
            excluded[r.user_id] = str(e)
            continue
        rows.append(r2.readings)
        labels.append(r.label)
        ids.append(r.user_id)
    X = np.stack(rows) if rows else np.zeros((0, DAYS))
    return X, np.array(labels, dtype=np.int64), ids, excluded


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticUser:
    honest: np.ndarray
    observed: np.ndarray  # after any theft pattern, before missing-value injection
    label: int
    onset: int | None
    pattern: str | None


def _simulate_user(rng: np.random.Generator, theft: bool) -> SyntheticUser:
    t = np.arange(DAYS)
    base = rng.uniform(2, 30)
    a_w = rng.uniform(0.05, 0.3)
    a_s = rng.uniform(0.1, 0.5)
    phi, psi = rng.uniform(0, 2 * np.pi, size=2)
    noise = rng.normal(0.0, 0.05 * base, size=DAYS)
    honest = base * (1 + a_w * np.sin(2 * np.pi * t / 7 + phi) + a_s * np.sin(2 * np.pi * t / DAYS + psi)) + noise
    honest = np.maximum(honest, 0.0)
    if not theft:
        return SyntheticUser(honest, honest.copy(), 0, None, None)

    onset = int(rng.integers(60, 301))
    pattern = THEFT_PATTERNS[int(rng.integers(len(THEFT_PATTERNS)))]
    out = honest.copy()
    if pattern == "scale":
        out[onset:] *= rng.uniform(0.2, 0.8)
    elif pattern == "zero_days":
        k = int(rng.integers(1, 4))
        for week in range(onset, DAYS, 7):
            days = np.arange(week, min(week + 7, DAYS))
            out[rng.choice(days, size=min(k, days.size), replace=False)] = 0.0
    else:
        cap = np.percentile(honest, rng.uniform(20, 60))
        out[onset:] = np.minimum(out[onset:], cap)
    return SyntheticUser(honest, out, 1, onset, pattern)


def simulate_population(n_users: int, theft_fraction: float, seed: int) -> list[SyntheticUser]:
    """Honest and tampered series for every user; exactly round(n * fraction) thieves."""
    rng = np.random.default_rng(seed)
    n_theft = int(round(n_users * theft_fraction))
    is_theft = np.zeros(n_users, dtype=bool)
    is_theft[rng.permutation(n_users)[:n_theft]] = True
    return [_simulate_user(rng, bool(flag)) for flag in is_theft]


def generate_synthetic(n_users: int, theft_fraction: float, p_missing: float, seed: int) -> Dataset:
    if n_users < 10:
        raise ConfigurationError("n_users must be >= 10")
    if not 0 <= theft_fraction < 1:
        raise ConfigurationError("theft_fraction must lie in [0, 1)")
    if not 0 <= p_missing <= 0.2:
        raise ConfigurationError("p_missing must lie in [0, 0.2]")
    users = simulate_population(n_users, theft_fraction, seed)
    miss_rng = np.random.default_rng([seed, 1])
    records = []
    for i, u in enumerate(users):
        mask = miss_rng.random(DAYS) < p_missing
        while DAYS - mask.sum() < 4:  # keep every record imputable
            mask = miss_rng.random(DAYS) < p_missing
        readings = np.where(mask, np.nan, u.observed)
        records.append(ConsumptionRecord(f"u{i:05d}", u.label, readings, mask))
    params = {"n_users": n_users, "theft_fraction": theft_fraction, "p_missing": p_missing}
    return Dataset(records, "synthetic", seed, params)
