"""
Accuracy and calibration metrics.

MAE is averaged per test case and reported as mean and std over cases.
Coverage counts node-channel entries with |truth - mean| <= k * std, pooled
over all cases. Zero-std entries are covered only when the error is zero,
which the inclusive bound gives for free.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeMismatchError
from .geometry import Field

ArrayLike = Union[Field, np.ndarray, float]


def _values(x: ArrayLike) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, Field) else x, dtype=np.float64)


@dataclass(frozen=True)
class CaseScore:
    mae: float
    n: int
    within1: int
    within2: int


def score_case(truth: ArrayLike, mean: ArrayLike, std: ArrayLike) -> CaseScore:
    t, m, s = _values(truth), _values(mean), _values(std)
    if t.shape != m.shape or t.shape != s.shape:
        raise ShapeMismatchError("compute_metrics", f"truth {t.shape}, mean {m.shape}, std {s.shape}")
    if np.any(s < 0):
        raise ValueError("posterior std must be >= 0")
    err = np.abs(t - m)
    return CaseScore(
        mae=float(err.mean()) if err.size else 0.0,
        n=int(err.size),
        within1=int(np.count_nonzero(err <= s)),
        within2=int(np.count_nonzero(err <= 2.0 * s)),
    )


def compute_metrics(truth: ArrayLike, mean: ArrayLike, std: ArrayLike) -> Tuple[float, float, float]:
    """(MAE, 1-std coverage %, 2-std coverage %) for one case."""
    sc = score_case(truth, mean, std)
    if sc.n == 0:
        return 0.0, 100.0, 100.0
    return sc.mae, 100.0 * sc.within1 / sc.n, 100.0 * sc.within2 / sc.n


@dataclass(frozen=True)
class MetricsRow:
    method: str
    target: str
    mae_mean: float
    mae_std: float
    cov1: float
    cov2: float
    n_cases: int
    train_seconds: Optional[float] = None
    predict_seconds: Optional[float] = None

    def __post_init__(self):
        if self.mae_mean < 0 or self.mae_std < 0:
            raise ValueError("MAE must be >= 0")
        for c in (self.cov1, self.cov2):
            if not 0.0 <= c <= 100.0:
                raise ValueError(f"coverage {c} outside [0, 100]")


# wall-times live in a separate table so metrics.csv is reproducible byte for byte
TIMING_FIELDS = ("train_seconds", "predict_seconds")
METRICS_HEADER = [f.name for f in fields(MetricsRow) if f.name not in TIMING_FIELDS]
TIMING_HEADER = ["method", "target", *TIMING_FIELDS]
METRIC_COLUMNS = {"mae": ("mae_mean", "mae_std"), "cov1": ("cov1",), "cov2": ("cov2",)}


def metrics_header(metrics: Sequence[str] = tuple(METRIC_COLUMNS)) -> List[str]:
    """METRICS_HEADER restricted to the selected metrics; identity columns always stay."""
    unknown = set(metrics) - set(METRIC_COLUMNS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    chosen = {c for m in metrics for c in METRIC_COLUMNS[m]}
    dropped = {c for cols in METRIC_COLUMNS.values() for c in cols} - chosen
    return [name for name in METRICS_HEADER if name not in dropped]


def aggregate(method: str, target: str, scores: Sequence[CaseScore], train_seconds: Optional[float] = None,
              predict_seconds: Optional[float] = None) -> MetricsRow:
    if not scores:
        raise ValueError(f"no scored cases for {method}/{target}")
    maes = np.array([s.mae for s in scores])
    n = sum(s.n for s in scores)
    cov1 = 100.0 * sum(s.within1 for s in scores) / n if n else 100.0
    cov2 = 100.0 * sum(s.within2 for s in scores) / n if n else 100.0
    return MetricsRow(method, target, float(maes.mean()), float(maes.std()), cov1, cov2, len(scores),
                      train_seconds, predict_seconds)


def _fmt(v) -> str:
    # repr-free, locale-independent
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".6e")


def _table(rows: Iterable[MetricsRow], header: List[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(getattr(row, name)) for name in header])
    return buf.getvalue()


def metrics_csv(rows: Iterable[MetricsRow], metrics: Sequence[str] = tuple(METRIC_COLUMNS)) -> str:
    return _table(rows, metrics_header(metrics))


def timings_csv(rows: Iterable[MetricsRow]) -> str:
    return _table(rows, TIMING_HEADER)


def write_metrics_csv(rows: Iterable[MetricsRow], path, metrics: Sequence[str] = tuple(METRIC_COLUMNS)) -> None:
    Path(path).write_text(metrics_csv(rows, metrics), encoding="utf-8", newline="")


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
