"""Coverage and size metrics for prediction sets."""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .conformal import calibrate
from .spline import IntervalUnion

log = logging.getLogger(__name__)

N_BUCKETS = 5
NORMALIZER_BINS = 20


class MetricsError(ValueError):
    pass


def covered(sets, truths) -> np.ndarray:
    sets = list(sets)
    truths = np.asarray(truths, dtype=np.float64)
    if len(sets) != truths.size:
        raise MetricsError(f"{len(sets)} sets but {truths.size} targets")
    return np.array([float(t) in s for s, t in zip(sets, truths)], dtype=bool)


def marginal_coverage(sets, truths) -> float:
    hits = covered(sets, truths)
    return float(hits.mean()) if hits.size else float("nan")


def normalization_constant(train_y, cal_y, alpha: float, bins: int = NORMALIZER_BINS) -> float:
    """Set size of an unconditional histogram conformalized on ``cal_y``.

    The histogram spans the train range with ``bins`` even bins; the score
    is the negative bin probability, so the set keeps every bin whose
    probability reaches the calibrated cutoff.
    """
    train_y = np.asarray(train_y, dtype=np.float64)
    cal_y = np.asarray(cal_y, dtype=np.float64)
    if train_y.size == 0 or cal_y.size == 0:
        raise MetricsError("normalization needs nonempty train and calibration targets")
    lo, hi = float(train_y.min()), float(train_y.max())
    if not hi > lo:
        raise MetricsError("degenerate target range")
    width = (hi - lo) / bins

    def index(y):
        return np.clip(np.floor((y - lo) / width), 0, bins - 1).astype(int)

    probs = np.bincount(index(train_y), minlength=bins) / train_y.size
    cal = calibrate(-probs[index(cal_y)], alpha, "HIST")
    return float(np.sum(probs >= -cal.q_hat) * width)


@dataclass
class LabelCoverage:
    buckets: list[float | None]
    worst: float
    edges: list[float]


def label_conditional_coverage(sets, truths, n_buckets: int = N_BUCKETS) -> LabelCoverage:
    """Coverage within equal-width buckets of the true target."""
    truths = np.asarray(truths, dtype=np.float64)
    if truths.size < n_buckets:
        raise MetricsError(f"need at least {n_buckets} samples")
    hits = covered(sets, truths)
    lo, hi = float(truths.min()), float(truths.max())
    edges = np.linspace(lo, hi, n_buckets + 1)
    if hi > lo:
        idx = np.clip(np.floor((truths - lo) / (hi - lo) * n_buckets), 0, n_buckets - 1).astype(int)
    else:
        idx = np.zeros(truths.size, dtype=int)
    buckets: list[float | None] = []
    for b in range(n_buckets):
        m = idx == b
        if m.any():
            buckets.append(float(hits[m].mean()))
        else:
            warnings.warn(f"label bucket {b} is empty; excluded from the minimum", stacklevel=2)
            buckets.append(None)
    worst = min(v for v in buckets if v is not None)
    return LabelCoverage(buckets, worst, edges.tolist())


@dataclass
class EvalReport:
    alpha: float
    kind: str
    split: str
    n: int
    coverage: float
    mean_size: float
    normalizer: float
    mean_normalized_size: float
    bucket_coverage: list = field(default_factory=list)
    worst_bucket_coverage: float = float("nan")
    q_hat: float = float("nan")
    clamped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_fmt)

    def to_csv(self) -> str:
        row = self.to_dict()
        buckets = row.pop("bucket_coverage")
        for i, v in enumerate(buckets):
            row[f"bucket_{i}"] = v
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([_fmt(v) for v in row.values()])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    if v is None:
        return ""
    return v


def evaluate(sets, truths, alpha: float, normalizer: float, kind: str = "", split: str = "test",
             q_hat: float = float("nan"), clamped: int = 0) -> EvalReport:
    """Aggregate per-sample sets (already in original target units)."""
    sets = list(sets)
    truths = np.asarray(truths, dtype=np.float64)
    sizes = np.array([s.size for s in sets])
    lc = label_conditional_coverage(sets, truths)
    mean_size = float(sizes.mean())
    return EvalReport(
        alpha=float(alpha), kind=kind, split=split, n=len(sets),
        coverage=marginal_coverage(sets, truths), mean_size=mean_size,
        normalizer=float(normalizer), mean_normalized_size=mean_size / normalizer,
        bucket_coverage=lc.buckets, worst_bucket_coverage=lc.worst, q_hat=float(q_hat),
        clamped=clamped,
    )


def unscale(sets, y_min: float, y_range: float) -> list[IntervalUnion]:
    """Map scaled-unit sets back to original target units."""
    out = []
    for s in sets:
        iu = s if isinstance(s, IntervalUnion) else s.intervals
        out.append(iu.affine(y_range, y_min))
    return out
