"""Conformal scores, split-conformal calibration and prediction sets.

Three score kinds are supported:

* ``ND``   negative estimated density of y,
* ``HPD``  negative mass of the region where the density is at most f(y),
* ``HIST`` negative classifier probability of the bin containing y.

Targets are handled in the model's scaled [0, 1] units throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spline import (
    IntervalUnion,
    SplineDensity,
    density_eval,
    density_sup,
    level_set,
    mass_below_level,
)

KINDS = ("ND", "HPD", "HIST")
DEFAULT_BISECTION_STEPS = 24
# Alternative count some readers use; exposed as a preset.
SHORT_BISECTION_STEPS = 15


class CalibrationError(ValueError):
    pass


class UsageError(ValueError):
    pass


def _kind(kind: str) -> str:
    k = kind.upper().replace("SPICE-", "")
    if k not in KINDS:
        raise UsageError(f"unknown score kind {kind!r}")
    return k


@dataclass(frozen=True)
class Score:
    kind: str
    value: float


@dataclass(frozen=True)
class CalibrationResult:
    alpha: float
    q_hat: float
    n_cal: int
    kind: str

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "q_hat": self.q_hat, "n_cal": self.n_cal, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        return cls(float(d["alpha"]), float(d["q_hat"]), int(d["n_cal"]), _kind(d["kind"]))


@dataclass(frozen=True)
class PredictionSet:
    intervals: IntervalUnion
    bins: tuple[int, ...] | None = None

    @property
    def size(self) -> float:
        return self.intervals.size

    def __contains__(self, y) -> bool:
        return y in self.intervals


# --------------------------------------------------------------------------
# scores on a density


def nd_score(d: SplineDensity, y: float) -> float:
    return -float(density_eval(d, y))


def hpd_score(d: SplineDensity, y: float) -> float:
    return -mass_below_level(d, float(density_eval(d, y)))


def _clamp(y: float) -> float:
    return min(max(float(y), 0.0), 1.0)


def score_nd(model, x, y) -> Score:
    return Score("ND", nd_score(model.density(x), y))


def score_hpd(model, x, y) -> Score:
    return Score("HPD", hpd_score(model.density(x), y))


def score_hist(model, x, y) -> Score:
    p = model.probabilities(x)[0]
    return Score("HIST", -float(p[model.bin_index(np.atleast_1d(y))[0]]))


def batch_scores(model, kind: str, X, y) -> np.ndarray:
    """Scores for many samples; scaled targets are clamped into [0, 1]."""
    kind = _kind(kind)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
    if kind == "HIST":
        _require(model, "hist")
        p = model.probabilities(X)
        return -p[np.arange(len(y)), model.bin_index(y)]
    _require(model, "spline")
    fn = nd_score if kind == "ND" else hpd_score
    return np.array([fn(d, yi) for d, yi in zip(model.densities(X), y)])


def _require(model, kind: str) -> None:
    if getattr(model, "kind", None) != kind:
        raise UsageError(f"score needs a {kind} model, got {getattr(model, 'kind', type(model).__name__)}")


# --------------------------------------------------------------------------
# calibration


def calibrate(scores, alpha: float, kind: str = "ND") -> CalibrationResult:
    """Split-conformal cutoff: the k-th smallest score, k = ceil((N+1)(1-alpha))."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = s.size
    if n == 0:
        raise CalibrationError("no calibration scores")
    if not 0 < alpha < 1:
        raise CalibrationError(f"alpha must lie in (0, 1), got {alpha}")
    # guard the ceiling against representation error, e.g. 10 * 0.9
    k = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    q = math.inf if k > n else float(s[k - 1])
    return CalibrationResult(float(alpha), q, n, _kind(kind))


# --------------------------------------------------------------------------
# prediction sets


def nd_set(d: SplineDensity, q_hat: float) -> IntervalUnion:
    if q_hat > 0:
        return IntervalUnion.full()
    return level_set(d, -q_hat)


def hpd_bracket(d: SplineDensity, target_mass: float, steps: int = DEFAULT_BISECTION_STEPS):
    """Bisection on density levels.

    Keeps ``mass_below(lower) < target_mass <= mass_below(upper)`` and
    returns ``(lower, upper)`` after ``steps`` halvings of [0, sup].
    """
    if steps < 1:
        raise UsageError("bisection needs at least one step")
    lower, upper = 0.0, density_sup(d)
    for _ in range(steps):
        mid = 0.5 * (lower + upper)
        if mass_below_level(d, mid) < target_mass:
            lower = mid
        else:
            upper = mid
    return lower, upper


def hpd_set(d: SplineDensity, q_hat: float, steps: int = DEFAULT_BISECTION_STEPS) -> IntervalUnion:
    target = -q_hat
    if target <= 0:
        return IntervalUnion.full()
    lower, _ = hpd_bracket(d, target, steps)
    return level_set(d, lower)


def predict_set_nd(model, x, cal: CalibrationResult) -> PredictionSet:
    if cal.kind != "ND":
        raise UsageError(f"calibration kind {cal.kind} used for an ND set")
    return PredictionSet(nd_set(model.density(x), cal.q_hat))


def predict_set_hpd(model, x, cal: CalibrationResult, steps: int = DEFAULT_BISECTION_STEPS) -> PredictionSet:
    if cal.kind != "HPD":
        raise UsageError(f"calibration kind {cal.kind} used for an HPD set")
    return PredictionSet(hpd_set(model.density(x), cal.q_hat, steps))


def hist_set(probs, edges, q_hat: float) -> PredictionSet:
    """Bins whose probability reaches ``-q_hat``, merged into intervals."""
    probs = np.asarray(probs, dtype=np.float64)
    keep = np.flatnonzero(probs >= -q_hat)
    pieces = [(edges[i], edges[i + 1]) for i in keep]
    return PredictionSet(IntervalUnion.from_pieces(pieces, gap=1e-12), tuple(int(i) for i in keep))


def predict_set_hist(model, x, cal: CalibrationResult) -> PredictionSet:
    if cal.kind != "HIST":
        raise UsageError(f"calibration kind {cal.kind} used for a HIST set")
    return hist_set(model.probabilities(x)[0], model.edges, cal.q_hat)


def predict_sets(model, cal: CalibrationResult, X, steps: int = DEFAULT_BISECTION_STEPS) -> list[PredictionSet]:
    """Prediction sets for every row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if cal.kind == "HIST":
        _require(model, "hist")
        return [hist_set(p, model.edges, cal.q_hat) for p in model.probabilities(X)]
    _require(model, "spline")
    dens = model.densities(X)
    if cal.kind == "ND":
        return [PredictionSet(nd_set(d, cal.q_hat)) for d in dens]
    return [PredictionSet(hpd_set(d, cal.q_hat, steps)) for d in dens]
