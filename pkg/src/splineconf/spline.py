"""Zero-truncated piecewise-polynomial densities on [0, 1].

Each segment ``[t_i, t_{i+1}]`` carries the Lagrange polynomial through its
evenly spaced interpolation points.  Internally a segment is stored in the
local coordinate ``s = (y - t_i) / (t_{i+1} - t_i)``, where it reads
``A s^2 + B s + C``; the global coefficients ``a y^2 + b y + c`` are derived
on request.  Working locally keeps narrow segments well conditioned.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Discriminants below this are treated as "no real roots".
DISC_TOL = 1e-12
# Intervals shorter than this are noise from root clipping.
MIN_INTERVAL = 1e-12
DENSITY_FLOOR_Z = 1e-30

# Instrumentation for the per-segment work done by level-set queries.
segment_visits = {"count": 0}


class SplineError(ValueError):
    """Invalid spline configuration or degenerate density."""


# --------------------------------------------------------------------------
# interval unions


@dataclass(frozen=True)
class IntervalUnion:
    """Sorted, disjoint closed intervals inside [0, 1] (or any line segment)."""

    intervals: tuple[tuple[float, float], ...] = ()

    @classmethod
    def from_pieces(cls, pieces: Sequence[tuple[float, float]], gap: float = MIN_INTERVAL):
        merged: list[list[float]] = []
        for a, b in sorted((float(a), float(b)) for a, b in pieces):
            if b - a < MIN_INTERVAL:
                continue
            if merged and a - merged[-1][1] < gap:
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b])
        return cls(tuple((a, b) for a, b in merged))

    @classmethod
    def full(cls, lo: float = 0.0, hi: float = 1.0):
        return cls(((float(lo), float(hi)),))

    @property
    def count(self) -> int:
        return len(self.intervals)

    @property
    def size(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    def __contains__(self, y: float) -> bool:
        for a, b in self.intervals:
            if a <= y <= b:
                return True
        return False

    def __iter__(self):
        return iter(self.intervals)

    def __len__(self):
        return len(self.intervals)

    def affine(self, scale: float, shift: float) -> "IntervalUnion":
        """Map every endpoint through ``y -> scale * y + shift`` (scale > 0)."""
        return IntervalUnion(tuple((scale * a + shift, scale * b + shift) for a, b in self.intervals))

    def as_list(self) -> list[list[float]]:
        return [[a, b] for a, b in self.intervals]


# --------------------------------------------------------------------------
# construction helpers


def knot_positions(raw_widths, K: int, eps: float) -> np.ndarray:
    """Sorted knots from K-1 unnormalized widths.

    Widths are softmaxed, floored at ``eps`` and accumulated; the final
    knot is pinned at exactly one.
    """
    raw = np.asarray(raw_widths, dtype=np.float64)
    if K < 2:
        raise SplineError(f"need at least 2 knots, got K={K}")
    if raw.shape[-1] != K - 1:
        raise SplineError(f"expected {K - 1} raw widths, got {raw.shape[-1]}")
    if not 0 <= eps < 1.0 / K:
        raise SplineError(f"minimum spacing eps={eps} must lie in [0, 1/K)")
    e = np.exp(raw - raw.max(axis=-1, keepdims=True))
    v = e / e.sum(axis=-1, keepdims=True)
    w = eps + (1.0 - eps * K) * v
    cum = np.cumsum(w, axis=-1)
    zeros = np.zeros(raw.shape[:-1] + (1,))
    pos = np.concatenate([zeros, cum], axis=-1)
    pos[..., -1] += eps
    pos[..., -1] = 1.0  # removes the last-ulp drift of the cumulative sum
    return pos


def intermediate_grid(positions, n: int) -> np.ndarray:
    """Evenly spaced interpolation points, shape (K-1, n+1)."""
    t = np.asarray(positions, dtype=np.float64)
    j = np.arange(n + 1) / n
    return t[:-1, None] + j[None, :] * (t[1:] - t[:-1])[:, None]


def lagrange_coefficients(points, heights) -> tuple[float, float, float]:
    """Global (a, b, c) of the degree <= n interpolant through the points."""
    x = np.asarray(points, dtype=np.float64)
    h = np.asarray(heights, dtype=np.float64)
    if x.shape != h.shape or x.size not in (2, 3):
        raise SplineError("need 2 or 3 interpolation points with matching heights")
    if np.min(np.abs(np.subtract.outer(x, x))[~np.eye(x.size, dtype=bool)]) == 0:
        raise SplineError("coincident interpolation points (degenerate segment)")
    if x.size == 2:
        b = (h[1] - h[0]) / (x[1] - x[0])
        return 0.0, float(b), float(h[0] - b * x[0])
    a = b = c = 0.0
    for i in range(3):
        xj, xk = np.delete(x, i)
        denom = (x[i] - xj) * (x[i] - xk)
        a += h[i] / denom
        b += -h[i] * (xj + xk) / denom
        c += h[i] * xj * xk / denom
    return float(a), float(b), float(c)


def _local_coeffs(h0, hm, h1):
    """Local quadratic through (0, h0), (1/2, hm), (1, h1)."""
    A = 2.0 * h0 - 4.0 * hm + 2.0 * h1
    B = -3.0 * h0 + 4.0 * hm - h1
    return A, B, h0


def _quad_roots(A, B, C):
    """Real roots r1 <= r2 of A s^2 + B s + C, vectorized.

    Returns ``(r1, r2, has)``.  Linear segments report their single root
    twice.  Uses the cancellation-free form q = -(B + sign(B) sqrt(disc)) / 2.
    """
    A, B, C = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (A, B, C)))
    r1 = np.zeros(A.shape)
    r2 = np.zeros(A.shape)
    has = np.zeros(A.shape, dtype=bool)
    scale = np.maximum(np.maximum(np.abs(A), np.abs(B)), np.abs(C))
    lin = np.abs(A) <= 1e-14 * np.maximum(scale, 1e-300)
    # linear (or constant) pieces
    lin_root = lin & (np.abs(B) > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.where(lin_root, -C / np.where(B == 0, 1.0, B), 0.0)
    r1 = np.where(lin_root, root, r1)
    r2 = np.where(lin_root, root, r2)
    has |= lin_root
    quad = ~lin
    disc = B * B - 4.0 * A * C
    ok = quad & (disc > DISC_TOL)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    sgn = np.where(B >= 0, 1.0, -1.0)
    q = -0.5 * (B + sgn * sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        x1 = np.where(ok, q / np.where(A == 0, 1.0, A), 0.0)
        x2 = np.where(ok & (q != 0), C / np.where(q == 0, 1.0, q), x1)
    r1 = np.where(ok, np.minimum(x1, x2), r1)
    r2 = np.where(ok, np.maximum(x1, x2), r2)
    has |= ok
    return r1, r2, has


def sign_pieces(A, B, C):
    """Split [0, 1] at the clipped real roots of ``A s^2 + B s + C``.

    Returns ``(bounds, positive)``: ``bounds`` has shape (..., 4) with
    ``0 <= s1 <= s2 <= 1`` bracketed by 0 and 1, and ``positive`` (..., 3)
    flags the pieces on which the polynomial is > 0.
    """
    A, B, C = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (A, B, C)))
    r1, r2, has = _quad_roots(A, B, C)
    s1 = np.where(has, np.clip(r1, 0.0, 1.0), 0.0)
    s2 = np.where(has, np.clip(r2, 0.0, 1.0), 0.0)
    bounds = np.stack([np.zeros(A.shape), s1, s2, np.ones(A.shape)], axis=-1)
    mids = 0.5 * (bounds[..., :-1] + bounds[..., 1:])
    vals = A[..., None] * mids**2 + B[..., None] * mids + C[..., None]
    lengths = bounds[..., 1:] - bounds[..., :-1]
    positive = (vals > 0) & (lengths > 0)
    return bounds, positive


def _antideriv(A, B, C, s):
    return ((A / 3.0 * s + B / 2.0) * s + C) * s


def _positive_mass_local(A, B, C):
    """∫_0^1 max(A s^2 + B s + C, 0) ds, vectorized."""
    bounds, positive = sign_pieces(A, B, C)
    A_, B_, C_ = (np.asarray(v)[..., None] for v in (A, B, C))
    piece = _antideriv(A_, B_, C_, bounds[..., 1:]) - _antideriv(A_, B_, C_, bounds[..., :-1])
    return np.where(positive, piece, 0.0).sum(axis=-1)


def segment_mass(coeffs, lo: float, hi: float) -> float:
    """∫_lo^hi max(a y^2 + b y + c, 0) dy for global coefficients."""
    if not lo < hi:
        raise SplineError(f"segment_mass needs lo < hi, got [{lo}, {hi}]")
    a, b, c = coeffs
    w = hi - lo
    # re-express in s = (y - lo) / w
    A = a * w * w
    B = (2.0 * a * lo + b) * w
    C = a * lo * lo + b * lo + c
    return float(w * _positive_mass_local(A, B, C))


def trapezoid_mass(lo: float, hi: float, h_lo: float, h_hi: float) -> float:
    return 0.5 * (hi - lo) * (h_lo + h_hi)


# --------------------------------------------------------------------------
# the density


@dataclass(frozen=True, eq=False)
class SplineDensity:
    degree: int
    positions: np.ndarray          # (K,)
    heights: np.ndarray            # (K,) endpoint heights
    mid_heights: np.ndarray | None  # (K-1,) for degree 2
    A: np.ndarray                  # (K-1,) local coefficients
    B: np.ndarray
    C: np.ndarray
    Z: float
    eps: float = 0.0
    _widths: np.ndarray = field(repr=False, default=None)

    @property
    def K(self) -> int:
        return self.positions.size

    @property
    def widths(self) -> np.ndarray:
        return self._widths

    @property
    def grid(self) -> np.ndarray:
        return intermediate_grid(self.positions, self.degree)

    @property
    def coefficients(self) -> np.ndarray:
        """Global (a, b, c) per segment, shape (K-1, 3)."""
        t, w = self.positions[:-1], self.widths
        a = self.A / w**2
        b = self.B / w - 2.0 * a * t
        c = self.C - self.B * t / w + self.A * t**2 / w**2
        return np.stack([a, b, c], axis=1)

    def segment_masses(self) -> np.ndarray:
        if self.degree == 1:
            return 0.5 * self.widths * (self.heights[:-1] + self.heights[1:])
        return self.widths * _positive_mass_local(self.A, self.B, self.C)

    def __call__(self, y):
        return density_eval(self, y)


def build_density(positions, heights, n: int, mid_heights=None, eps: float = 0.0) -> SplineDensity:
    """Assemble and normalize a zero-truncated spline density."""
    t = np.array(positions, dtype=np.float64)
    h = np.array(heights, dtype=np.float64)
    if n not in (1, 2):
        raise SplineError(f"degree must be 1 or 2, got {n}")
    if t.ndim != 1 or t.size < 2 or h.shape != t.shape:
        raise SplineError("positions and heights must be matching 1-D arrays with K >= 2")
    if t[0] != 0.0 or t[-1] != 1.0:
        raise SplineError("knots must start at 0 and end at 1")
    widths = np.diff(t)
    if np.any(widths <= 0):
        raise SplineError("knot positions must be strictly increasing")
    if np.any(h < 0):
        raise SplineError("endpoint heights must be nonnegative")
    if n == 2:
        if mid_heights is None:
            raise SplineError("degree-2 spline needs K-1 midpoint heights")
        m = np.array(mid_heights, dtype=np.float64)
        if m.shape != (t.size - 1,):
            raise SplineError("degree-2 spline needs K-1 midpoint heights")
    else:
        m = None
        mid = 0.5 * (h[:-1] + h[1:])
    A, B, C = _local_coeffs(h[:-1], m if n == 2 else mid, h[1:])
    if n == 1:
        A = np.zeros_like(A)
    d = SplineDensity(n, t, h, m, A, B, C, 1.0, eps, widths)
    Z = float(d.segment_masses().sum())
    if not Z > DENSITY_FLOOR_Z:
        raise SplineError(f"degenerate density: normalizing constant {Z:.3g}")
    return SplineDensity(n, t, h, m, A, B, C, Z, eps, widths)


def _segment_index(d: SplineDensity, y: float) -> int:
    i = bisect.bisect_right(d.positions, y) - 1
    return min(max(i, 0), d.K - 2)


def density_eval(d: SplineDensity, y):
    """Normalized density at ``y`` (scalar or array) in [0, 1]."""
    ys = np.asarray(y, dtype=np.float64)
    if np.any(ys < 0) or np.any(ys > 1) or np.any(np.isnan(ys)):
        raise SplineError(f"density_eval outside [0, 1]: {y}")
    if ys.ndim == 0:
        i = _segment_index(d, float(ys))
        s = (float(ys) - d.positions[i]) / d.widths[i]
        p = (d.A[i] * s + d.B[i]) * s + d.C[i]
        return max(p, 0.0) / d.Z
    idx = np.clip(np.searchsorted(d.positions, ys, side="right") - 1, 0, d.K - 2)
    s = (ys - d.positions[idx]) / d.widths[idx]
    p = (d.A[idx] * s + d.B[idx]) * s + d.C[idx]
    return np.maximum(p, 0.0) / d.Z


def density_sup(d: SplineDensity) -> float:
    best = max(float(d.heights.max()), 0.0)
    A, B, C = d.A, d.B, d.C
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(A < 0, -B / (2.0 * np.where(A == 0, -1.0, A)), -1.0)
    inside = (A < 0) & (s > 0) & (s < 1)
    if np.any(inside):
        vert = C[inside] - B[inside] ** 2 / (4.0 * A[inside])
        best = max(best, float(vert.max()))
    return best / d.Z


def _above_pieces(d: SplineDensity, c: float):
    """Local pieces of each segment where density > c."""
    segment_visits["count"] += d.K - 1
    return sign_pieces(d.A, d.B, d.C - c * d.Z)


def level_set(d: SplineDensity, c: float) -> IntervalUnion:
    """{y : density(y) > c} as a union of closed intervals."""
    if c < 0:
        raise SplineError("level must be nonnegative")
    bounds, positive = _above_pieces(d, c)
    t0 = d.positions[:-1, None]
    w = d.widths[:, None]
    lo = t0 + bounds[:, :-1] * w
    hi = t0 + bounds[:, 1:] * w
    # pin clipped ends to the exact knots
    hi[:, -1] = d.positions[1:]
    lo[:, 0] = d.positions[:-1]
    pieces = list(zip(lo[positive], hi[positive]))
    return IntervalUnion.from_pieces(pieces)


def mass_above_level(d: SplineDensity, c: float) -> float:
    bounds, positive = _above_pieces(d, c)
    A, B, C = (v[:, None] for v in (d.A, d.B, d.C))
    piece = _antideriv(A, B, C, bounds[:, 1:]) - _antideriv(A, B, C, bounds[:, :-1])
    total = (np.where(positive, piece, 0.0) * d.widths[:, None]).sum()
    return float(total / d.Z)


def mass_below_level(d: SplineDensity, c: float) -> float:
    """∫ over {y : density(y) <= c} of the density."""
    if c < 0:
        raise SplineError("level must be nonnegative")
    return float(min(max(1.0 - mass_above_level(d, c), 0.0), 1.0))


# --------------------------------------------------------------------------
# constructive expressiveness


RAMP = 1e-7
NUDGE = 1e-9


def theorem2_construct(target: IntervalUnion, cutoff_density: float, mode: str = "ND",
                       max_intervals: int | None = None) -> SplineDensity:
    """Degree-1 density whose conformal set at ``cutoff_density`` is ``target``.

    ``cutoff_density`` is ``-q_hat``.  Each target interval becomes a flat
    plateau of height ``1/|target|`` with ramps of width ``RAMP`` on its
    inside edges; the density is zero elsewhere.  Unused knots sit at
    (1, 0), nudged apart so the knots stay strictly increasing.
    """
    mode = mode.upper()
    m = target.count
    M = m if max_intervals is None else max_intervals
    size = target.size
    if m == 0 or m > M:
        raise SplineError(f"need 1 <= m <= M, got m={m}, M={M}")
    if mode == "ND":
        if not 0 < cutoff_density * size < 1:
            raise SplineError("ND construction needs 0 < -q_hat * |P| < 1")
    elif mode == "HPD":
        if not 0 < cutoff_density < 1:
            raise SplineError("HPD construction needs 0 < -q_hat < 1")
    else:
        raise SplineError(f"unknown mode {mode!r}")
    for a, b in target:
        if b - a <= 2 * RAMP + 4 * M * NUDGE or a < 0 or b > 1:
            raise SplineError(f"interval [{a}, {b}] too short or outside [0, 1]")
    # ND: c + eps' with eps' = 1/|P| - c; HPD: eps = 1/|P|.  Both are 1/|P|.
    h = 1.0 / size
    knots = [(0.0, 0.0)]
    for a, b in target:
        knots += [(a, 0.0), (a + RAMP, h), (b - RAMP, h), (b, 0.0)]
    knots.append((1.0, 0.0))
    knots += [(1.0, 0.0)] * (4 * (M - m))
    t = np.array([k[0] for k in knots])
    hs = np.array([k[1] for k in knots])
    K = t.size
    # resolve coincident knots: push forward, except at the right end
    for i in range(1, K):
        if t[i] <= t[i - 1] and t[i] < 1.0:
            t[i] = t[i - 1] + NUDGE
    tail = np.flatnonzero(t >= 1.0)
    if tail.size > 1:
        for j, i in enumerate(tail[::-1]):
            t[i] = 1.0 - j * NUDGE
        if np.any(np.diff(t) <= 0):
            raise SplineError("could not separate padding knots")
    return build_density(t, hs, 1, eps=0.0)
