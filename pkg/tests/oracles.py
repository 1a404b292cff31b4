"""Independent reference computations shared by the test modules."""

import numpy as np
from scipy import integrate

from splineconf import spline as sp


def random_density(rng, n, K, eps=1e-3, scale=2.0):
    t = sp.knot_positions(rng.normal(size=K - 1) * scale, K, eps)
    h = np.log1p(np.exp(rng.normal(size=K) * scale))
    mid = rng.normal(size=K - 1) * scale if n == 2 else None
    return sp.build_density(t, h, n, mid, eps)


def segment_breaks(d, i):
    """Interior roots of segment i's polynomial, found with np.roots."""
    coeffs = [d.A[i], d.B[i], d.C[i]] if d.A[i] != 0 else [d.B[i], d.C[i]]
    roots = np.roots(coeffs) if np.any(coeffs[:-1]) else []
    lo, w = d.positions[i], d.widths[i]
    return sorted(lo + r.real * w for r in roots if abs(r.imag) < 1e-12 and 0 < r.real < 1)


def quad_mass(d):
    """Adaptive quadrature of the density, split at every truncation kink."""
    total = 0.0
    for i in range(d.K - 1):
        pts = [d.positions[i]] + segment_breaks(d, i) + [d.positions[i + 1]]
        for a, b in zip(pts[:-1], pts[1:]):
            if b > a:
                v, _ = integrate.quad(lambda y: sp.density_eval(d, y), a, b, epsabs=1e-14, epsrel=1e-13)
                total += v
    return total


def grid_level_mask(d, c, m=100_001):
    ys = np.linspace(0.0, 1.0, m)
    return ys, sp.density_eval(d, ys) > c


def mask_intervals(ys, mask):
    """Maximal runs of True grid points as [first, last] grid coordinates."""
    if not mask.any():
        return []
    edges = np.diff(mask.astype(np.int8))
    starts = list(np.flatnonzero(edges == 1) + 1)
    ends = list(np.flatnonzero(edges == -1))
    if mask[0]:
        starts.insert(0, 0)
    if mask[-1]:
        ends.append(len(mask) - 1)
    return [(ys[a], ys[b]) for a, b in zip(starts, ends)]


def _dist_to_union(points, ivs):
    lo, hi = ivs[:, 0][None, :], ivs[:, 1][None, :]
    p = points[:, None]
    return np.min(np.maximum(np.maximum(lo - p, p - hi), 0.0), axis=1)


def hausdorff(a, b):
    """Hausdorff distance between two finite unions of closed intervals."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if a.size == 0 and b.size == 0:
        return 0.0
    if a.size == 0 or b.size == 0:
        return np.inf
    return float(max(_dist_to_union(a.ravel(), b).max(), _dist_to_union(b.ravel(), a).max()))


def single_interval_oracle(truths, coverage=0.9, m=500):
    """Shortest [a, b] with endpoints on an m-point grid covering >= coverage of truths."""
    srt = np.sort(np.asarray(truths, dtype=np.float64))
    grid = np.linspace(srt[0], srt[-1], m)
    need = coverage * srt.size
    best = np.inf
    right = np.searchsorted(srt, grid, side="right")
    for a in grid:
        count = right - np.searchsorted(srt, a, side="left")
        ok = np.flatnonzero((count >= need) & (grid >= a))
        if ok.size:
            best = min(best, grid[ok[0]] - a)
    return best


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(3)


def gauss_mass(d):
    """Total mass by 3-point Gauss-Legendre on every kink-free piece.

    Each piece is a single quadratic, so the rule is exact up to rounding.
    """
    lo_all, hi_all = [], []
    for i in range(d.K - 1):
        pts = [d.positions[i]] + segment_breaks(d, i) + [d.positions[i + 1]]
        lo_all += pts[:-1]
        hi_all += pts[1:]
    lo, hi = np.array(lo_all), np.array(hi_all)
    half = 0.5 * (hi - lo)
    nodes = np.clip((0.5 * (hi + lo))[:, None] + half[:, None] * _GL_NODES[None, :], 0.0, 1.0)
    vals = sp.density_eval(d, nodes.ravel()).reshape(nodes.shape)
    return float(np.sum(half * (vals @ _GL_WEIGHTS)))


class GridOracle:
    """Level sets and masses of a density from its values on a uniform grid.

    A level crossing inside a grid cell is located on the parabola through
    three neighbouring grid values; the partial cell is integrated with the
    trapezoid rule up to that crossing.  Cells lying wholly above a level
    are summed through a cumulative table sorted by the cell minimum.
    """

    def __init__(self, d, m=100_001):
        self.ys = np.linspace(0.0, 1.0, m)
        self.h = self.ys[1] - self.ys[0]
        f = self.f = sp.density_eval(d, self.ys)
        self.f0, self.f1 = f[:-1], f[1:]
        self.lo_cell = np.minimum(self.f0, self.f1)
        self.hi_cell = np.maximum(self.f0, self.f1)
        self.trap = 0.5 * (self.f0 + self.f1)
        self._cache = (None, None)

    def _crossings(self, cells, c):
        """Fraction u in [0, 1] of each crossing cell where the density meets c."""
        f, m = self.f, self.f.size
        g0, g1 = f[cells] - c, f[cells + 1] - c
        u = g0 / (g0 - g1)
        j = np.clip(cells, 1, m - 2)
        fm, fz, fp = f[j - 1] - c, f[j] - c, f[j + 1] - c
        a = 0.5 * (fp + fm) - fz
        b = 0.5 * (fp - fm)
        off = cells - j
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = np.sqrt(np.maximum(b * b - 4 * a * fz, 0.0))
            roots = ((-b + disc) / (2 * a) - off, (-b - disc) / (2 * a) - off)
        for r in roots:
            ok = (np.abs(a) > 1e-14) & np.isfinite(r) & (r >= 0) & (r <= 1)
            u = np.where(ok & (np.abs(r - u) < 0.5), r, u)
        return u

    def _cross(self, c):
        if self._cache[0] == c:
            return self._cache[1]
        cells = np.flatnonzero((self.lo_cell <= c) & (self.hi_cell > c))
        up = self.f0[cells] <= c
        out = cells, up, self._crossings(cells, c)
        self._cache = (c, out)
        return out

    def level_set(self, c):
        cells, up, u = self._cross(c)
        x = self.ys[cells] + self.h * u
        lo, hi = list(x[up]), list(x[~up])
        if self.f[0] > c:
            lo.insert(0, 0.0)
        if self.f[-1] > c:
            hi.append(1.0)
        return list(zip(lo, hi))

    def mass_above(self, c):
        full = self.trap[self.lo_cell > c].sum()
        cells, up, u = self._cross(c)
        f0, f1 = self.f0[cells], self.f1[cells]
        part = np.where(up, 0.5 * (c + f1) * (1 - u), 0.5 * (f0 + c) * u)
        return float((full + part.sum()) * self.h)

    def mass_below(self, c):
        return 1.0 - self.mass_above(c)

    def contains_grid_point(self, a, b):
        i = np.searchsorted(self.ys, a, side="left")
        return i < self.ys.size and self.ys[i] <= b
