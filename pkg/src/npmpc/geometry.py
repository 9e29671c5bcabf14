"""Boxes, norms, erosion, grids and covering checks.

All state and control sets in this package are axis-aligned boxes. Distances
default to the sup norm; "two" and finite p >= 1 are accepted where noted.
Covering checks against sup-norm balls are decided exactly (rational box
arithmetic over the float inputs); other norms fall back to grid probing and
are labelled probabilistic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

Norm = "str | float"  # "inf", "two", or a float p >= 1

GRID_POINT_LIMIT = 100_000_000


def _check_norm(norm):
    if norm in ("inf", "two"):
        return norm
    p = float(norm)
    if p < 1:
        raise ValueError(f"p-norm requires p >= 1, got {p}")
    return p


def vec_norm(v, norm="inf") -> float:
    """Norm of a vector (or of each row if v is 2-D)."""
    norm = _check_norm(norm)
    v = np.asarray(v, dtype=float)
    axis = -1 if v.ndim > 1 else None
    if norm == "inf":
        return np.max(np.abs(v), axis=axis) if v.size else 0.0
    if norm == "two":
        return np.linalg.norm(v, axis=axis)
    return np.linalg.norm(v, ord=norm, axis=axis)


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box [lo, hi]; empty when any lo_i > hi_i."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be 1-D arrays of equal length")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n(self) -> int:
        return self.lo.shape[0]

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.lo > self.hi))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def side_lengths(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, atol: float = 0.0) -> bool:
        """Membership in the closed box (vector -> bool, matrix -> bool array)."""
        x = np.asarray(x, dtype=float)
        ok = (x >= self.lo - atol) & (x <= self.hi + atol)
        return np.all(ok, axis=-1)

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        if self.is_empty:
            raise ValueError("cannot sample from an empty box")
        shape = (self.n,) if size is None else (size, self.n)
        return rng.uniform(self.lo, self.hi, size=shape)

    def shrink(self, margin: float) -> "Box":
        return Box(self.lo + margin, self.hi - margin)


def erode(box: Box, eps: float, norm="inf") -> Box:
    """Inner box reachable with an eps-ball of slack: {x : x + B_eps subset box}.

    For an axis-aligned box the support of any unit p-ball along a coordinate
    axis is 1 (the dual norm of a standard basis vector), so every p >= 1
    yields the same eroded box [lo + eps, hi - eps]. May come back empty.
    """
    _check_norm(norm)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return Box(box.lo + eps, box.hi - eps)


def dist_to_boundary(x, box: Box, norm="inf") -> float:
    """Distance from x to the boundary of the box, 0 if x is outside.

    The nearest boundary point of a box lies along a single axis, so the
    value is min_i min(x_i - lo_i, hi_i - x_i) for every p-norm.
    """
    _check_norm(norm)
    x = np.asarray(x, dtype=float)
    margins = np.minimum(x - box.lo, box.hi - x)
    d = np.min(margins, axis=-1)
    return float(max(d, 0.0)) if np.ndim(d) == 0 else np.maximum(d, 0.0)


def inscribed_radius(box: Box, norm="inf") -> float:
    """Largest r with B(0, r) inside the box; requires the origin inside."""
    _check_norm(norm)
    if box.is_empty or np.any(box.lo > 0) or np.any(box.hi < 0):
        raise ValueError("box must contain the origin")
    return float(np.min(np.minimum(np.abs(box.lo), np.abs(box.hi))))


def uniform_grid(box: Box, g: int) -> np.ndarray:
    """g points per axis including endpoints, cartesian product, (g^n, n)."""
    if g < 1:
        raise ValueError("g must be >= 1")
    if box.is_empty:
        raise ValueError("cannot grid an empty box")
    if g ** box.n > GRID_POINT_LIMIT:
        raise ValueError(f"grid of {g}^{box.n} points exceeds limit {GRID_POINT_LIMIT}")
    if g == 1:
        return box.center.reshape(1, -1)
    axes = [np.linspace(box.lo[i], box.hi[i], g) for i in range(box.n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _ceil_with_slack(v: float) -> int:
    # guard against ceil(6.000000000000001) from float noise
    return max(1, math.ceil(v * (1.0 - 1e-12)))


def covering_number_box(box: Box, r: float, norm="inf") -> int:
    """Number of r-balls needed to cover the box by per-axis slicing."""
    _check_norm(norm)
    if r <= 0:
        raise ValueError("r must be positive")
    if box.is_empty:
        return 0
    count = 1
    for side in box.side_lengths:
        count *= _ceil_with_slack(side / (2.0 * r))
    return count


def covering_centers_box(box: Box, r: float, norm="inf") -> np.ndarray:
    """Constructive centers realizing covering_number_box (sup-norm slices)."""
    _check_norm(norm)
    if r <= 0:
        raise ValueError("r must be positive")
    axes = []
    for i in range(box.n):
        side = box.hi[i] - box.lo[i]
        k = _ceil_with_slack(side / (2.0 * r))
        # k sub-intervals of width side/k <= 2r, centers in the middle
        width = side / k
        axes.append(box.lo[i] + width * (np.arange(k) + 0.5))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class CoverResult:
    """Outcome of a covering check.

    holds    -- True iff the balls cover the target box
    witness  -- an uncovered point when holds is False (None otherwise)
    exact    -- True for the rational sup-norm decision procedure,
                False for the grid-probing fallback
    """

    holds: bool
    witness: "np.ndarray | None"
    exact: bool

    def __bool__(self) -> bool:
        return self.holds


def _to_frac_vec(v):
    return tuple(Fraction(float(x)) for x in v)


def _subtract_box(lo, hi, clo, chi):
    """Pieces of [lo,hi] minus [clo,chi], closed boxes, degenerate pieces dropped.

    Freed faces shared with the subtracted (closed) box are treated as covered,
    which is sound because cover balls are closed and the target is
    full-dimensional: a nonempty uncovered set is relatively open and must
    contain a positive-volume piece.
    """
    n = len(lo)
    for i in range(n):
        if chi[i] <= lo[i] or clo[i] >= hi[i]:
            return [(lo, hi)]  # no overlap
    pieces = []
    cur_lo = list(lo)
    cur_hi = list(hi)
    for i in range(n):
        if clo[i] > cur_lo[i]:
            p_lo = tuple(cur_lo)
            p_hi = tuple(cur_hi[:i]) + (clo[i],) + tuple(cur_hi[i + 1 :])
            pieces.append((p_lo, p_hi))
            cur_lo[i] = clo[i]
        if chi[i] < cur_hi[i]:
            p_lo = tuple(cur_lo[:i]) + (chi[i],) + tuple(cur_lo[i + 1 :])
            p_hi = tuple(cur_hi)
            pieces.append((p_lo, p_hi))
            cur_hi[i] = chi[i]
    return [p for p in pieces if all(a < b for a, b in zip(p[0], p[1]))]


def _covered_exact(point, centers, radii) -> bool:
    return any(
        all(abs(point[k] - c[k]) <= r for k in range(len(point)))
        for c, r in zip(centers, radii)
    )


def _witness_in_piece(lo, hi, centers, radii):
    """An exactly-uncovered point inside the piece (its interior minus the
    finitely many covered faces is nonempty, so a few candidates suffice)."""
    n = len(lo)
    for denom in (2, 3, 5, 7, 11, 13):
        cand = tuple(lo[k] + (hi[k] - lo[k]) / denom for k in range(n))
        if not _covered_exact(cand, centers, radii):
            return np.array([float(c) for c in cand])
    # dense deterministic fallback along the main diagonal
    for j in range(1, 4096):
        t = Fraction(2 * j - 1, 2 * 4096)
        cand = tuple(lo[k] + (hi[k] - lo[k]) * t for k in range(n))
        if not _covered_exact(cand, centers, radii):
            return np.array([float(c) for c in cand])
    raise RuntimeError("could not isolate an uncovered witness in a nonempty piece")


def _is_cover_exact_inf(centers, radii, box: Box) -> CoverResult:
    box_lo = _to_frac_vec(box.lo)
    box_hi = _to_frac_vec(box.hi)
    n = len(box_lo)
    balls = []
    for c, r in zip(centers, radii):
        if r <= 0:
            continue
        cf = _to_frac_vec(c)
        rf = Fraction(float(r))
        blo = tuple(cf[k] - rf for k in range(n))
        bhi = tuple(cf[k] + rf for k in range(n))
        if all(bhi[k] > box_lo[k] and blo[k] < box_hi[k] for k in range(n)):
            balls.append((blo, bhi))
    # big balls first: removes volume quickly and keeps the fragment count down
    balls.sort(key=lambda b: min(b[1][k] - b[0][k] for k in range(n)), reverse=True)

    remaining = [(box_lo, box_hi)]
    for blo, bhi in balls:
        nxt = []
        for lo, hi in remaining:
            nxt.extend(_subtract_box(lo, hi, blo, bhi))
        remaining = nxt
        if not remaining:
            return CoverResult(True, None, True)
    ball_cs = [tuple((b[0][k] + b[1][k]) / 2 for k in range(n)) for b in balls]
    ball_rs = [(b[1][0] - b[0][0]) / 2 for b in balls]
    lo, hi = remaining[0]
    return CoverResult(False, _witness_in_piece(lo, hi, ball_cs, ball_rs), True)


def _probe_points(box: Box, resolution: float, limit: int = 2_000_000):
    g = max(2, int(math.ceil(float(np.max(box.side_lengths)) / resolution)) + 1)
    while g ** box.n > limit and g > 2:
        g -= 1
    return uniform_grid(box, g)


def _is_cover_probe(centers, radii, box: Box, norm) -> CoverResult:
    centers = np.asarray(centers, dtype=float)
    radii = np.asarray(radii, dtype=float)
    res = float(np.min(radii[radii > 0])) / 10.0 if np.any(radii > 0) else float(np.max(box.side_lengths)) / 10.0
    probes = _probe_points(box, res)
    # chunked so the (probes x centers) distance matrix stays bounded
    for start in range(0, probes.shape[0], 4096):
        block = probes[start : start + 4096]
        diff = block[:, None, :] - centers[None, :, :]
        if norm == "two":
            d = np.linalg.norm(diff, axis=-1)
        elif norm == "inf":
            d = np.max(np.abs(diff), axis=-1)
        else:
            d = np.linalg.norm(diff, ord=norm, axis=-1)
        uncovered = np.all(d > radii[None, :], axis=1)
        if np.any(uncovered):
            return CoverResult(False, block[np.argmax(uncovered)], False)
    return CoverResult(True, None, False)


def is_cover(centers, radii, box: Box, norm="inf") -> CoverResult:
    """Do closed balls B(center_i, radius_i) cover the box?

    Sup-norm balls are boxes, so the check runs exactly: first a probe pass
    that can only produce exact negatives, then rational box subtraction for
    the exact verdict. Other norms use grid probing at a tenth of the
    smallest radius and are labelled non-exact.
    """
    norm = _check_norm(norm)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (centers.shape[0],))
    if box.is_empty:
        return CoverResult(True, None, True)
    if centers.shape[0] == 0:
        return CoverResult(False, box.center, True)
    if centers.shape[1] != box.n:
        raise ValueError("center dimension does not match the box")
    if norm != "inf":
        return _is_cover_probe(centers, radii, box, norm)
    # cheap float probe for a fast exact "no" (verified rationally before use)
    coarse = _probe_points(box, float(np.max(box.side_lengths)) / 16.0, limit=100_000)
    diff = np.abs(coarse[:, None, :] - centers[None, :, :]).max(axis=-1)
    miss = np.all(diff > radii[None, :], axis=1)
    if np.any(miss):
        cand = coarse[np.argmax(miss)]
        cf = _to_frac_vec(cand)
        if not _covered_exact(cf, [_to_frac_vec(c) for c in centers],
                              [Fraction(float(r)) for r in radii]):
            return CoverResult(False, cand, True)
    return _is_cover_exact_inf(centers, radii, box)
