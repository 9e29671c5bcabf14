"""Gridded dynamic-programming ground truth for small state dimensions.

Backward value iteration over the horizon produces tables J_k (k = 0..T) on
a rectangular state grid, with controls restricted to a rectangular grid of
their own. Queries interpolate multilinearly; any interpolation corner at
+inf makes the whole query +inf, so the oracle never smooths across the
feasibility boundary. Intermediate steps (k = 1..T-1) live on the eroded
state box, step 0 on the full box (matching the jump-in semantics of the
eroded-constraint problem), and step T on the full box.

Tables are exportable to a flat binary file (magic NPDP1) for reuse across
runs; see save_oracle / load_oracle / dp_build_cached.
"""

from __future__ import annotations

import math
import os
import struct
import warnings
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Box, erode
from .systems import INF, BoxTerminal, System, config_digest

_MAGIC = b"NPDP1"
_TABLE_LIMIT = 200_000_000  # total float64 entries across all J_k
_DEFAULT_STATE_POINTS = 201
_DEFAULT_CONTROL_POINTS = 101
_WEIGHT_FLOOR = 1e-12  # corners below this weight cannot poison a query


def _axes_for(box: Box, counts: Sequence[int]) -> tuple[np.ndarray, ...]:
    if len(counts) != box.n:
        raise ValueError("one grid count per axis required")
    if any(c < 2 for c in counts):
        raise ValueError("grid counts must be >= 2")
    return tuple(np.linspace(box.lo[i], box.hi[i], int(counts[i])) for i in range(box.n))


def _grid_points(axes: Sequence[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _interp(axes: Sequence[np.ndarray], table: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation with +inf propagation.

    Points outside the grid hull evaluate to +inf. A corner value of +inf
    propagates whenever its weight exceeds a tiny floor, so queries exactly
    on a finite face next to an infinite cell stay finite.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    npts, n = pts.shape
    idx = np.empty((npts, n), dtype=np.intp)
    frac = np.empty((npts, n))
    inside = np.ones(npts, dtype=bool)
    for a, ax in enumerate(axes):
        x = pts[:, a]
        inside &= (x >= ax[0]) & (x <= ax[-1])
        i = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, len(ax) - 2)
        idx[:, a] = i
        span = ax[i + 1] - ax[i]
        frac[:, a] = np.clip((x - ax[i]) / span, 0.0, 1.0)
    shape = table.shape
    strides = np.empty(n, dtype=np.intp)
    acc = 1
    for a in range(n - 1, -1, -1):
        strides[a] = acc
        acc *= shape[a]
    flat = table.reshape(-1)
    vals = np.zeros(npts)
    poisoned = np.zeros(npts, dtype=bool)
    for corner in product((0, 1), repeat=n):
        w = np.ones(npts)
        lin = np.zeros(npts, dtype=np.intp)
        for a in range(n):
            w *= frac[:, a] if corner[a] else 1.0 - frac[:, a]
            lin += (idx[:, a] + corner[a]) * strides[a]
        cv = flat[lin]
        finite = np.isfinite(cv)
        active = w > _WEIGHT_FLOOR
        poisoned |= active & ~finite
        vals += np.where(active & finite, w * np.where(finite, cv, 0.0), 0.0)
    vals[poisoned | ~inside] = INF
    return vals


@dataclass(frozen=True)
class DPOracle:
    """Immutable value/greedy tables from backward value iteration."""

    system_digest: str
    eps: float
    gamma: float
    T: int
    axes: tuple[np.ndarray, ...]
    ctrl_axes: tuple[np.ndarray, ...]
    J: np.ndarray  # (T+1, *state grid shape)
    greedy: np.ndarray  # (T, *state grid shape), control-grid index or -1

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def m(self) -> int:
        return len(self.ctrl_axes)

    @property
    def ctrl_points(self) -> np.ndarray:
        return _grid_points(self.ctrl_axes)

    def query(self, x, k: int = 0) -> np.ndarray:
        """Interpolated J_k at one point (np.ndarray scalar-like) or a batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out = _interp(self.axes, self.J[k], np.atleast_2d(x))
        return out[0] if single else out

    def greedy_action(self, sys: System, x, k: int = 0) -> Optional[np.ndarray]:
        """Control-grid minimizer of c(x,u) + gamma * J_{k+1}(f(x,u)).

        Re-minimizes at the query point rather than interpolating the stored
        greedy table (indices do not interpolate). Returns None when every
        candidate leads to +inf. Ties pick the lowest control-grid index.
        """
        if k >= self.T:
            raise ValueError("no action at the terminal step")
        x = np.asarray(x, dtype=float).reshape(self.n)
        cand = self.ctrl_points
        xb = np.broadcast_to(x, (cand.shape[0], self.n))
        xn = sys.dynamics(xb, cand)
        vals = np.asarray(sys.stage_cost(xb, cand), dtype=float)
        vals = vals + self.gamma * _interp(self.axes, self.J[k + 1], xn)
        best = int(np.argmin(vals))
        if not np.isfinite(vals[best]):
            return None
        return cand[best].copy()

    def tolerance(self) -> float:
        """Interpolation error estimate from second differences of J_0.

        For a C^2 function, linear interpolation on spacing h errs by at most
        max|f''| h^2/8 per axis; the centered second difference divided by 8
        estimates exactly that quantity without needing derivatives.
        """
        est = 0.0
        for a in range(self.n):
            tbl = np.moveaxis(self.J[0], a, 0)
            # inf nodes (unreachable corners) would poison the differences
            with np.errstate(invalid="ignore"):
                d2 = tbl[2:] - 2.0 * tbl[1:-1] + tbl[:-2]
            finite = np.isfinite(d2)
            if np.any(finite):
                est += float(np.max(np.abs(d2[finite]))) / 8.0
        return est

    def bellman_residual(self, sys: System, x, k: int = 0) -> float:
        """|J_k(x) - min_u(c + gamma J_{k+1}(f(x,u)))| over the control grid."""
        jx = float(np.asarray(self.query(x, k)))
        x = np.asarray(x, dtype=float).reshape(self.n)
        cand = self.ctrl_points
        xb = np.broadcast_to(x, (cand.shape[0], self.n))
        xn = sys.dynamics(xb, cand)
        vals = np.asarray(sys.stage_cost(xb, cand), dtype=float)
        vals = vals + self.gamma * _interp(self.axes, self.J[k + 1], xn)
        rhs = float(np.min(vals))
        if math.isinf(jx) or math.isinf(rhs):
            return 0.0 if math.isinf(jx) and math.isinf(rhs) else INF
        return abs(jx - rhs)


def dp_query(oracle: DPOracle, x) -> np.ndarray:
    """Interpolated cost-to-go at the first step (the jump-in problem)."""
    return oracle.query(x, k=0)


def _normalize_grids(sys, state_grid, control_grid):
    # accept a single int (points per axis) or a per-axis sequence
    if state_grid is None:
        state_grid = [_DEFAULT_STATE_POINTS] * sys.n
    elif isinstance(state_grid, (int, np.integer)):
        state_grid = [int(state_grid)] * sys.n
    else:
        state_grid = [int(g) for g in state_grid]
    if control_grid is None:
        control_grid = [_DEFAULT_CONTROL_POINTS] * sys.m
    elif isinstance(control_grid, (int, np.integer)):
        control_grid = [int(control_grid)] * sys.m
    else:
        control_grid = [int(g) for g in control_grid]
    return state_grid, control_grid


def dp_build(sys: System, eps: float,
             state_grid: Optional[Sequence[int]] = None,
             control_grid: Optional[Sequence[int]] = None) -> DPOracle:
    """Backward value iteration on the eroded-constraint problem.

    state_grid / control_grid give points per axis (defaults 201 / 101).
    Nodes outside the step's active region hold +inf, as do nodes whose
    every control leads outside the next step's region.
    """
    if sys.n > 3:
        raise ValueError("value tables are limited to n <= 3")
    if isinstance(sys.terminal_model, BoxTerminal):
        raise ValueError(
            "terminal-box problems are not representable on an interpolation "
            "grid (the box is far below grid resolution); no oracle available"
        )
    state_grid, control_grid = _normalize_grids(sys, state_grid, control_grid)
    axes = _axes_for(sys.X, state_grid)
    ctrl_axes = _axes_for(sys.U, control_grid)
    shape = tuple(len(ax) for ax in axes)
    n_nodes = int(np.prod(shape))
    if (sys.T + 1) * n_nodes > _TABLE_LIMIT:
        raise ValueError("value tables would exceed the memory guard")

    pts = _grid_points(axes)
    ctrl_pts = _grid_points(ctrl_axes)
    inner = erode(sys.X, eps, sys.norm) if eps > 0 else sys.X
    if inner.is_empty:
        raise ValueError(f"erosion by eps={eps} empties the state box")
    inner_mask = inner.contains(pts)

    J = np.full((sys.T + 1,) + shape, INF)
    greedy = np.full((sys.T,) + shape, -1, dtype=np.int32)
    J[sys.T] = np.asarray(sys.terminal_cost(pts), dtype=float).reshape(shape)

    for k in range(sys.T - 1, -1, -1):
        nxt = J[k + 1]
        best = np.full(n_nodes, INF)
        best_u = np.full(n_nodes, -1, dtype=np.int32)
        for j, u in enumerate(ctrl_pts):
            ub = np.broadcast_to(u, (n_nodes, sys.m))
            xn = sys.dynamics(pts, ub)
            tot = np.asarray(sys.stage_cost(pts, ub), dtype=float)
            tot = tot + sys.gamma * _interp(axes, nxt, xn)
            better = tot < best  # strict: ties keep the lowest control index
            best = np.where(better, tot, best)
            best_u = np.where(better, np.int32(j), best_u)
        if k >= 1:
            best[~inner_mask] = INF
            best_u[~inner_mask] = -1
        J[k] = best.reshape(shape)
        greedy[k] = best_u.reshape(shape)

    return DPOracle(
        system_digest=config_digest(sys),
        eps=float(eps),
        gamma=float(sys.gamma),
        T=int(sys.T),
        axes=axes,
        ctrl_axes=ctrl_axes,
        J=J,
        greedy=greedy,
    )


# ---------------------------------------------------------------------------
# flat binary persistence
# ---------------------------------------------------------------------------

def save_oracle(oracle: DPOracle, path) -> None:
    """NPDP1 layout: magic, version, dims, eps/gamma/T, digest, axis lengths,
    axis values, J payload (float64 row-major), greedy payload (int32)."""
    path = Path(path)
    digest = oracle.system_digest.encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BBB", 1, oracle.n, oracle.m))
        f.write(struct.pack("<ddI", oracle.eps, oracle.gamma, oracle.T))
        f.write(struct.pack("<H", len(digest)))
        f.write(digest)
        for ax in oracle.axes:
            f.write(struct.pack("<I", len(ax)))
        for ax in oracle.ctrl_axes:
            f.write(struct.pack("<I", len(ax)))
        for ax in oracle.axes:
            f.write(np.ascontiguousarray(ax, dtype="<f8").tobytes())
        for ax in oracle.ctrl_axes:
            f.write(np.ascontiguousarray(ax, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(oracle.J, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(oracle.greedy, dtype="<i4").tobytes())


def load_oracle(path, expect_digest: Optional[str] = None) -> DPOracle:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(5) != _MAGIC:
            raise ValueError(f"{path} is not an oracle table file")
        version, n, m = struct.unpack("<BBB", f.read(3))
        if version != 1:
            raise ValueError(f"unsupported oracle file version {version}")
        eps, gamma, T = struct.unpack("<ddI", f.read(20))
        (dlen,) = struct.unpack("<H", f.read(2))
        digest = f.read(dlen).decode()
        state_counts = [struct.unpack("<I", f.read(4))[0] for _ in range(n)]
        ctrl_counts = [struct.unpack("<I", f.read(4))[0] for _ in range(m)]
        axes = tuple(
            np.frombuffer(f.read(8 * c), dtype="<f8").copy() for c in state_counts
        )
        ctrl_axes = tuple(
            np.frombuffer(f.read(8 * c), dtype="<f8").copy() for c in ctrl_counts
        )
        shape = tuple(state_counts)
        n_nodes = int(np.prod(shape))
        J = np.frombuffer(f.read(8 * (T + 1) * n_nodes), dtype="<f8").copy()
        J = J.reshape((T + 1,) + shape)
        greedy = np.frombuffer(f.read(4 * T * n_nodes), dtype="<i4").copy()
        greedy = greedy.reshape((T,) + shape)
    if expect_digest is not None and digest != expect_digest:
        warnings.warn(
            f"oracle file {path} was built for a different system configuration",
            stacklevel=2,
        )
    return DPOracle(
        system_digest=digest,
        eps=eps,
        gamma=gamma,
        T=int(T),
        axes=axes,
        ctrl_axes=ctrl_axes,
        J=J,
        greedy=greedy,
    )


def oracle_cache_path(cache_dir, sys: System, eps: float,
                      state_grid: Sequence[int], control_grid: Sequence[int]) -> Path:
    tag = "{}_{}_e{:.6g}_s{}_c{}.npdp1".format(
        sys.name,
        config_digest(sys)[:16],
        eps,
        "x".join(str(int(c)) for c in state_grid),
        "x".join(str(int(c)) for c in control_grid),
    )
    return Path(cache_dir) / tag


def dp_build_cached(sys: System, eps: float,
                    state_grid: Optional[Sequence[int]] = None,
                    control_grid: Optional[Sequence[int]] = None,
                    cache_dir=None) -> DPOracle:
    """dp_build with optional reuse of saved tables.

    cache_dir defaults to the NPMPC_ORACLE_CACHE environment variable; with
    neither set this is plain dp_build. A cached file whose digest does not
    match the system is rebuilt (with a warning), not trusted.
    """
    state_grid, control_grid = _normalize_grids(sys, state_grid, control_grid)
    if cache_dir is None:
        cache_dir = os.environ.get("NPMPC_ORACLE_CACHE")
    if not cache_dir:
        return dp_build(sys, eps, state_grid, control_grid)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = oracle_cache_path(cache_dir, sys, eps, state_grid, control_grid)
    digest = config_digest(sys)
    if path.exists():
        oracle = load_oracle(path, expect_digest=digest)
        if (
            oracle.system_digest == digest
            and oracle.eps == float(eps)
            and tuple(len(a) for a in oracle.axes) == tuple(int(c) for c in state_grid)
            and tuple(len(a) for a in oracle.ctrl_axes) == tuple(int(c) for c in control_grid)
        ):
            return oracle
    oracle = dp_build(sys, eps, state_grid, control_grid)
    save_oracle(oracle, path)
    return oracle
