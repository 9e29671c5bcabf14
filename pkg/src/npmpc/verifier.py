"""Adaptive cell-splitting certification of a domain.

Tiles the state box with axis-aligned cube cells, solves the conservative
problem at each cell center, and certifies every cell in two stages: first
that the center's feasibility ball contains the cell (so the center's control
is safe anywhere inside), then that the cell is small enough for the center's
cost to bound the in-cell suboptimality by beta. Failing cells split into
3^n children one-third the size; the splitting budget, once short, goes to
the cells with the largest relative-error bound.

Cell geometry is kept in exact rational arithmetic: radii h0 * 3^-k and
ternary-grid centers have no finite binary representation, and the
boundary-critical containment tests only certify under exact comparisons.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .certify import feas_radius_eq6, perf_radius, rel_err_bound
from .dataset import Dataset, from_results
from .errors import Assumption3Violated, NotOneStepFeasible
from .geometry import Box
from .solver import SolverOptions, solve_conservative_batch
from .systems import System, exact_step

__all__ = ["Cell", "CellTree", "verify", "split",
           "cell_feasibility_test", "cell_beta_test"]

PENDING = "pending"
FEASIBLE = "feasible"
BETA_OK = "beta_ok"
SPLIT = "split"

_DUMP_CAP = 200000


def _decimal(v: float) -> Fraction:
    return Fraction(repr(float(v)))


@dataclass(eq=False)
class Cell:
    """One axis-aligned cube cell of the certification tiling.

    center and radius are exact rationals; radius is always h0 * 3^-depth.
    transition holds the (x, u, j) of the center's conservative solve, or
    None when that solve was infeasible.
    """
    center: tuple
    radius: Fraction
    depth: int
    status: str = PENDING
    transition: Optional[tuple] = None
    children: Optional[list] = None
    index: int = -1
    parent: Optional[int] = None
    center_infeasible: bool = False

    @property
    def center_f(self) -> np.ndarray:
        return np.array([float(c) for c in self.center])

    @property
    def radius_f(self) -> float:
        return float(self.radius)


@dataclass
class CellTree:
    """Arena of cells plus the bookkeeping of the certification loop."""
    cells: list = field(default_factory=list)
    frontier: list = field(default_factory=list)
    N: int = 0
    K: int = 0
    I: list = field(default_factory=list)
    h0: Fraction = Fraction(1)
    n: int = 0

    def add(self, cell: Cell) -> int:
        cell.index = len(self.cells)
        self.cells.append(cell)
        return cell.index

    def leaves(self) -> list:
        return [c for c in self.cells if c.children is None]

    def leaves_by_depth(self) -> dict:
        out: dict = {}
        for c in self.leaves():
            out[c.depth] = out.get(c.depth, 0) + 1
        return out


def split(tree: CellTree, cell: Cell) -> list:
    """Replace a leaf by its 3^n children; returns the new cells.

    Children centers sit at parent center + offsets from {-2h/3, 0, +2h/3}
    per axis, each with radius h/3, so they tile the parent exactly. The
    all-zero-offset child keeps the parent's center and inherits its
    transition without a new solve.
    """
    if cell.children is not None:
        raise ValueError(f"cell {cell.index} is not a leaf")
    h = cell.radius
    step = 2 * h / 3
    kids = []
    for offs in itertools.product((-step, Fraction(0), step), repeat=tree.n):
        center = tuple(c + o for c, o in zip(cell.center, offs))
        kid = Cell(center=center, radius=h / 3, depth=cell.depth + 1,
                   parent=cell.index)
        if all(o == 0 for o in offs):
            kid.transition = cell.transition
            kid.center_infeasible = cell.center_infeasible
        tree.add(kid)
        kids.append(kid)
    cell.children = [k.index for k in kids]
    cell.status = SPLIT
    return kids


def _exact_feas_radius(sys: System, cell: Cell, u, eps_frac: Fraction):
    """(one_step_feasible, radius) in exact rationals, LTI systems only."""
    uf = [Fraction(float(v)) for v in np.atleast_1d(u)]
    xp = exact_step(sys, cell.center, uf)
    xlo = [Fraction(float(v)) for v in sys.X.lo]
    xhi = [Fraction(float(v)) for v in sys.X.hi]
    ulo = [Fraction(float(v)) for v in sys.U.lo]
    uhi = [Fraction(float(v)) for v in sys.U.hi]
    in_x = all(xlo[i] <= cell.center[i] <= xhi[i] for i in range(sys.n))
    in_u = all(ulo[k] <= uf[k] <= uhi[k] for k in range(sys.m))
    margin = min(min(xp[i] - xlo[i], xhi[i] - xp[i]) for i in range(sys.n))
    feasible = in_x and in_u and margin >= eps_frac
    if margin < 0:
        margin = Fraction(0)
    return feasible, margin / _decimal(sys.lipschitz.L_f)


def cell_feasibility_test(cell: Cell, sys: System, eps: float) -> bool:
    """True iff the center pair is one-step feasible for the conservative
    problem and its feasibility ball contains the whole cell.

    Exact rational comparison for LTI systems (the initial grid sits on the
    boundary-critical case where the ball reaches a corner of X with zero
    slack); float evaluation otherwise.
    """
    if cell.transition is None:
        return False
    x, u, _ = cell.transition
    if sys.is_lti:
        feasible, r = _exact_feas_radius(sys, cell, u, _decimal(eps))
        return feasible and cell.radius <= r
    try:
        r = feas_radius_eq6(sys, np.asarray(x), np.asarray(u), eps)
    except NotOneStepFeasible:
        return False
    return cell.radius_f <= r


def cell_beta_test(cell: Cell, beta: float, eta: float, lam: float) -> bool:
    """True iff radius <= beta*(j_center + eta) / ((2 + beta)*lam)."""
    if cell.transition is None:
        return False
    j = cell.transition[2]
    return cell.radius_f <= perf_radius(j, beta, eta, lam)


def _check_domain(X: Box, h0: float) -> tuple:
    side = X.hi - X.lo
    if not np.all(side == side[0]):
        raise ValueError("state box must be a hypercube (equal sides), got "
                         f"sides {side.tolist()}")
    if np.any(X.lo > 0) or np.any(X.hi < 0):
        raise ValueError("state box must contain the origin")
    h0_frac = _decimal(h0)
    if h0_frac <= 0:
        raise ValueError(f"need h0 > 0, got {h0}")
    half = (Fraction(float(X.hi[0])) - Fraction(float(X.lo[0]))) / 2
    m = half / h0_frac
    if m.denominator != 1:
        raise ValueError(f"h0={h0} must divide the box half-side {float(half)} "
                         "so the initial grid tiles exactly")
    return h0_frac, int(m)


def _k_max(h0_frac: Fraction, L_f: float, eps: float) -> int:
    # smallest k with 3^k >= h0*L_f/eps, in exact arithmetic
    ratio = h0_frac * _decimal(L_f) / _decimal(eps)
    k = 0
    while 3**k < ratio:
        k += 1
    return k


def _solve_centers(sys: System, eps: float, tree: CellTree, cells: list,
                   solves: dict, opts: Optional[SolverOptions]) -> None:
    todo = [c for c in cells if c.transition is None and not c.center_infeasible]
    if not todo:
        return
    X0 = np.stack([c.center_f for c in todo])
    results = solve_conservative_batch(sys, X0, eps, opts=opts)
    for c, res in zip(todo, results):
        if res.status == "optimal":
            u0 = np.asarray(res.controls, dtype=float)[0]
            c.transition = (c.center_f, u0, float(res.cost))
            solves[c.index] = res
        else:
            c.center_infeasible = True


def _dump(path_pattern: str, t: int, stage: str, tree: CellTree) -> None:
    path = path_pattern.format(t=t)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    leaves = tree.leaves()[:_DUMP_CAP]
    payload = {
        "t": t,
        "stage": stage,
        "cells": [
            {
                "center": [float(v) for v in c.center],
                "radius": c.radius_f,
                "depth": c.depth,
                "status": c.status,
            }
            for c in leaves
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def _cell_err(cell: Cell, lam: float, eta: float) -> float:
    if cell.transition is None:
        return math.inf
    return rel_err_bound(lam, cell.radius_f, cell.transition[2], eta)


def verify(sys: System, eps: float, h0: float, beta: float, eta: float,
           lam: float, budget: int, *,
           opts: Optional[SolverOptions] = None,
           dump_cells: Optional[str] = None) -> tuple:
    """Certify feasibility and beta-optimality of the lookup policy over X.

    Stage (a) refines, without a budget, until every leaf cell sits inside
    its center's feasibility ball; a depth cap at ceil(log3(h0*L_f/eps))
    turns persistent center infeasibility into an error, since below that
    cell size any solvable center must pass. Stage (b) tests each leaf
    against the performance radius beta*(j+eta)/((2+beta)*lam), splitting
    failures while the budget lasts; when one round cannot afford to split
    every failing leaf, the floor((N-K)/3^n) leaves with the largest
    relative-error bounds go first (ties: shallower, then older).

    Returns (tree, dataset, report): the dataset collects every optimal
    center solve as a trajectory, and on full certification it carries both
    the recursive-feasibility cover (condition 2) and the coverage needed
    for the relative-suboptimality bound.

    dump_cells, when given, is a path pattern with a ``{t}`` placeholder
    that receives one JSON snapshot of the leaf tiling per iteration.
    """
    if eps <= 0:
        raise ValueError(f"need eps > 0, got {eps}")
    if sys.norm != "inf":
        raise ValueError("cell certification requires the sup norm")
    if budget < 0:
        raise ValueError(f"need budget >= 0, got {budget}")
    h0_frac, m = _check_domain(sys.X, h0)
    k_max = _k_max(h0_frac, sys.lipschitz.L_f, eps)
    n = sys.n
    n_child = 3**n

    tree = CellTree(N=int(budget), h0=h0_frac, n=n)
    lo0 = Fraction(float(sys.X.lo[0]))
    for idx in itertools.product(range(m), repeat=n):
        center = tuple(lo0 + h0_frac * (2 * i + 1) for i in idx)
        tree.add(Cell(center=center, radius=h0_frac, depth=0))

    solves: dict = {}
    eps_frac = _decimal(eps)
    t = 0
    iterations_a = 0
    splits_a = 0

    # stage (a): one-step feasibility everywhere, unbudgeted
    tree.frontier = [c.index for c in tree.cells]
    while tree.frontier:
        t += 1
        iterations_a += 1
        cells = [tree.cells[i] for i in tree.frontier]
        _solve_centers(sys, eps, tree, cells, solves, opts)
        failing = []
        for c in cells:
            if not c.center_infeasible and cell_feasibility_test(c, sys, eps):
                c.status = FEASIBLE
            else:
                failing.append(c)
        next_frontier = []
        for c in failing:
            if c.depth >= k_max:
                raise Assumption3Violated(
                    "assumption3_violated: cell at depth "
                    f"{c.depth} (cap {k_max}) centered at "
                    f"{[float(v) for v in c.center]} cannot be certified "
                    "one-step feasible; the conservative problem is "
                    "unsolvable somewhere in the domain")
            splits_a += 1
            next_frontier.extend(k.index for k in split(tree, c))
        tree.I.append({"t": t, "stage": "a", "splits": len(failing),
                       "leaves_by_depth": tree.leaves_by_depth()})
        if dump_cells:
            _dump(dump_cells, t, "a", tree)
        tree.frontier = next_frontier

    # stage (b): performance radius under the split budget
    b_passes = 0
    b_split_rounds = 0
    splits_b = 0
    tree.frontier = [c.index for c in tree.leaves()]
    while tree.frontier:
        t += 1
        b_passes += 1
        cells = [tree.cells[i] for i in tree.frontier]
        _solve_centers(sys, eps, tree, cells, solves, opts)
        failing = []
        for c in cells:
            if not c.center_infeasible and cell_beta_test(c, beta, eta, lam):
                c.status = BETA_OK
            else:
                failing.append(c)
        if not failing:
            tree.I.append({"t": t, "stage": "b", "splits": 0,
                           "leaves_by_depth": tree.leaves_by_depth()})
            if dump_cells:
                _dump(dump_cells, t, "b", tree)
            tree.frontier = []
            break
        # forced splits (infeasible centers) get the budget first
        forced = [c for c in failing if c.center_infeasible]
        for c in forced:
            if c.depth >= k_max:
                raise Assumption3Violated(
                    "assumption3_violated: center solve infeasible at depth "
                    f"{c.depth} (cap {k_max}), cell centered at "
                    f"{[float(v) for v in c.center]}")
        ranked = sorted((c for c in failing if not c.center_infeasible),
                        key=lambda c: (-_cell_err(c, lam, eta), c.depth, c.index))
        queue = forced + ranked
        affordable = (tree.N - tree.K) // n_child
        chosen = queue[: min(affordable, len(queue))]
        if not chosen:
            tree.I.append({"t": t, "stage": "b", "splits": 0,
                           "leaves_by_depth": tree.leaves_by_depth()})
            if dump_cells:
                _dump(dump_cells, t, "b", tree)
            tree.frontier = []
            break
        b_split_rounds += 1
        chosen_idx = {c.index for c in chosen}
        next_frontier = []
        for c in chosen:
            splits_b += 1
            tree.K += n_child
            next_frontier.extend(k.index for k in split(tree, c))
        # unaffordable failures stay leaves and compete again next round
        next_frontier.extend(c.index for c in failing if c.index not in chosen_idx)
        tree.I.append({"t": t, "stage": "b", "splits": len(chosen),
                       "leaves_by_depth": tree.leaves_by_depth()})
        if dump_cells:
            _dump(dump_cells, t, "b", tree)
        tree.frontier = next_frontier

    ds = from_results(sys, eps, [solves[i] for i in sorted(solves)])
    leaves = tree.leaves()
    uncert = [c for c in leaves if c.status != BETA_OK]
    report = {
        "kind": "verify_report",
        "certified": not uncert,
        "system": sys.name,
        "eps": float(eps),
        "h0": float(h0),
        "beta": float(beta),
        "eta": float(eta),
        "lam": float(lam),
        "budget": int(budget),
        "K": int(tree.K),
        "k_max": int(k_max),
        "iterations": t,
        "iterations_a": iterations_a,
        "b_passes": b_passes,
        "b_split_rounds": b_split_rounds,
        "splits_a": splits_a,
        "splits_b": splits_b,
        "cells_total": len(tree.cells),
        "leaves": len(leaves),
        "leaves_beta_ok": sum(c.status == BETA_OK for c in leaves),
        "center_solves": len(solves),
        "exact_feasibility": bool(sys.is_lti),
        "transitions": len(ds),
        "uncertified": [
            {
                "center": [float(v) for v in c.center],
                "radius": c.radius_f,
                "depth": c.depth,
                "status": c.status,
                "err": _cell_err(c, lam, eta),
            }
            for c in uncert[:200]
        ],
    }
    return tree, ds, report
