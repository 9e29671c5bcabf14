"""Trajectory datasets: states, controls, and tail costs with successor links.

A dataset is an indexed list of transitions (x, u, j) where j is the cost-to-go
of the generating trajectory from x. Transitions within one trajectory are
linked through succ indices; the closure property (every selectable action's
successor state is itself in the dataset) is what the performance bound rests
on, so it is tracked explicitly and can be recomputed at any time.

Persistence is JSON lines with a header record, floats at 17 significant
digits, so save/load round-trips are bit-exact.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np

from . import _jsonutil
from .systems import System, config_digest

_FORMAT = "npmpc-ds"
_VERSION = 1
_DEDUP_TOL = 1e-12
_SUCC_TOL = 1e-9


@dataclass(frozen=True)
class Transition:
    """One stored tuple: state, applied control, tail cost, and links.

    succ indexes the transition holding the successor state f(x, u), or None
    for the last step of a trajectory. traj_id and step record provenance.
    """

    x: np.ndarray
    u: np.ndarray
    j: float
    succ: Optional[int]
    traj_id: int
    step: int


class Dataset:
    """Immutable indexed collection of transitions.

    closed means: every transition that is not the last step of its
    trajectory has a valid succ link. Terminal transitions are exempt; their
    j already includes the terminal cost (see check_closure).
    """

    def __init__(self, transitions=(), eps: float = 0.0, norm: str = "inf",
                 system_hash: str = "", closed: Optional[bool] = None):
        self.transitions = tuple(transitions)
        self.eps = float(eps)
        self.norm = norm
        self.system_hash = system_hash
        self.closed = check_closure(self) if closed is None else bool(closed)

    def __len__(self) -> int:
        return len(self.transitions)

    def __getitem__(self, i: int) -> Transition:
        return self.transitions[i]

    def __iter__(self):
        return iter(self.transitions)

    # cached column views used by the policy index and the certifiers
    def states(self) -> np.ndarray:
        if not hasattr(self, "_states"):
            n = self.transitions[0].x.shape[0] if self.transitions else 0
            arr = np.array([t.x for t in self.transitions], dtype=float).reshape(-1, n)
            arr.setflags(write=False)
            self._states = arr
        return self._states

    def controls(self) -> np.ndarray:
        if not hasattr(self, "_controls"):
            m = self.transitions[0].u.shape[0] if self.transitions else 0
            arr = np.array([t.u for t in self.transitions], dtype=float).reshape(-1, m)
            arr.setflags(write=False)
            self._controls = arr
        return self._controls

    def costs(self) -> np.ndarray:
        if not hasattr(self, "_costs"):
            arr = np.array([t.j for t in self.transitions], dtype=float)
            arr.setflags(write=False)
            self._costs = arr
        return self._costs

    def n_trajectories(self) -> int:
        return len({t.traj_id for t in self.transitions})


def new_dataset(sys: System, eps: float) -> Dataset:
    """Empty dataset stamped with the generating system's config digest."""
    return Dataset((), eps, sys.norm, config_digest(sys), closed=True)


def _quantize(x: np.ndarray):
    return tuple(int(q) for q in np.round(x / _DEDUP_TOL))


class _DedupIndex:
    """Hash of quantized states for exact-tolerance duplicate lookup."""

    def __init__(self, n: int):
        self.cells: dict = {}
        self.offsets = list(product((-1, 0, 1), repeat=n))

    def find(self, x: np.ndarray, transitions) -> Optional[int]:
        base = _quantize(x)
        for off in self.offsets:
            idx = self.cells.get(tuple(b + o for b, o in zip(base, off)))
            if idx is not None and float(np.max(np.abs(transitions[idx].x - x))) <= _DEDUP_TOL:
                return idx
        return None

    def add(self, x: np.ndarray, idx: int) -> None:
        self.cells[_quantize(x)] = idx


def _index_of(ds: Dataset) -> _DedupIndex:
    n = ds.transitions[0].x.shape[0] if ds.transitions else 0
    index = _DedupIndex(n)
    for i, t in enumerate(ds.transitions):
        index.add(t.x, i)
    return index


def _tail_costs(sys: System, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
    H = controls.shape[0]
    tails = np.empty(H + 1)
    tails[H] = float(sys.terminal_cost(states[H]))
    for t in range(H - 1, -1, -1):
        tails[t] = float(sys.stage_cost(states[t], controls[t])) + sys.gamma * tails[t + 1]
    return tails[:H]


def _append_trajectory(transitions: list, index: _DedupIndex, sys: System,
                       states: np.ndarray, controls: np.ndarray, traj_id: int,
                       js: Optional[np.ndarray] = None) -> None:
    """Place one trajectory, deduplicating against other trajectories.

    A repeat of a foreign state (within 1e-12) is not appended: the smaller
    tail cost keeps the slot (replacing the entry in place, index preserved,
    so links into it stay valid) and this trajectory's chain routes through
    it. Repeats within the same trajectory are kept so the stored trajectory
    shape matches the solve.

    js overrides the backward-recursion tail costs with explicit per-step
    values (used when each step carries its own whole-horizon solve cost).
    """
    H = controls.shape[0]
    tails = _tail_costs(sys, states, controls) if js is None else np.asarray(js, dtype=float)
    prev_slot: Optional[int] = None
    for t in range(H):
        x = np.array(states[t], dtype=float)
        x.setflags(write=False)
        u = np.array(controls[t], dtype=float)
        u.setflags(write=False)
        dup = index.find(x, transitions)
        foreign = dup is not None and transitions[dup].traj_id != traj_id
        if not foreign:
            slot = len(transitions)
            transitions.append(Transition(x, u, float(tails[t]), None, traj_id, t))
            index.add(x, slot)
        elif tails[t] < transitions[dup].j:
            transitions[dup] = Transition(x, u, float(tails[t]), None, traj_id, t)
            slot = dup
        else:
            slot = dup
        # link the previous step here unless it already has its own successor
        if prev_slot is not None and transitions[prev_slot].succ is None:
            p = transitions[prev_slot]
            transitions[prev_slot] = Transition(p.x, p.u, p.j, slot, p.traj_id, p.step)
        prev_slot = slot


def ingest_trajectory(ds: Dataset, result, sys: System) -> Dataset:
    """Append one optimal trajectory's transitions, with tail costs and links.

    Tail costs satisfy j_t = c(x_t, u_t) + gamma * j_{t+1} by backward
    recursion, ending at the discounted terminal cost. States already present
    (within 1e-12) are not duplicated; they keep the smaller j and the new
    trajectory's links route through them.
    """
    if result.status != "optimal":
        raise ValueError("only optimal solves enter a dataset, got status "
                         f"{result.status!r}")
    if result.controls is None or result.states is None:
        raise ValueError("solve result carries no trajectory")
    transitions = list(ds.transitions)
    index = _index_of(ds)
    traj_id = max((t.traj_id for t in ds.transitions), default=-1) + 1
    _append_trajectory(transitions, index, sys,
                       np.asarray(result.states, dtype=float),
                       np.asarray(result.controls, dtype=float), traj_id)
    return Dataset(transitions, ds.eps, ds.norm, ds.system_hash, closed=None)


def from_results(sys: System, eps: float, results) -> Dataset:
    """Dataset from many solve results at once (skips non-optimal entries)."""
    transitions: list = []
    index = _DedupIndex(sys.n)
    traj_id = 0
    for res in results:
        if res.status != "optimal":
            continue
        _append_trajectory(transitions, index, sys,
                           np.asarray(res.states, dtype=float),
                           np.asarray(res.controls, dtype=float), traj_id)
        traj_id += 1
    return Dataset(transitions, eps, sys.norm,
                   config_digest(sys), closed=None)


def from_chains(sys: System, eps: float, chains) -> Dataset:
    """Dataset from closed-loop chains carrying per-state solve values.

    Each chain is (states, controls, values) with states of shape (L+1, n),
    controls (L, m), values (L,): state k was visited by a re-solving
    controller, values[k] is the whole-horizon optimal cost from it, and
    states[k+1] = f(states[k], controls[k]). Successor links run down each
    chain; the final stored state is exempt from closure like the last step
    of any trajectory.

    Use this instead of from_results when stored costs must be values of the
    same full-horizon problem at every state. Open-loop tail costs are
    values of ever-shorter remaining horizons, and past the discount horizon
    the optimizer is indifferent, so open-loop tails can attach large
    renormalized costs (and arbitrary controls) to late states; chains from
    per-state re-solves cannot.
    """
    transitions: list = []
    index = _DedupIndex(sys.n)
    for traj_id, (states, controls, values) in enumerate(chains):
        states = np.asarray(states, dtype=float)
        controls = np.asarray(controls, dtype=float)
        values = np.asarray(values, dtype=float)
        if not (states.shape[0] == controls.shape[0] + 1 == values.shape[0] + 1):
            raise ValueError("chain shapes disagree: need L+1 states for L "
                             "controls and L values")
        _append_trajectory(transitions, index, sys, states, controls,
                           traj_id, js=values)
    return Dataset(transitions, eps, sys.norm, config_digest(sys), closed=None)


def from_value_solves(sys: System, eps: float, results) -> Dataset:
    """Dataset of initial states only, each carrying its full solve cost.

    One single-transition trajectory per optimal result: the start state, the
    first control, and the whole-horizon optimal cost from that start. No
    successor links, so the dataset is trivially closed.

    This form exists because interior tail costs are values of shorter
    remaining-horizon problems: on short undiscounted horizons they undershoot
    the whole-horizon optimum from the same state, so bounds built from them
    cannot sandwich it. Use this constructor when the bounds must bracket the
    optimum itself; use from_results when the policy needs trajectory chains.
    """
    transitions: list = []
    index = _DedupIndex(sys.n)
    traj_id = 0
    for res in results:
        if res.status != "optimal":
            continue
        x = np.array(np.asarray(res.states, dtype=float)[0])
        x.setflags(write=False)
        u = np.array(np.asarray(res.controls, dtype=float)[0])
        u.setflags(write=False)
        j = float(res.cost)
        dup = index.find(x, transitions)
        if dup is None:
            transitions.append(Transition(x, u, j, None, traj_id, 0))
            index.add(x, len(transitions) - 1)
            traj_id += 1
        elif j < transitions[dup].j:
            old = transitions[dup]
            transitions[dup] = Transition(x, u, j, None, old.traj_id, 0)
    return Dataset(transitions, eps, sys.norm, config_digest(sys), closed=True)


def check_closure(ds: Dataset, sys: Optional[System] = None,
                  tol: float = _SUCC_TOL) -> bool:
    """True iff every non-terminal transition's successor is in the dataset.

    The last step of each trajectory is exempt (its j already includes the
    terminal cost; the paper leaves this step's closure unspecified). With a
    system handle the check also verifies succ targets carry f(x, u) within
    tol; without one it is structural (links present and in range).
    """
    if not ds.transitions:
        return True
    last_step: dict = {}
    for t in ds.transitions:
        last_step[t.traj_id] = max(last_step.get(t.traj_id, -1), t.step)
    pending = []
    for t in ds.transitions:
        if t.step == last_step[t.traj_id]:
            continue
        if t.succ is None or not (0 <= t.succ < len(ds.transitions)):
            return False
        pending.append(t)
    if sys is None or not pending:
        return True
    X = np.array([t.x for t in pending])
    U = np.array([t.u for t in pending])
    succ_states = np.array([ds.transitions[t.succ].x for t in pending])
    nxt = sys.dynamics(X, U)
    return bool(np.max(np.abs(nxt - succ_states)) <= tol)


def save(ds: Dataset, path) -> None:
    header = {
        "format": _FORMAT,
        "version": _VERSION,
        "eps": ds.eps,
        "norm": ds.norm,
        "system_hash": ds.system_hash,
        "count": len(ds),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_jsonutil.dumps(header) + "\n")
        for i, t in enumerate(ds.transitions):
            row = {
                "i": i,
                "x": [float(v) for v in t.x],
                "u": [float(v) for v in t.u],
                "j": float(t.j),
                "succ": t.succ,
                "traj": t.traj_id,
                "step": t.step,
            }
            fh.write(_jsonutil.dumps(row) + "\n")


def load(path, expect_system_hash: Optional[str] = None) -> Dataset:
    """Read a dataset saved by save(); closure is recomputed structurally."""
    with open(path, "r", encoding="utf-8") as fh:
        header = _jsonutil.loads(fh.readline())
        if header.get("format") != _FORMAT:
            raise ValueError(f"not a dataset file: format {header.get('format')!r}")
        if header.get("version") != _VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')!r}")
        transitions = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = _jsonutil.loads(line)
            x = np.array(row["x"], dtype=float)
            x.setflags(write=False)
            u = np.array(row["u"], dtype=float)
            u.setflags(write=False)
            transitions.append(Transition(x, u, float(row["j"]), row["succ"],
                                          int(row["traj"]), int(row["step"])))
    if len(transitions) != header["count"]:
        raise ValueError(f"dataset truncated: header says {header['count']} rows, "
                         f"found {len(transitions)}")
    if expect_system_hash is not None and header["system_hash"] != expect_system_hash:
        warnings.warn("dataset was built for a different system configuration "
                      f"({header['system_hash'][:16]}... vs expected "
                      f"{expect_system_hash[:16]}...)", stacklevel=2)
    return Dataset(transitions, header["eps"], header["norm"], header["system_hash"])


def validate(ds: Dataset, sys: System, tol: float = _SUCC_TOL) -> dict:
    """Structural report: closure, link consistency, tail-cost recursion.

    The recursion check j_t = c + gamma * j_{t+1} uses tolerance
    tol * max(1, |j_t|) per linked pair; it holds exactly for single
    trajectories and within the optimality of the solves after dedup.
    """
    bad_links = 0
    bad_recursion = 0
    for t in ds.transitions:
        if t.succ is None:
            continue
        target = ds.transitions[t.succ]
        nxt = np.asarray(sys.dynamics(t.x[None, :], t.u[None, :]))[0]
        if float(np.max(np.abs(nxt - target.x))) > tol:
            bad_links += 1
            continue
        want = float(sys.stage_cost(t.x, t.u)) + sys.gamma * target.j
        if not math.isfinite(want) or abs(t.j - want) > tol * max(1.0, abs(t.j)):
            bad_recursion += 1
    closed = check_closure(ds, sys, tol)
    return {
        "count": len(ds),
        "trajectories": ds.n_trajectories(),
        "closed": closed,
        "closed_flag_consistent": closed == ds.closed,
        "bad_links": bad_links,
        "bad_recursion": bad_recursion,
    }
