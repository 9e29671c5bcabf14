"""Offline data collection: uniform-draw and grid-seeded conservative solves.

Both entry points solve the eroded-constraint problem from a batch of start
states, keep the optimal trajectories, and assemble a Dataset. `collect`
draws starts uniformly from the state box and attaches a stopping report
with the sample-complexity radius and post-hoc coverage diagnostics;
`collect_grid` seeds one trajectory per node of a uniform grid.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .dataset import Dataset, from_chains, from_results, from_value_solves
from .errors import NpmpcError
from .geometry import Box, erode, inscribed_radius, uniform_grid
from .solver import SolverOptions, solve_conservative_batch
from .systems import System, rollout_cost, step

__all__ = ["collect", "collect_grid", "collect_closed_loop",
           "largest_uncovered_radius"]

_PROBE_CHUNK = 2048


def _stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the (seed, key) slot.

    Keying draws by their index instead of drawing sequentially makes the
    i-th start state a function of (seed, i) alone, so any scheduling of the
    solves reproduces the same dataset.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def _recheck(sys: System, eps: float, res) -> bool:
    """Second, independent feasibility evaluation of a claimed-optimal solve.

    Re-simulates the control sequence and re-tests every membership
    constraint (interior states against the eroded box) rather than trusting
    the solver's status or its stored states.
    """
    x0 = np.asarray(res.states, dtype=float)[0]
    return math.isfinite(rollout_cost(sys, x0, res.controls, eps))


def _dists_to_set(P: np.ndarray, S: np.ndarray, norm: str) -> np.ndarray:
    """min over rows of S of ||p - s|| for each probe row p."""
    out = np.empty(P.shape[0])
    for a in range(0, P.shape[0], _PROBE_CHUNK):
        block = P[a : a + _PROBE_CHUNK]
        diff = np.abs(block[:, None, :] - S[None, :, :])
        d = diff.max(axis=2) if norm == "inf" else np.linalg.norm(diff, ord=float(norm), axis=2)
        out[a : a + _PROBE_CHUNK] = d.min(axis=1)
    return out


def largest_uncovered_radius(states: np.ndarray, X: Box, norm: str = "inf",
                             n_probes: int = 4096, seed: int = 0) -> dict:
    """Estimate sup over x in X of the distance to the nearest dataset state.

    Farthest-point probe: uniform probe points (plus the box corners, where
    the supremum of a max-min distance over a box tends to sit) are ranked by
    distance to the state set and the farthest one is the estimate. A lower
    bound on the true covering radius; exact only in the limit of dense
    probes.
    """
    rng = _stream(seed, 1)
    probes = X.sample(rng, n_probes)
    corners = np.array(np.meshgrid(*zip(X.lo, X.hi), indexing="ij")).reshape(X.n, -1).T
    probes = np.vstack([probes, corners])
    states = np.asarray(states, dtype=float)
    if states.size == 0:
        return {
            "largest_uncovered_radius_estimate": float(inscribed_radius(X)),
            "witness": [float(v) for v in X.center],
            "n_probes": int(probes.shape[0]),
        }
    d = _dists_to_set(probes, states, norm)
    k = int(np.argmax(d))
    return {
        "largest_uncovered_radius_estimate": float(d[k]),
        "witness": [float(v) for v in probes[k]],
        "n_probes": int(probes.shape[0]),
    }


def _pac_block(sys: System, eps: float, beta: float, eta: float, delta: float,
               lam: Optional[float], L: Optional[float], uncovered: float) -> dict:
    from .certify import sample_complexity

    block = {
        "beta": float(beta), "eta": float(eta), "delta": float(delta),
        "lam": None if lam is None else float(lam),
        "L": None if L is None else float(L),
        "r": None, "n_bound": None, "error": None,
        "holds_at_r": None, "holds_at_2r": None,
    }
    try:
        r, n_bound = sample_complexity(sys, beta, eta, delta, eps, lam=lam, L=L)
    except NpmpcError as exc:
        block["error"] = str(exc)
        return block
    block["r"] = float(r)
    block["n_bound"] = int(n_bound)
    # the bound's proof covers with ball pairs, so the honest test radius is
    # ambiguous between r and 2r; report the verdict at both
    block["holds_at_r"] = bool(uncovered <= r)
    block["holds_at_2r"] = bool(uncovered <= 2.0 * r)
    return block


def _solve_and_filter(sys: System, eps: float, X0: np.ndarray,
                      opts: Optional[SolverOptions], jobs: int = 1):
    results = solve_conservative_batch(sys, X0, eps, opts=opts, jobs=jobs)
    kept, infeasible, unconverged, rejected = [], [], [], []
    for i, res in enumerate(results):
        if res.status == "optimal":
            if _recheck(sys, eps, res):
                kept.append((i, res))
            else:
                rejected.append(i)
        elif res.status == "infeasible":
            infeasible.append(i)
        else:
            unconverged.append(i)
    return kept, infeasible, unconverged, rejected


def collect(sys: System, eps: float, n: int, seed: int, *,
            beta: float = 5.0, eta: float = 0.01, delta: float = 0.1,
            lam: Optional[float] = None, L: Optional[float] = None,
            values_only: bool = False,
            n_probes: int = 4096,
            opts: Optional[SolverOptions] = None,
            jobs: int = 1) -> tuple[Dataset, dict]:
    """Uniform-start data collection with a stopping report.

    Draws exactly `n` start states uniformly from the state box, one per
    independent (seed, i)-keyed stream, solves each, and ingests the optimal
    trajectories in draw order. Infeasible draws spend budget instead of
    being redrawn: the collection loop runs exactly `n` times regardless of
    outcomes, so `n` is the number of solve attempts, not of successes.

    The report carries the sample-complexity pair (r, n_bound), a
    farthest-point estimate of the largest dataset-free ball in X, and an
    `assumption3_violated` flag set when any draw was unsolvable. An
    all-infeasible budget returns an empty dataset with the flag set.
    """
    if n < 1:
        raise ValueError(f"need at least one draw, got n={n}")
    if erode(sys.X, eps, sys.norm).is_empty:
        raise ValueError(f"eps={eps} erodes the state box to nothing")
    X0 = np.stack([sys.X.sample(_stream(seed, 0, i)) for i in range(n)])
    kept, infeasible, unconverged, rejected = _solve_and_filter(sys, eps, X0, opts, jobs)
    ordered = [res for _, res in kept]
    if values_only:
        ds = from_value_solves(sys, eps, ordered)
    else:
        ds = from_results(sys, eps, ordered)
    cover = largest_uncovered_radius(ds.states(), sys.X, sys.norm,
                                     n_probes=n_probes, seed=seed)
    report = {
        "kind": "collect_report",
        "system": sys.name,
        "eps": float(eps),
        "seed": int(seed),
        "n": int(n),
        "n_optimal": len(kept),
        "n_infeasible": len(infeasible),
        "n_unconverged": len(unconverged),
        "n_rejected_recheck": len(rejected),
        "infeasible_x0": [X0[i].tolist() for i in infeasible[:50]],
        "assumption3_violated": bool(infeasible),
        "transitions": len(ds),
        "trajectories": ds.n_trajectories(),
        "values_only": bool(values_only),
        "cover": cover,
        "pac": _pac_block(sys, eps, beta, eta, delta, lam, L,
                          cover["largest_uncovered_radius_estimate"]),
    }
    return ds, report


def collect_grid(sys: System, eps: float, g: int, *,
                 values_only: bool = False,
                 opts: Optional[SolverOptions] = None,
                 jobs: int = 1) -> tuple[Dataset, dict]:
    """One trajectory per node of a g-per-axis uniform grid over X.

    The experiment-reproduction path: solve from every grid node, record the
    nodes whose conservative problem is infeasible, ingest the rest in node
    order. `values_only` keeps just each node's start state with its
    whole-horizon optimal cost instead of the full trajectory chain.
    """
    if g < 2:
        raise ValueError(f"need at least two grid points per axis, got g={g}")
    if erode(sys.X, eps, sys.norm).is_empty:
        raise ValueError(f"eps={eps} erodes the state box to nothing")
    X0 = uniform_grid(sys.X, g)
    kept, infeasible, unconverged, rejected = _solve_and_filter(sys, eps, X0, opts, jobs)
    ordered = [res for _, res in kept]
    if values_only:
        ds = from_value_solves(sys, eps, ordered)
    else:
        ds = from_results(sys, eps, ordered)
    report = {
        "kind": "collect_grid_report",
        "system": sys.name,
        "eps": float(eps),
        "g": int(g),
        "nodes": int(X0.shape[0]),
        "n_optimal": len(kept),
        "n_infeasible": len(infeasible),
        "n_unconverged": len(unconverged),
        "n_rejected_recheck": len(rejected),
        "infeasible_nodes": infeasible[:200],
        "infeasible_x0": [X0[i].tolist() for i in infeasible[:50]],
        "assumption3_violated": bool(infeasible),
        "transitions": len(ds),
        "trajectories": ds.n_trajectories(),
        "values_only": bool(values_only),
    }
    return ds, report


def collect_closed_loop(sys: System, eps: float, starts, steps: int, *,
                        opts: Optional[SolverOptions] = None,
                        jobs: int = 1) -> tuple[Dataset, dict]:
    """Chains from a re-solving controller: fresh whole-horizon solve at
    every visited state, first control applied, repeat for `steps` steps.

    Every stored cost is the full-horizon optimum from its own state and
    every stored control is the first move of such a solve. Open-loop
    trajectory tails do not have this property: past the discount horizon
    the solver is indifferent, so late tail segments can carry large
    renormalized costs and arbitrary controls. Use these chains when stored
    costs must estimate the same value function everywhere (policy rollout
    guarantees); use collect / collect_grid tails when matching the offline
    protocol of a single solve per start.

    Chains whose current solve comes back non-optimal stop early and keep
    their prefix; a chain infeasible at its head contributes nothing. All
    solves run batched per step, so results are independent of `jobs`.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    if steps < 1:
        raise ValueError(f"need at least one step per chain, got steps={steps}")
    if erode(sys.X, eps, sys.norm).is_empty:
        raise ValueError(f"eps={eps} erodes the state box to nothing")
    k = starts.shape[0]
    chain_states = [[x] for x in starts]
    chain_controls: list = [[] for _ in range(k)]
    chain_values: list = [[] for _ in range(k)]
    stopped: dict = {}
    alive = list(range(k))
    n_solves = 0
    for t in range(steps):
        if not alive:
            break
        X0 = np.array([chain_states[c][-1] for c in alive])
        results = solve_conservative_batch(sys, X0, eps, opts=opts, jobs=jobs)
        n_solves += len(alive)
        next_alive = []
        for c, res in zip(alive, results):
            if res.status != "optimal" or not _recheck(sys, eps, res):
                stopped[c] = {"step": t, "status": res.status}
                continue
            x = chain_states[c][-1]
            u = np.asarray(res.controls, dtype=float)[0]
            chain_controls[c].append(u)
            chain_values[c].append(float(res.cost))
            chain_states[c].append(step(sys, x, u))
            next_alive.append(c)
        alive = next_alive
    chains = [(np.array(chain_states[c]), np.array(chain_controls[c]),
               np.array(chain_values[c]))
              for c in range(k) if chain_controls[c]]
    ds = from_chains(sys, eps, chains)
    report = {
        "kind": "collect_closed_loop_report",
        "system": sys.name,
        "eps": float(eps),
        "starts": int(k),
        "steps": int(steps),
        "chains": len(chains),
        "infeasible_heads": sorted(c for c, s in stopped.items() if s["step"] == 0),
        "stopped_early": {int(c): s for c, s in stopped.items() if s["step"] > 0},
        "solves": int(n_solves),
        "transitions": len(ds),
    }
    return ds, report
