"""The nonparametric lookup policy and its cost bounds.

The policy answers a query x with the stored control of the transition
minimizing j_i + lambda * ||x - x_i||: a tradeoff between recorded cost-to-go
and proximity. The same scores give a pointwise upper bound on the true
cost-to-go, and j_i - lambda * ||x - x_i|| a lower bound, valid whenever
lambda dominates the cost-to-go's Lipschitz constant.

Lookup uses a sorted-by-j contiguous scan with early termination: entries are
visited in ascending j, and once j_i alone exceeds the best score seen, no
later entry can do better (distances only add). This keeps the argmin exactly
equal to a full scan, including index tie-breaks, with no tree structure.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import Dataset
from .errors import GammaLfConditionFailed
from .systems import System

_CHUNK = 512
_WARMUP_CALLS = 100

UNCERTIFIED_NOTE = "no Theorem-1 certificate"


def lambda_min(gamma: float, L_f: float, L_J: float) -> float:
    """Smallest regularization with a certified upper bound: ((1+gLf)/(1-gLf))*LJ."""
    g = gamma * L_f
    if not g < 1.0:
        raise GammaLfConditionFailed(
            f"gamma_Lf_condition_failed: gamma*L_f = {g} must be < 1")
    return (1.0 + g) / (1.0 - g) * L_J


class ScoreIndex:
    """Transitions sorted by ascending j, with original indices retained."""

    def __init__(self, states: np.ndarray, costs: np.ndarray):
        order = np.argsort(costs, kind="stable")  # stable: equal j keep index order
        self.order = order.astype(np.int64)
        self.j = np.ascontiguousarray(costs[order])
        self.X = np.ascontiguousarray(states[order])

    def __len__(self) -> int:
        return len(self.j)


def _dists(X: np.ndarray, x: np.ndarray, norm: str) -> np.ndarray:
    d = X - x
    if norm == "inf":
        return np.max(np.abs(d), axis=1)
    if norm == "two":
        return np.sqrt(np.sum(d * d, axis=1))
    if norm == "one":
        return np.sum(np.abs(d), axis=1)
    raise ValueError(f"unknown norm {norm!r}")


@dataclass(frozen=True)
class NppPolicy:
    """Immutable policy handle; act/j_upper/j_lower are reentrant."""

    dataset: Dataset
    lam: float
    norm: str
    index: ScoreIndex
    certified: bool
    note: str = ""


def make_policy(ds: Dataset, sys: Optional[System] = None,
                lam: Optional[float] = None) -> NppPolicy:
    """Build the policy; lambda defaults to lambda_min from declared constants.

    Without a valid default (gamma * L_f >= 1) an explicit lam is required and
    the policy is stamped uncertified; an explicit lam below the certified
    threshold is likewise uncertified. The paper's own linear benchmark runs
    in this mode with an ad-hoc lambda.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    floor = None
    if sys is not None and sys.gamma * sys.lipschitz.L_f < 1.0:
        floor = lambda_min(sys.gamma, sys.lipschitz.L_f, sys.lipschitz.L_J)
    if lam is None:
        if floor is None:
            raise GammaLfConditionFailed(
                "gamma_Lf_condition_failed: no certified default lambda exists "
                "(gamma*L_f >= 1); pass lam explicitly for uncertified mode")
        lam = floor
    lam = float(lam)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    certified = floor is not None and lam >= floor * (1.0 - 1e-12)
    note = "" if certified else UNCERTIFIED_NOTE
    return NppPolicy(ds, lam, ds.norm, ScoreIndex(ds.states(), ds.costs()),
                     certified, note)


def _scan_min(index: ScoreIndex, x: np.ndarray, lam: float, norm: str):
    """(orig_index, score) of min_i j_i + lam*d_i; ties to lowest orig index."""
    best = np.inf
    best_orig = -1
    N = len(index)
    k = 0
    while k < N:
        if index.j[k] > best:
            break  # j alone already loses; all later j are >= this one
        hi = min(k + _CHUNK, N)
        scores = index.j[k:hi] + lam * _dists(index.X[k:hi], x, norm)
        m = float(np.min(scores))
        if m <= best:
            origs = index.order[k:hi][scores == m]
            cand = int(np.min(origs))
            if m < best:
                best, best_orig = m, cand
            else:
                best_orig = min(best_orig, cand)
        k = hi
    return best_orig, best


def act(policy: NppPolicy, x) -> tuple[np.ndarray, int, float]:
    """Stored control of the best-scoring transition, its index, and the score."""
    x = np.asarray(x, dtype=float).reshape(-1)
    i, score = _scan_min(policy.index, x, policy.lam, policy.norm)
    return policy.dataset[i].u.copy(), i, score


def j_upper(policy: NppPolicy, x) -> float:
    """Pointwise upper bound min_i j_i + lambda * ||x - x_i||."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return _scan_min(policy.index, x, policy.lam, policy.norm)[1]


def j_lower(policy: NppPolicy, x) -> float:
    """Pointwise lower bound max_i j_i - lambda * ||x - x_i||.

    Scans descending j and stops once j_i alone cannot beat the best
    (subtracting a distance only hurts).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    index = policy.index
    best = -np.inf
    N = len(index)
    hi = N
    while hi > 0:
        if index.j[hi - 1] < best:
            break
        lo = max(hi - _CHUNK, 0)
        vals = index.j[lo:hi] - policy.lam * _dists(index.X[lo:hi], x, policy.norm)
        best = max(best, float(np.max(vals)))
        hi = lo
    return best


def j_upper_batch(policy: NppPolicy, X: np.ndarray) -> np.ndarray:
    """Vectorized j_upper over query rows (full scan; used by evaluators)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = policy.index.X
    out = np.full(X.shape[0], np.inf)
    for k in range(0, len(S), 4096):
        blk = S[k : k + 4096]
        d = np.abs(X[:, None, :] - blk[None, :, :])
        if policy.norm == "inf":
            dist = d.max(axis=2)
        elif policy.norm == "one":
            dist = d.sum(axis=2)
        else:
            dist = np.sqrt((d * d).sum(axis=2))
        out = np.minimum(out, (policy.index.j[k : k + 4096] + policy.lam * dist).min(axis=1))
    return out


def query_latency_bench(policy: NppPolicy, queries, repeats: int = 1) -> dict:
    """Wall-time quantiles of act() calls, warm-up excluded.

    Runs every query repeats times after 100 unrecorded warm-up calls;
    reports nanosecond percentiles of the per-call times.
    """
    queries = [np.asarray(q, dtype=float).reshape(-1) for q in queries]
    if repeats <= 0 or not queries:
        return {"count": 0, "p50_ns": None, "p90_ns": None, "p99_ns": None,
                "mean_ns": None, "min_ns": None, "max_ns": None}
    for k in range(min(_WARMUP_CALLS, len(queries) * repeats)):
        act(policy, queries[k % len(queries)])
    samples = np.empty(len(queries) * repeats)
    i = 0
    for _ in range(repeats):
        for q in queries:
            t0 = time.perf_counter_ns()
            act(policy, q)
            samples[i] = time.perf_counter_ns() - t0
            i += 1
    return {
        "count": int(samples.size),
        "p50_ns": float(np.percentile(samples, 50)),
        "p90_ns": float(np.percentile(samples, 90)),
        "p99_ns": float(np.percentile(samples, 99)),
        "mean_ns": float(samples.mean()),
        "min_ns": float(samples.min()),
        "max_ns": float(samples.max()),
    }
