"""Closed-loop evaluation and the latency/optimality trade-off harness.

Rolls out controllers (the nonparametric lookup policy or receding-horizon
MPC) on a system, timing every query on a monotonic clock, and summarizes
realized cost against a baseline optimum as a relative gap. The trade-off
study sweeps dataset sizes and MPC horizons over a shared set of random
starts and emits per-rollout CSV rows plus per-controller quantile
summaries.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .policy import NppPolicy, act, make_policy
from .solver import SolverOptions, mpc_solve, solve_conservative_batch
from .systems import System, step

__all__ = [
    "RolloutReport", "TradeoffRow", "NppController", "MpcController",
    "rollout", "relative_gap", "tradeoff_study",
]


@dataclass(frozen=True)
class RolloutReport:
    """One closed-loop run: trajectory, timing, and the recomputed cost.

    realized_cost is the discounted stage-cost sum plus discounted terminal
    cost, recomputed here from the stored states and controls; it is +inf
    when the rollout violated a constraint or was truncated, matching the
    convention that constrained cost is infinite outside the feasible set.
    """
    x0: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    realized_cost: float
    violated: bool
    per_step_latency: list
    controller_id: str


@dataclass(frozen=True)
class TradeoffRow:
    """Per-controller summary: latency and gap quantiles over all rollouts."""
    controller_id: str
    median_latency_ns: float
    latency_q25: float
    latency_q50: float
    latency_q75: float
    gap_q25: float
    gap_q50: float
    gap_q75: float
    violations: int
    n: int

    def as_dict(self) -> dict:
        return {
            "controller_id": self.controller_id,
            "median_latency_ns": self.median_latency_ns,
            "latency_q25": self.latency_q25,
            "latency_q50": self.latency_q50,
            "latency_q75": self.latency_q75,
            "gap_q25": self.gap_q25,
            "gap_q50": self.gap_q50,
            "gap_q75": self.gap_q75,
            "violations": self.violations,
            "n": self.n,
        }


class NppController:
    """Lookup-policy controller: score-minimizing datapoint's control."""

    def __init__(self, policy: NppPolicy, controller_id: str):
        self.policy = policy
        self.controller_id = controller_id

    def reset(self) -> None:
        pass

    def __call__(self, x) -> Optional[np.ndarray]:
        u, _, _ = act(self.policy, x)
        return u


class MpcController:
    """Receding-horizon controller: fresh H-step solve at every state.

    The lookahead at step t is min(H, T - t), never below 1, so the task's
    end is respected: with H = T this is shrinking-horizon replanning,
    which reproduces the open-loop optimum along its own trajectory.

    Solves cold by default so each query's latency is a property of the
    state alone and local solves keep their restart protection;
    warm_start=True shifts the previous solution forward instead, which is
    faster but couples consecutive queries.
    """

    def __init__(self, sys: System, H: int, eps: float = 0.0,
                 opts: Optional[SolverOptions] = None,
                 controller_id: Optional[str] = None,
                 warm_start: bool = False):
        self.sys = sys
        self.H = int(H)
        self.eps = float(eps)
        self.opts = opts
        self.warm_start = warm_start
        self.controller_id = controller_id or f"mpc_h{H}"
        self._warm = None
        self._t = 0

    def reset(self) -> None:
        self._warm = None
        self._t = 0

    def __call__(self, x) -> Optional[np.ndarray]:
        lookahead = max(1, min(self.H, self.sys.T - self._t))
        self._t += 1
        warm = self._warm if self.warm_start else None
        if warm is not None and warm.shape[0] != lookahead:
            warm = warm[:lookahead]
        res = mpc_solve(self.sys, x, self.eps, lookahead, self.opts, warm=warm)
        if res.controls is None or res.status == "infeasible":
            self._warm = None
            return None
        if self.warm_start:
            U = res.controls
            self._warm = np.vstack([U[1:], U[-1:]])
        return np.array(res.controls[0])


def _realized_cost(sys: System, states: np.ndarray, controls: np.ndarray,
                   violated: bool) -> float:
    if violated:
        return math.inf
    H = controls.shape[0]
    disc = sys.gamma ** np.arange(H)
    stage = np.array([float(sys.stage_cost(states[t], controls[t]))
                      for t in range(H)])
    tail = float(sys.terminal_cost(states[H]))
    if math.isinf(tail):
        return math.inf
    return float(stage @ disc + sys.gamma**H * tail)


def rollout(sys: System, controller, x0, T: Optional[int] = None) -> RolloutReport:
    """Closed-loop run of `controller` from x0 for T steps.

    Each control query is timed individually on the monotonic clock. A
    controller returning None (its solve came back infeasible) truncates
    the run and marks it violated. The violation flag is recomputed from
    the realized states and controls with exact box membership, never taken
    from the controller.
    """
    x0 = np.asarray(x0, dtype=float).reshape(sys.n)
    if not sys.X.contains(x0):
        raise ValueError(f"x0 {x0.tolist()} is outside the state box")
    horizon = sys.T if T is None else int(T)
    if hasattr(controller, "reset"):
        controller.reset()
    cid = getattr(controller, "controller_id", "controller")
    states = [x0]
    controls: list = []
    latency: list = []
    truncated = False
    x = x0
    for _ in range(horizon):
        t0 = time.perf_counter_ns()
        u = controller(x)
        latency.append(time.perf_counter_ns() - t0)
        if u is None:
            truncated = True
            break
        u = np.asarray(u, dtype=float).reshape(sys.m)
        controls.append(u)
        x = step(sys, x, u)
        states.append(x)
    states_arr = np.array(states)
    controls_arr = (np.array(controls) if controls
                    else np.zeros((0, sys.m)))
    violated = (truncated
                or not bool(np.all(sys.X.contains(states_arr)))
                or (len(controls) > 0
                    and not bool(np.all(sys.U.contains(controls_arr)))))
    realized = _realized_cost(sys, states_arr, controls_arr, violated)
    return RolloutReport(
        x0=x0,
        states=states_arr,
        controls=controls_arr,
        realized_cost=realized,
        violated=violated,
        per_step_latency=latency,
        controller_id=cid,
    )


def relative_gap(report: RolloutReport, baseline_J: float, eta: float) -> float:
    """(realized - baseline) / (baseline + eta_report).

    eta_report is 0 whenever the baseline is strictly positive, so the gap
    is the plain normalized suboptimality; the eta shift only rescues a
    zero baseline.
    """
    if baseline_J < 0:
        raise ValueError(f"need baseline_J >= 0, got {baseline_J}")
    eta_r = 0.0 if baseline_J > 0 else float(eta)
    den = baseline_J + eta_r
    num = report.realized_cost - baseline_J
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return num / den


# ---------------------------------------------------------------------------
# trade-off study
# ---------------------------------------------------------------------------

def _baseline_fn(sys: System, opts: Optional[SolverOptions]):
    """Value estimate for the unmodified problem: interpolating table where
    one can be built (low state dimension, finite terminal cost), full-
    horizon solves otherwise."""
    from .systems import BoxTerminal
    if sys.n <= 3 and not isinstance(sys.terminal_model, BoxTerminal):
        from .oracle import dp_build_cached, dp_query
        orc = dp_build_cached(sys, 0.0)
        return lambda X: np.array([float(dp_query(orc, x)) for x in X]), "dp_oracle"

    def solve_batch(X):
        results = solve_conservative_batch(sys, X, 0.0, opts=opts)
        return np.array([r.cost for r in results])

    return solve_batch, f"mpc_h{sys.T}"


def _draw_starts(sys: System, m: int, seed: int, baseline, max_factor: int = 50):
    """Uniform starts with finite baseline value; infeasible draws redrawn."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    xs: list = []
    js: list = []
    redraws = 0
    attempts = 0
    cap = max_factor * m
    while len(xs) < m:
        want = m - len(xs)
        cand = sys.X.sample(rng, want)
        vals = baseline(cand)
        for x, j in zip(cand, vals):
            if math.isfinite(j):
                xs.append(x)
                js.append(float(j))
            else:
                redraws += 1
        attempts += want
        if attempts >= cap:
            raise RuntimeError(
                f"could not find {m} baseline-feasible starts in {cap} draws")
    return np.array(xs), np.array(js), redraws


def _warm_up(controller, sys: System, queries: int, seed: int) -> None:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(9,)))
    if hasattr(controller, "reset"):
        controller.reset()
    for _ in range(queries):
        controller(sys.X.sample(rng))
    if hasattr(controller, "reset"):
        controller.reset()


def _quantiles(v: np.ndarray) -> tuple:
    finite = v[np.isfinite(v)]
    if finite.size == 0:
        return (math.inf, math.inf, math.inf)
    q = np.percentile(finite, [25, 50, 75])
    return (float(q[0]), float(q[1]), float(q[2]))


def tradeoff_study(sys: System, datasets: dict, horizons, M: int, seed: int, *,
                   lam: Optional[float] = None,
                   eta: float = 0.01,
                   T: Optional[int] = None,
                   opts: Optional[SolverOptions] = None,
                   warmup_queries: int = 100,
                   out_dir: Optional[str] = None) -> tuple:
    """Latency/optimality sweep over lookup datasets and MPC horizons.

    datasets maps a grid label g to a Dataset; each becomes controller
    npp_g{g}. Each horizon H becomes controller mpc_h{H}. All controllers
    roll out from the same M uniform starts (fixed seed; starts whose
    baseline value is infinite are dropped and redrawn, count reported).
    Rollouts run sequentially on the calling thread, one query timed at a
    time after a warm-up of at least `warmup_queries` untimed queries, so
    latencies never include batch or contention effects.

    Returns (rows, details, meta): per-controller TradeoffRow summaries,
    per-rollout detail dicts, and the run metadata. With out_dir set,
    writes rows.csv (controller, x0_index, latency_ns, realized_cost,
    baseline_cost, gap) and summary.json.
    """
    baseline, baseline_id = _baseline_fn(sys, opts)
    X0, base_J, redraws = _draw_starts(sys, M, seed, baseline)
    horizon = sys.T if T is None else int(T)

    controllers: list = []
    for g in sorted(datasets):
        pol = make_policy(datasets[g], sys, lam=lam)
        controllers.append(NppController(pol, f"npp_g{g}"))
    for H in sorted(int(h) for h in horizons):
        controllers.append(MpcController(sys, H, 0.0, opts))

    details: list = []
    rows: list = []
    for ctl in controllers:
        _warm_up(ctl, sys, warmup_queries, seed)
        step_lat: list = []
        gaps: list = []
        violations = 0
        for i in range(M):
            rep = rollout(sys, ctl, X0[i], horizon)
            gap = relative_gap(rep, base_J[i], eta)
            lat_med = float(np.median(rep.per_step_latency))
            step_lat.extend(rep.per_step_latency)
            gaps.append(gap)
            violations += int(rep.violated)
            details.append({
                "controller": ctl.controller_id,
                "x0_index": i,
                "latency_ns": lat_med,
                "realized_cost": rep.realized_cost,
                "baseline_cost": base_J[i],
                "gap": gap,
            })
        lat = np.array(step_lat, dtype=float)
        gap_arr = np.array(gaps, dtype=float)
        lq = _quantiles(lat)
        gq = _quantiles(gap_arr)
        rows.append(TradeoffRow(
            controller_id=ctl.controller_id,
            median_latency_ns=lq[1],
            latency_q25=lq[0], latency_q50=lq[1], latency_q75=lq[2],
            gap_q25=gq[0], gap_q50=gq[1], gap_q75=gq[2],
            violations=violations,
            n=M,
        ))

    meta = {
        "kind": "tradeoff_summary",
        "system": sys.name,
        "m": int(M),
        "seed": int(seed),
        "rollout_T": int(horizon),
        "baseline": baseline_id,
        "redraws": int(redraws),
        "lam": None if lam is None else float(lam),
        "eta": float(eta),
        "grids": sorted(int(g) for g in datasets),
        "horizons": sorted(int(h) for h in horizons),
        "latency_note": ("per-step wall time on one dedicated worker, "
                         f"warm-up of {warmup_queries} queries excluded"),
        "rows": [r.as_dict() for r in rows],
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "rows.csv"), "w", newline="",
                  encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=[
                "controller", "x0_index", "latency_ns", "realized_cost",
                "baseline_cost", "gap"])
            w.writeheader()
            w.writerows(details)
        with open(os.path.join(out_dir, "summary.json"), "w",
                  encoding="utf-8") as f:
            json.dump(meta, f, indent=2)
    return rows, details, meta
