"""Trajectory optimization over eroded state boxes.

Three solve paths, picked by plant structure:

* LTI plants with quadratic costs are condensed into the control sequence
  and solved by projected gradient with momentum, inside an augmented-
  Lagrangian shell for the state boxes.
* LTI plants with constant-plus-L1 costs are linear programs in the split
  u = p - q and go straight to HiGHS.
* Everything else runs batched constrained shooting (Riccati sweeps with
  box-aware feedforward) under the same augmented-Lagrangian shell, with
  zero-control plus random restarts.

Both paths are batched over initial states; every element's arithmetic is
row-independent so results do not depend on how a batch is scheduled.
Returned trajectories are re-simulated through systems.step and costs are
recomputed by systems.rollout_cost, so downstream consumers never see
solver-internal numbers.

State boxes are tightened internally by KAPPA = 1e-9: augmented-Lagrangian
iterates satisfy constraints only to tolerance, and the tightening makes the
returned states pass exact closed-box membership tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .geometry import erode
from .systems import (
    INF,
    BoxTerminal,
    ConstPlusL1Cost,
    QuadCost,
    QuadTerminal,
    System,
    rollout_cost,
    simulate,
)

KAPPA = 1e-9
_RESTART_ENTROPY = 0x6E706D70  # fixed stream so identical calls redraw identical starts

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class SolveResult:
    """Outcome of one trajectory optimization.

    states are re-simulated through systems.step from x0 and the controls;
    cost is recomputed by systems.rollout_cost under the eps used (so an
    infeasible status always carries an infinite cost).
    """

    status: str
    cost: float
    controls: Optional[np.ndarray]
    states: Optional[np.ndarray]
    info: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status in (OPTIMAL, MAX_ITER) and math.isfinite(self.cost)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8  # projected-gradient norm target
    max_iter: int = 10_000  # inner iterations per element (per restart)
    al_rounds: int = 40
    rho0: float = 10.0
    rho_cap: float = 1e12
    restarts: int = 4  # random restarts on the nonlinear path (plus zero start)
    nl_tol: float = 1e-6  # the shooting path uses a looser default
    seed: int = 0


def _power_lmax(matvec, dim: int, iters: int = 80) -> float:
    """Upper estimate of the largest eigenvalue of a PSD operator."""
    v = np.ones(dim) / math.sqrt(dim)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        lam = float(v @ w)
        v = w / nw
    return abs(lam) * 1.02  # small safety factor


def _condensed_maps(sys: System, H: int):
    """G, S with stacked states [x_1 .. x_H] = G x0 + S U."""
    n, m = sys.n, sys.m
    powers = [np.eye(n)]
    for _ in range(H):
        powers.append(sys.A @ powers[-1])
    G = np.vstack([powers[t] for t in range(1, H + 1)])
    S = np.zeros((H * n, H * m))
    for t in range(1, H + 1):
        for k in range(t):
            S[(t - 1) * n : t * n, k * m : (k + 1) * m] = powers[t - 1 - k] @ sys.B
    return G, S


def _terminal_for_horizon(sys: System, H: int):
    """Terminal model for a truncated horizon.

    A hard terminal box is only meaningful at the full horizon; shorter
    lookaheads substitute a stiff quadratic pull toward the box center.
    """
    if H == sys.T or not isinstance(sys.terminal_model, BoxTerminal):
        return sys.terminal_model
    return QuadTerminal(1e3 * np.eye(sys.n))


def _state_boxes(sys: System, eps: float, H: int, terminal,
                 margin: float = KAPPA) -> tuple[np.ndarray, np.ndarray]:
    """Per-time lower/upper bounds for x_1..x_H, tightened by margin."""
    inner = erode(sys.X, eps, sys.norm) if eps > 0 else sys.X
    if inner.is_empty:
        raise ValueError(f"erosion by eps={eps} empties the state box")
    lo = np.empty((H, sys.n))
    hi = np.empty((H, sys.n))
    lo[: H - 1] = inner.lo
    hi[: H - 1] = inner.hi
    if isinstance(terminal, BoxTerminal):
        lo[H - 1] = np.maximum(terminal.box.lo, sys.X.lo)
        hi[H - 1] = np.minimum(terminal.box.hi, sys.X.hi)
    else:
        lo[H - 1] = sys.X.lo
        hi[H - 1] = sys.X.hi
    return (lo + margin).ravel(), (hi - margin).ravel()


def _finish(sys: System, x0, controls, eps: float, status: str, info: dict) -> SolveResult:
    if controls is None:
        return SolveResult(INFEASIBLE, INF, None, None, info)
    controls = np.asarray(controls, dtype=float).reshape(-1, sys.m)
    states = simulate(sys, x0, controls)
    cost = _open_loop_cost(sys, x0, controls, eps)
    if status in (OPTIMAL, MAX_ITER) and math.isinf(cost):
        status = INFEASIBLE  # defensive: never report a feasible status with infinite cost
    return SolveResult(status, cost, controls, states, info)


def _open_loop_cost(sys: System, x0, controls, eps: float) -> float:
    return rollout_cost(sys, x0, controls, eps)


# ---------------------------------------------------------------------------
# condensed LTI path
# ---------------------------------------------------------------------------

def _solve_lti_batch(sys: System, X0, eps, H, terminal, opts: SolverOptions):
    return _solve_lti_batch_impl(sys, X0, eps, H, terminal, opts, None)


def _solve_lti_batch_impl(sys: System, X0, eps, H, terminal, opts: SolverOptions, U0):
    B0 = X0.shape[0]
    n, m = sys.n, sys.m
    G, S = _condensed_maps(sys, H)
    gam = sys.gamma ** np.arange(H + 1)

    # smooth quadratic part
    W = np.zeros((H * n, H * n))
    Rblk = np.zeros((H * m, H * m))
    if isinstance(sys.cost_model, QuadCost):
        for t in range(1, H):
            W[(t - 1) * n : t * n, (t - 1) * n : t * n] = gam[t] * sys.cost_model.Q
        for t in range(H):
            Rblk[t * m : (t + 1) * m, t * m : (t + 1) * m] = gam[t] * sys.cost_model.R
    else:
        raise ValueError("condensed path requires a quadratic cost model")
    if isinstance(terminal, QuadTerminal):
        W[(H - 1) * n :, (H - 1) * n :] += gam[H] * terminal.QF

    Hmat = 2.0 * (S.T @ W @ S + Rblk)
    Gmap = 2.0 * (S.T @ W @ G)  # g = Gmap x0
    lamH = _power_lmax(lambda v: Hmat @ v, H * m)
    lamS = _power_lmax(lambda v: S.T @ (S @ v), H * m)

    lo_vec, hi_vec = _state_boxes(sys, eps, H, terminal)
    u_lo = np.tile(sys.U.lo, H)
    u_hi = np.tile(sys.U.hi, H)

    U = np.zeros((B0, H * m)) if U0 is None else np.array(U0, dtype=float).reshape(B0, H * m)
    U = np.clip(U, u_lo, u_hi)
    g_lin = X0 @ Gmap.T
    mu_hi = np.zeros((B0, H * n))
    mu_lo = np.zeros((B0, H * n))
    rho = np.full(B0, opts.rho0)
    prev_viol = np.full(B0, INF)
    rounds = np.zeros(B0, dtype=int)
    iters = np.zeros(B0, dtype=int)
    status = np.zeros(B0, dtype=int)  # 0 pending, 1 optimal, 2 max_iter, 3 infeasible
    # momentum state (reset per element on restarts and between AL rounds)
    Uprev = U.copy()
    theta = np.ones(B0)

    active = status == 0
    while np.any(active):
        idx = np.flatnonzero(active)
        th_old = theta[idx]
        th_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * th_old**2))
        Y = U[idx] + ((th_old - 1.0) / th_new)[:, None] * (U[idx] - Uprev[idx])
        rho_a = rho[idx, None]
        Xs = X0[idx] @ G.T + Y @ S.T
        a_hi = np.maximum(0.0, Xs - hi_vec + mu_hi[idx] / rho_a)
        a_lo = np.maximum(0.0, lo_vec - Xs + mu_lo[idx] / rho_a)
        grad = Y @ Hmat.T + g_lin[idx] + (rho_a * (a_hi - a_lo)) @ S
        step = 1.0 / (lamH + rho[idx] * lamS + 1e-300)
        V = Y - step[:, None] * grad
        Unew = np.clip(V, u_lo, u_hi)
        pg = np.max(np.abs(Unew - Y), axis=1) / step
        # kill momentum when it points against the latest descent direction
        osc = np.einsum("ij,ij->i", Y - Unew, Unew - U[idx]) > 0.0
        theta[idx] = np.where(osc, 1.0, th_new)
        Uprev[idx] = np.where(osc[:, None], Unew, U[idx])
        U[idx] = Unew
        iters[idx] += 1

        inner_done = pg <= opts.tol
        budget_out = iters[idx] >= opts.max_iter
        for j_local in np.flatnonzero(inner_done | budget_out):
            e = idx[j_local]
            Xe = X0[e] @ G.T + U[e] @ S.T
            viol = max(
                float(np.max(Xe - hi_vec, initial=0.0)),
                float(np.max(lo_vec - Xe, initial=0.0)),
            )
            if viol <= 0.5 * KAPPA and inner_done[j_local]:
                status[e] = 1
            elif budget_out[j_local]:
                status[e] = 2 if viol <= 0.5 * KAPPA else 3
            else:
                # feasibility not yet reached: multiplier update, maybe stiffen
                mu_hi[e] = np.maximum(0.0, mu_hi[e] + rho[e] * (Xe - hi_vec))
                mu_lo[e] = np.maximum(0.0, mu_lo[e] + rho[e] * (lo_vec - Xe))
                if viol > 0.25 * prev_viol[e]:
                    rho[e] = min(rho[e] * 10.0, opts.rho_cap)
                stagnant = rho[e] >= opts.rho_cap and viol > 0.9 * prev_viol[e]
                prev_viol[e] = viol
                rounds[e] += 1
                theta[e] = 1.0
                Uprev[e] = U[e]
                if rounds[e] >= opts.al_rounds or (stagnant and viol > 10 * KAPPA):
                    status[e] = 3
        active = status == 0

    out = []
    names = {1: OPTIMAL, 2: MAX_ITER, 3: INFEASIBLE}
    for e in range(B0):
        info = {"iterations": int(iters[e]), "al_rounds": int(rounds[e]), "path": "lti"}
        ctrl = U[e].reshape(H, m) if status[e] != 3 else None
        out.append(_finish(sys, X0[e], ctrl, eps, names[int(status[e])], info))
    return out


# ---------------------------------------------------------------------------
# nonlinear shooting path
# ---------------------------------------------------------------------------

def _stage_grads(sys: System, xs, us, gam):
    """Gradients of the discounted stage costs along a batched trajectory.

    Quadratic cost models get exact expressions; other stage costs fall back
    to central finite differences coordinate by coordinate.
    """
    E, H, n = xs.shape[0], us.shape[1], sys.n
    m = sys.m
    gx = np.zeros((E, H + 1, n))
    gu = np.zeros((E, H, m))
    if isinstance(sys.cost_model, QuadCost):
        Q, R = sys.cost_model.Q, sys.cost_model.R
        for t in range(1, H):
            gx[:, t] = gam[t] * 2.0 * xs[:, t] @ Q
        for t in range(H):
            gu[:, t] = gam[t] * 2.0 * us[:, t] @ R
    else:
        h = 1e-6
        for t in range(H):
            for k in range(n):
                if t >= 1:
                    xp = xs[:, t].copy()
                    xm = xs[:, t].copy()
                    xp[:, k] += h
                    xm[:, k] -= h
                    gx[:, t, k] = gam[t] * (
                        sys.stage_cost(xp, us[:, t]) - sys.stage_cost(xm, us[:, t])
                    ) / (2 * h)
            for k in range(m):
                up = us[:, t].copy()
                um = us[:, t].copy()
                up[:, k] += h
                um[:, k] -= h
                gu[:, t, k] = gam[t] * (
                    sys.stage_cost(xs[:, t], up) - sys.stage_cost(xs[:, t], um)
                ) / (2 * h)
    return gx, gu


def _smooth_objective(sys, xs, us, gam, terminal, lo, hi, mu_lo, mu_hi, rho):
    """Discounted cost (x0 stage term included) + AL penalty, per element."""
    E, H = us.shape[0], us.shape[1]
    val = np.zeros(E)
    for t in range(H):
        val += gam[t] * np.asarray(sys.stage_cost(xs[:, t], us[:, t]), dtype=float)
    if isinstance(terminal, QuadTerminal):
        val += gam[H] * np.einsum("ei,ij,ej->e", xs[:, H], terminal.QF, xs[:, H])
    flat = xs[:, 1:].reshape(E, -1)
    a_hi = np.maximum(0.0, flat - hi + mu_hi / rho[:, None])
    a_lo = np.maximum(0.0, lo - flat + mu_lo / rho[:, None])
    val += 0.5 * rho * (np.sum(a_hi**2, axis=1) + np.sum(a_lo**2, axis=1))
    val -= (np.sum(mu_hi**2, axis=1) + np.sum(mu_lo**2, axis=1)) / (2.0 * rho)
    return val


def _forward(sys, x0, U):
    E, H = U.shape[0], U.shape[1]
    xs = np.empty((E, H + 1, sys.n))
    xs[:, 0] = x0
    for t in range(H):
        xs[:, t + 1] = sys.dynamics(xs[:, t], U[:, t])
    return xs


def _stage_hessians(sys: System, xs, us, gam, t: int):
    """Stage-cost curvature blocks at step t: (cxx, cuu), each batched.

    Quadratic models are exact; anything else gets a diagonal finite
    difference estimate (cross terms dropped -- the line search absorbs the
    model error).
    """
    E = xs.shape[0]
    n, m = sys.n, sys.m
    if isinstance(sys.cost_model, QuadCost):
        cxx = np.broadcast_to(gam[t] * 2.0 * sys.cost_model.Q, (E, n, n))
        cuu = np.broadcast_to(gam[t] * 2.0 * sys.cost_model.R, (E, m, m))
        return cxx, cuu
    h = 1e-4
    x, u = xs[:, t], us[:, t]
    c0 = np.asarray(sys.stage_cost(x, u), dtype=float)
    cxx = np.zeros((E, n, n))
    cuu = np.zeros((E, m, m))
    for k in range(n):
        xp = x.copy(); xm = x.copy()
        xp[:, k] += h; xm[:, k] -= h
        d2 = (np.asarray(sys.stage_cost(xp, u)) - 2 * c0 + np.asarray(sys.stage_cost(xm, u))) / h**2
        cxx[:, k, k] = gam[t] * d2
    for k in range(m):
        up = u.copy(); um = u.copy()
        up[:, k] += h; um[:, k] -= h
        d2 = (np.asarray(sys.stage_cost(x, up)) - 2 * c0 + np.asarray(sys.stage_cost(x, um))) / h**2
        cuu[:, k, k] = gam[t] * d2
    return cxx, cuu


def _al_gradient(sys, x0e, U, gam, terminal, lo_vec, hi_vec, mu_lo, mu_hi, rho):
    """Reverse-mode gradient of the AL objective w.r.t. the control sequence.

    Kept separate from the sweep below so tests can cross-check it against
    finite differences of _smooth_objective.
    """
    E, H = U.shape[0], U.shape[1]
    n = sys.n
    xs = _forward(sys, x0e, U)
    gx, gu = _stage_grads(sys, xs, U, gam)
    flat = xs[:, 1:].reshape(E, -1)
    rr = rho[:, None]
    al = rr * np.maximum(0.0, flat - hi_vec + mu_hi / rr)
    al -= rr * np.maximum(0.0, lo_vec - flat + mu_lo / rr)
    al = al.reshape(E, H, n)
    if isinstance(terminal, QuadTerminal):
        gx[:, H] = gam[H] * 2.0 * xs[:, H] @ terminal.QF
    p = gx[:, H] + al[:, H - 1]
    grad = np.empty_like(U)
    for t in range(H - 1, -1, -1):
        Jx, Ju = sys.jacobian(xs[:, t], U[:, t])
        grad[:, t] = gu[:, t] + np.einsum("eim,ei->em", Ju, p)
        if t > 0:
            p = gx[:, t] + al[:, t - 1] + np.einsum("eik,ei->ek", Jx, p)
    return grad


_NL_KAPPA = 1e-6  # shooting-path feasibility margin (see module docstring)
_NL_RHO0 = 100.0
_REG_MIN = 1e-9
_REG_MAX = 1e10


def _solve_nonlinear_batch(sys: System, X0, eps, H, terminal, opts: SolverOptions,
                           warm=None):
    """Augmented-Lagrangian shooting with Riccati (Gauss-Newton) sweeps.

    Each inner iteration runs one backward value sweep over the linearized
    dynamics and a feedback forward rollout with per-element line search;
    state-box terms enter the stage cost as smooth AL penalties so the sweep
    stays well conditioned at large rho. With warm=None each initial state
    gets opts.restarts random control sequences plus the zero start; a warm
    batch suppresses restarts (receding-horizon reuse).
    """
    if isinstance(sys.cost_model, ConstPlusL1Cost):
        raise ValueError("L1 control costs are only supported on the LTI path")
    if sys.jacobian is None:
        raise ValueError("the shooting path needs dynamics Jacobians")
    if isinstance(terminal, BoxTerminal):
        raise ValueError("hard terminal boxes are only supported on the LTI path")
    B0 = X0.shape[0]
    n, m = sys.n, sys.m
    gam = sys.gamma ** np.arange(H + 1)
    lo_vec, hi_vec = _state_boxes(sys, eps, H, terminal, margin=_NL_KAPPA)
    lo_t = lo_vec.reshape(H, n)
    hi_t = hi_vec.reshape(H, n)
    u_lo, u_hi = sys.U.lo, sys.U.hi
    QF = terminal.QF if isinstance(terminal, QuadTerminal) else np.zeros((n, n))

    if warm is None:
        R = opts.restarts + 1
        ss = np.random.SeedSequence(entropy=_RESTART_ENTROPY, spawn_key=(opts.seed,))
        rng = np.random.default_rng(ss)
        starts = np.zeros((R, H, m))
        if R > 1:
            starts[1:] = rng.uniform(u_lo, u_hi, size=(R - 1, H, m))
        U = np.tile(starts, (B0, 1, 1))
        x0e = np.repeat(X0, R, axis=0)
    else:
        R = 1
        U = np.clip(np.asarray(warm, dtype=float).reshape(B0, H, m), u_lo, u_hi)
        x0e = X0.copy()
    E = B0 * R

    mu_hi = np.zeros((E, H * n))
    mu_lo = np.zeros((E, H * n))
    rho = np.full(E, _NL_RHO0)
    reg = np.full(E, _REG_MIN)
    prev_viol = np.full(E, INF)
    rounds = np.zeros(E, dtype=int)
    iters = np.zeros(E, dtype=int)
    status = np.zeros(E, dtype=int)  # 0 pending, 1 optimal, 2 max_iter, 3 infeasible
    tol = opts.nl_tol

    def objective(sel, xs, Ucand):
        return _smooth_objective(
            sys, xs, Ucand, gam, terminal, lo_vec, hi_vec,
            mu_lo[sel], mu_hi[sel], rho[sel],
        )

    def penalty_terms(sel, x, trow):
        # gradient and curvature diagonal of the AL penalty at state index trow+1
        rr = rho[sel][:, None]
        a_hi = np.maximum(0.0, x - hi_t[trow] + mu_hi[sel].reshape(-1, H, n)[:, trow] / rr)
        a_lo = np.maximum(0.0, lo_t[trow] - x + mu_lo[sel].reshape(-1, H, n)[:, trow] / rr)
        g = rr * (a_hi - a_lo)
        hdiag = rho[sel][:, None] * ((a_hi > 0) | (a_lo > 0))
        return g, hdiag

    active = status == 0
    while np.any(active):
        idx = np.flatnonzero(active)
        B = len(idx)
        xs = _forward(sys, x0e[idx], U[idx])
        f0 = objective(idx, xs, U[idx])

        # backward sweep
        pen_g, pen_h = penalty_terms(idx, xs[:, H], H - 1)
        Vx = gam[H] * 2.0 * xs[:, H] @ QF + pen_g
        Vxx = np.broadcast_to(gam[H] * 2.0 * QF, (B, n, n)).copy()
        Vxx[:, np.arange(n), np.arange(n)] += pen_h
        gx, gu = _stage_grads(sys, xs, U[idx], gam)
        ks = np.empty((B, H, m))
        Ks = np.empty((B, H, m, n))
        dv1 = np.zeros(B)
        dv2 = np.zeros(B)
        pg = np.zeros(B)
        bad_curv = np.zeros(B, dtype=bool)
        eye_m = np.eye(m)
        for t in range(H - 1, -1, -1):
            Jx, Ju = sys.jacobian(xs[:, t], U[idx][:, t])
            cxx, cuu = _stage_hessians(sys, xs, U[idx], gam, t)
            Qu = gu[:, t] + np.einsum("eim,ei->em", Ju, Vx)
            JuT_Vxx = np.einsum("eim,eij->emj", Ju, Vxx)
            Quu = cuu + np.einsum("emj,ejl->eml", JuT_Vxx, Ju)
            Quu = Quu + reg[idx][:, None, None] * eye_m
            Qux = np.einsum("emj,ejl->eml", JuT_Vxx, Jx)
            lo_du = u_lo - U[idx][:, t]
            hi_du = u_hi - U[idx][:, t]
            if m == 1:
                quu = Quu[:, 0, 0]
                bad_curv |= quu <= 0.0
                q_safe = np.where(quu > 0.0, quu, 1.0)
                kfree = -Qu[:, 0] / q_safe
                k = np.clip(kfree, lo_du[:, 0], hi_du[:, 0])[:, None]
                clamped = ((kfree < lo_du[:, 0]) | (kfree > hi_du[:, 0]))[:, None]
                K = -Qux[:, 0, :] / q_safe[:, None]
                K = np.where(clamped, 0.0, K)[:, None, :]
            else:
                evals = np.linalg.eigvalsh(Quu)
                bad_curv |= evals[:, 0] <= 0.0
                safe = Quu + np.where(evals[:, 0] <= 0.0, 1.0, 0.0)[:, None, None] * eye_m
                k = -np.linalg.solve(safe, Qu[:, :, None])[:, :, 0]
                k = np.clip(k, lo_du, hi_du)
                clamped = (k <= lo_du + 1e-15) | (k >= hi_du - 1e-15)
                K = -np.linalg.solve(safe, Qux)
                K = np.where(clamped[:, :, None], 0.0, K)
            ks[:, t] = k
            Ks[:, t] = K
            dv1 += np.einsum("em,em->e", k, Qu)
            dv2 += 0.5 * np.einsum("em,eml,el->e", k, Quu, k)
            pg_t = np.max(np.abs(U[idx][:, t] - np.clip(U[idx][:, t] - Qu, u_lo, u_hi)), axis=1)
            pg = np.maximum(pg, pg_t)
            if t > 0:
                pg_state, pen_hd = penalty_terms(idx, xs[:, t], t - 1)
                Qx = gx[:, t] + pg_state + np.einsum("eik,ei->ek", Jx, Vx)
                JxT_Vxx = np.einsum("eik,eij->ekj", Jx, Vxx)
                Qxx = cxx + np.einsum("ekj,ejl->ekl", JxT_Vxx, Jx)
                Qxx = Qxx.copy()
                Qxx[:, np.arange(n), np.arange(n)] += pen_hd
                KT_Quu = np.einsum("emn,emk->enk", K, Quu)
                Vx = (
                    Qx
                    + np.einsum("enk,ek->en", KT_Quu, k)
                    + np.einsum("emn,em->en", K, Qu)
                    + np.einsum("emn,em->en", Qux, k)
                )
                Vxx = (
                    Qxx
                    + np.einsum("enk,ekl->enl", KT_Quu, K)
                    + np.einsum("emn,eml->enl", K, Qux)
                    + np.einsum("emn,eml->eln", Qux, K)
                )
                Vxx = 0.5 * (Vxx + np.swapaxes(Vxx, 1, 2))

        # forward pass with feedback and per-element step length
        alpha = np.ones(B)
        accepted = np.zeros(B, dtype=bool)
        no_dir = (dv1 + dv2 >= -1e-14 * (1.0 + np.abs(f0))) | bad_curv
        Unew = U[idx].copy()
        fnew = f0.copy()
        for _ in range(14):
            todo = np.flatnonzero(~accepted & ~no_dir)
            if todo.size == 0:
                break
            x = x0e[idx[todo]]
            Uc = np.empty((todo.size, H, m))
            xs_c = np.empty((todo.size, H + 1, n))
            xs_c[:, 0] = x
            for t in range(H):
                du = alpha[todo, None] * ks[todo, t]
                du = du + np.einsum("emn,en->em", Ks[todo, t], x - xs[todo, t])
                u = np.clip(U[idx[todo]][:, t] + du, u_lo, u_hi)
                Uc[:, t] = u
                x = sys.dynamics(x, u)
                xs_c[:, t + 1] = x
            fc = objective(idx[todo], xs_c, Uc)
            expect = alpha[todo] * dv1[todo] + alpha[todo] ** 2 * dv2[todo]
            ok = fc <= f0[todo] + 1e-4 * expect + 1e-12 * np.abs(f0[todo])
            sel = todo[ok]
            Unew[sel] = Uc[ok]
            fnew[sel] = fc[ok]
            accepted[sel] = True
            alpha[todo[~ok]] *= 0.5
        U[idx] = Unew
        reg[idx] = np.where(
            accepted, np.maximum(reg[idx] * 0.5, _REG_MIN),
            np.where(no_dir, reg[idx], np.minimum(reg[idx] * 10.0, _REG_MAX)),
        )
        reg[idx] = np.where(bad_curv, np.minimum(reg[idx] * 10.0, _REG_MAX), reg[idx])
        iters[idx] += 1

        stalled = ~accepted & ~bad_curv & (
            no_dir | ((alpha <= 2.0 ** -13) & (reg[idx] >= 0.1 * _REG_MAX))
        )
        inner_done = (pg <= tol) | stalled
        budget_out = iters[idx] >= opts.max_iter
        for j_local in np.flatnonzero(inner_done | budget_out):
            e = idx[j_local]
            xe = _forward(sys, x0e[e : e + 1], U[e : e + 1])[0]
            flat_e = xe[1:].ravel()
            viol = max(
                float(np.max(flat_e - hi_vec, initial=0.0)),
                float(np.max(lo_vec - flat_e, initial=0.0)),
            )
            if viol <= 0.5 * _NL_KAPPA and inner_done[j_local] and pg[j_local] <= tol:
                status[e] = 1
            elif budget_out[j_local]:
                status[e] = 2 if viol <= 0.5 * _NL_KAPPA else 3
            elif viol <= 0.5 * _NL_KAPPA and stalled[j_local]:
                status[e] = 2  # feasible incumbent, direction exhausted
            else:
                mu_hi[e] = np.maximum(0.0, mu_hi[e] + rho[e] * (flat_e - hi_vec))
                mu_lo[e] = np.maximum(0.0, mu_lo[e] + rho[e] * (lo_vec - flat_e))
                if viol > 0.25 * prev_viol[e]:
                    rho[e] = min(rho[e] * 10.0, opts.rho_cap)
                stagnant = rho[e] >= opts.rho_cap and viol > 0.9 * prev_viol[e]
                prev_viol[e] = viol
                rounds[e] += 1
                reg[e] = _REG_MIN
                if rounds[e] >= opts.al_rounds or (stagnant and viol > 10 * _NL_KAPPA):
                    status[e] = 3
        active = status == 0

    # pick the best restart per original element
    out = []
    names = {1: OPTIMAL, 2: MAX_ITER, 3: INFEASIBLE}
    for b in range(B0):
        cands = []
        for r in range(R):
            e = b * R + r
            st = names[int(status[e])]
            cost = INF if st == INFEASIBLE else _open_loop_cost(sys, X0[b], U[e], eps)
            rank = {OPTIMAL: 0, MAX_ITER: 1, INFEASIBLE: 2}[st]
            cands.append((rank, cost, r, st, e))
        rank, cost, r, st, e = min(cands, key=lambda c: (c[0], c[1], c[2]))
        info = {
            "iterations": int(iters[e]),
            "al_rounds": int(rounds[e]),
            "restart": r,
            "path": "shooting",
        }
        ctrl = U[e] if st != INFEASIBLE else None
        out.append(_finish(sys, X0[b], ctrl, eps, st, info))
    return out




# ---------------------------------------------------------------------------
# linear-program path (LTI plants with constant-plus-L1 costs)
# ---------------------------------------------------------------------------

_L1_TERMINAL_PENALTY = 1e4  # exact-penalty weight when the hard terminal box is
                            # dropped at short lookaheads; far above any dual scale


def _l1_penalty_cost(sys: System, x0, controls, eps: float, box, weight: float) -> float:
    """Open-loop cost with the hard terminal box replaced by a distance penalty.

    Mirrors systems.rollout_cost exactly except at the terminal state, where
    the indicator is swapped for weight * (L1 distance past the box). Used only
    for short-lookahead solves whose hard terminal is unreachable.
    """
    states = simulate(sys, x0, controls)
    H = controls.shape[0]
    if not np.all(sys.X.contains(states)):
        return INF
    if eps > 0 and H >= 2:
        inner = erode(sys.X, eps, sys.norm)
        if inner.is_empty or not np.all(inner.contains(states[1:H])):
            return INF
    if not np.all(sys.U.contains(controls)):
        return INF
    overshoot = np.maximum(0.0, np.maximum(box.lo - states[H], states[H] - box.hi))
    stage = np.array([float(sys.stage_cost(states[t], controls[t])) for t in range(H)])
    disc = sys.gamma ** np.arange(H)
    return float(stage @ disc + sys.gamma**H * weight * float(overshoot.sum()))


def _solve_l1_lp_batch(sys: System, X0, eps, H, terminal, opts: SolverOptions):
    """Exact solve of constant-plus-L1 LTI problems as linear programs.

    With linear dynamics, box constraints, and a stage cost affine in |u| the
    problem is an LP in the split u = p - q (p, q >= 0). A hard terminal box is
    kept as rows of the state polytope when the lookahead spans the full
    horizon; at shorter lookaheads it is replaced by an exact L1 penalty that
    pulls x_H toward the box (the hard version is typically unreachable, and a
    large-enough linear penalty reproduces the constrained solution whenever
    one exists). HiGHS solves each element; results are re-simulated as usual.
    """
    B0 = X0.shape[0]
    n, m = sys.n, sys.m
    G, S = _condensed_maps(sys, H)
    gam = sys.gamma ** np.arange(H + 1)
    weight = sys.cost_model.weight
    lo_vec, hi_vec = _state_boxes(sys, eps, H, terminal)
    u_lo = np.tile(sys.U.lo, H)
    u_hi = np.tile(sys.U.hi, H)
    penalty_mode = isinstance(sys.terminal_model, BoxTerminal) and not isinstance(
        terminal, BoxTerminal
    )

    nu = H * m
    c_half = np.repeat(gam[:H] * weight, m)
    eye = np.eye(nu)
    # rows: control box (2 nu), state boxes (2 H n), then terminal hinges
    A_rows = [
        np.hstack([eye, -eye]),
        np.hstack([-eye, eye]),
        np.hstack([S, -S]),
        np.hstack([-S, S]),
    ]
    c = np.concatenate([c_half, c_half])
    n_slack = 0
    if penalty_mode:
        n_slack = n
        S_H = S[(H - 1) * n :, :]
        A_rows = [np.hstack([blk, np.zeros((blk.shape[0], n_slack))]) for blk in A_rows]
        A_rows.append(np.hstack([S_H, -S_H, -np.eye(n)]))
        A_rows.append(np.hstack([-S_H, S_H, -np.eye(n)]))
        c = np.concatenate([c, np.full(n, gam[H] * _L1_TERMINAL_PENALTY)])
    A_ub = np.vstack(A_rows)
    bounds = [(0.0, None)] * (2 * nu + n_slack)

    out: list[SolveResult] = []
    for b in range(B0):
        g0 = G @ X0[b]
        b_parts = [u_hi, -u_lo, hi_vec - g0, g0 - lo_vec]
        if penalty_mode:
            tb = sys.terminal_model.box
            g0_H = g0[(H - 1) * n :]
            b_parts.append(tb.hi - g0_H)
            b_parts.append(g0_H - tb.lo)
        res = linprog(c, A_ub=A_ub, b_ub=np.concatenate(b_parts), bounds=bounds,
                      method="highs")
        info = {"path": "lti_l1_lp", "lp_status": int(res.status),
                "iterations": int(getattr(res, "nit", 0) or 0),
                "terminal": "l1_penalty" if penalty_mode else "hard"}
        if res.status == 2:
            out.append(SolveResult(INFEASIBLE, INF, None, None, info))
            continue
        if res.status != 0 or res.x is None:
            out.append(SolveResult(MAX_ITER, INF, None, None, info))
            continue
        U = np.clip(res.x[:nu] - res.x[nu : 2 * nu], u_lo, u_hi).reshape(H, m)
        if penalty_mode:
            cost = _l1_penalty_cost(sys, X0[b], U, eps, sys.terminal_model.box,
                                    _L1_TERMINAL_PENALTY)
            status = OPTIMAL if math.isfinite(cost) else INFEASIBLE
            states = simulate(sys, X0[b], U)
            out.append(SolveResult(status, cost, U if status == OPTIMAL else None,
                                   states if status == OPTIMAL else None, info))
        else:
            out.append(_finish(sys, X0[b], U, eps, OPTIMAL, info))
    return out


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def _dispatch_batch(sys: System, X0, eps: float, H: int, terminal,
                    opts: SolverOptions) -> list[SolveResult]:
    if sys.is_lti and isinstance(sys.cost_model, ConstPlusL1Cost):
        return _solve_l1_lp_batch(sys, X0, eps, H, terminal, opts)
    if sys.is_lti and isinstance(sys.cost_model, QuadCost):
        return _solve_lti_batch(sys, X0, eps, H, terminal, opts)
    return _solve_nonlinear_batch(sys, X0, eps, H, terminal, opts)


def solve_conservative_batch(sys: System, X0, eps: float, H: Optional[int] = None,
                             opts: Optional[SolverOptions] = None,
                             jobs: int = 1) -> list[SolveResult]:
    """Solve the eroded-constraint problem from each row of X0.

    jobs > 1 splits the batch across worker threads. Restart control
    sequences are a function of the options alone, not of batch position,
    so the results are bit-identical for every jobs value.
    """
    opts = opts or SolverOptions()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if X0.shape[1] != sys.n:
        raise ValueError("x0 dimension mismatch")
    if np.isnan(X0).any():
        raise ValueError("x0 contains NaN")
    H = sys.T if H is None else int(H)
    if not (1 <= H <= sys.T):
        raise ValueError(f"horizon must be in [1, T={sys.T}]")
    terminal = _terminal_for_horizon(sys, H)
    jobs = max(1, int(jobs))
    if jobs > 1 and X0.shape[0] > 1:
        from concurrent.futures import ThreadPoolExecutor
        parts = np.array_split(np.arange(X0.shape[0]), min(jobs, X0.shape[0]))
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_dispatch_batch, sys, X0[ix], eps, H,
                                   terminal, opts)
                       for ix in parts if len(ix)]
            out: list[SolveResult] = []
            for fut in futures:
                out.extend(fut.result())
        return out
    return _dispatch_batch(sys, X0, eps, H, terminal, opts)


def solve_conservative(sys: System, x0, eps: float,
                       opts: Optional[SolverOptions] = None) -> SolveResult:
    """Solve the eroded-constraint problem over the system's full horizon."""
    return solve_conservative_batch(sys, np.atleast_2d(x0), eps, None, opts)[0]


def mpc_solve(sys: System, x0, eps: float, H: int,
              opts: Optional[SolverOptions] = None,
              warm=None) -> SolveResult:
    """Receding-horizon solve over H steps (H = T reproduces solve_conservative).

    Hard terminal boxes are softened when H < T (a hard terminal equality is
    infeasible at short lookaheads): quadratic plants get a stiff quadratic
    surrogate, L1 plants an exact linear penalty. warm, when given, seeds the
    LTI path with a previous control sequence.
    """
    opts = opts or SolverOptions()
    X0 = np.atleast_2d(np.asarray(x0, dtype=float))
    H = int(H)
    if not (1 <= H <= sys.T):
        raise ValueError(f"horizon must be in [1, T={sys.T}]")
    terminal = _terminal_for_horizon(sys, H)
    if sys.is_lti and isinstance(sys.cost_model, ConstPlusL1Cost):
        return _solve_l1_lp_batch(sys, X0, eps, H, terminal, opts)[0]
    if sys.is_lti and isinstance(sys.cost_model, QuadCost):
        if warm is not None:
            return _solve_lti_batch_impl(
                sys, X0, eps, H, terminal, opts,
                np.atleast_2d(np.asarray(warm, dtype=float).ravel()),
            )[0]
        return _solve_lti_batch(sys, X0, eps, H, terminal, opts)[0]
    return _solve_nonlinear_batch(sys, X0, eps, H, terminal, opts, warm=warm)[0]


def solve_conservative_mpc(sys: System, x0, eps: float, H: int,
                           opts: Optional[SolverOptions] = None) -> Optional[np.ndarray]:
    """First control of the H-horizon solve, or None when infeasible."""
    res = mpc_solve(sys, x0, eps, H, opts)
    if res.controls is None:
        return None
    return res.controls[0].copy()


def mpc_solve_batch(sys: System, X0, eps: float, H: int,
                    opts: Optional[SolverOptions] = None,
                    warm=None) -> list[SolveResult]:
    """Batched receding-horizon solves (one per row of X0).

    warm, when given, is a (batch, H, m) stack of previous control sequences;
    it suppresses random restarts on the shooting path.
    """
    opts = opts or SolverOptions()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    H = int(H)
    if not (1 <= H <= sys.T):
        raise ValueError(f"horizon must be in [1, T={sys.T}]")
    terminal = _terminal_for_horizon(sys, H)
    if sys.is_lti and isinstance(sys.cost_model, ConstPlusL1Cost):
        return _solve_l1_lp_batch(sys, X0, eps, H, terminal, opts)
    if sys.is_lti and isinstance(sys.cost_model, QuadCost):
        if warm is not None:
            return _solve_lti_batch_impl(
                sys, X0, eps, H, terminal, opts,
                np.asarray(warm, dtype=float).reshape(X0.shape[0], -1),
            )
        return _solve_lti_batch(sys, X0, eps, H, terminal, opts)
    return _solve_nonlinear_batch(sys, X0, eps, H, terminal, opts, warm=warm)


def audit_assumption3(sys: System, eps: float, samples: int = 1000, seed: int = 0,
                      opts: Optional[SolverOptions] = None) -> dict:
    """Sampled check that the eroded-constraint problem is solvable from all
    of X: uniform draws, full-horizon solves, violations listed.

    Returns a report dict; callers that require solvability everywhere raise
    on report["ok"] being False rather than this function deciding for them.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    X0 = rng.uniform(sys.X.lo, sys.X.hi, size=(samples, sys.n))
    results = solve_conservative_batch(sys, X0, eps, None, opts)
    bad = [i for i, r in enumerate(results) if r.status == INFEASIBLE]
    return {
        "ok": not bad,
        "checked": samples,
        "violations": len(bad),
        "violation_points": [X0[i].tolist() for i in bad[:50]],
        "eps": float(eps),
        "seed": int(seed),
    }
