"""Feasibility and suboptimality certificates.

Covers the one-step feasibility radius and its closed-form variants, the
recursive-feasibility cover check, the dataset coverage condition behind the
relative-gap guarantee, the conservative-to-original gap translation, the
relative-error bound used to rank verifier splits, sample-complexity numbers
for uniform collection, and empirical estimators for the declared Lipschitz
constants.

Certificates are plain dicts shaped {kind, holds, witness?, params, exact}
so they serialize directly; `as_json` renders them. `exact` is True only
when every quantity in the decision was computed without rounding: cover
decisions for the sup norm are exact over their float inputs, and for LTI
systems the per-point feasibility radii are evaluated in rational arithmetic
(boundary-critical datasets are certified by exact equality, which plain
float evaluation misses by an ulp).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from . import _jsonutil
from .dataset import Dataset
from .errors import (
    BetaEtaEpsIncompatible,
    EtaTooSmall,
    GammaLfConditionFailed,
    NotOneStepFeasible,
)
from .geometry import (
    Box,
    covering_number_box,
    dist_to_boundary,
    erode,
    inscribed_radius,
    is_cover,
    vec_norm,
)
from .policy import lambda_min
from .systems import System, exact_step, simulate, step


# ---------------------------------------------------------------------------
# certificate records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeasCert:
    """A ball around `center` whose points are all one-step feasible.

    kind identifies the radius formula: "eq6" (distance of the successor to
    the state-constraint boundary over L_f) or one of the closed-form
    "appendixA_r_xu" / "appendixA_r_xprime" variants. one_step_pair is the
    (x, u) pair the radius was derived from.
    """

    center: np.ndarray
    radius: float
    kind: str
    one_step_pair: tuple

    def __post_init__(self):
        if self.kind not in ("eq6", "appendixA_r_xu", "appendixA_r_xprime"):
            raise ValueError(f"unknown feasibility-radius kind {self.kind!r}")
        if not self.radius >= 0:
            raise ValueError("radius must be nonnegative")


@dataclass(frozen=True)
class PerfCert:
    """A ball around a dataset point inside which the relative gap is <= beta.

    Valid whenever radius <= beta * (j_center + eta) / ((2 + beta) * lam);
    the constructor enforces that inequality.
    """

    center: np.ndarray
    radius: float
    beta: float
    eta: float
    j_center: float
    lam: float

    def __post_init__(self):
        if not (self.beta > 0 and self.eta > 0 and self.lam > 0):
            raise ValueError("beta, eta and lam must be positive")
        limit = perf_radius(self.j_center, self.beta, self.eta, self.lam)
        if self.radius > limit:
            raise ValueError(
                f"radius {self.radius} exceeds the certified limit {limit}"
            )


def perf_radius(j_center: float, beta: float, eta: float, lam: float) -> float:
    """Largest ball radius certifiable around a point of cost j_center."""
    return beta * (j_center + eta) / ((2.0 + beta) * lam)


# ---------------------------------------------------------------------------
# one-step feasibility radii
# ---------------------------------------------------------------------------

def _one_step_violation(sys: System, x, u, eps: float):
    """None when (x, u) is one-step feasible at erosion eps, else a reason."""
    if not sys.X.contains(x):
        return "x outside X"
    if not sys.U.contains(u):
        return "u outside U"
    inner = erode(sys.X, eps, sys.norm)
    if inner.is_empty:
        return "eroded constraint set is empty"
    if not inner.contains(step(sys, x, u)):
        return f"f(x,u) outside the {eps}-eroded state box"
    return None


def feas_radius_eq6(sys: System, x, u, eps: float = 0.0) -> float:
    """Feasibility radius dist(f(x,u), boundary of X) / L_f.

    Every x0 inside this ball (intersected with X) satisfies f(x0, u) in X.
    Requires (x, u) one-step feasible at erosion eps, which guarantees the
    radius is at least eps / L_f.
    """
    x = np.asarray(x, dtype=float).reshape(sys.n)
    u = np.asarray(u, dtype=float).reshape(sys.m)
    reason = _one_step_violation(sys, x, u, eps)
    if reason is not None:
        raise NotOneStepFeasible(f"not_one_step_feasible: {reason}")
    return dist_to_boundary(step(sys, x, u), sys.X, sys.norm) / sys.lipschitz.L_f


def _decimal_fraction(v: float) -> Fraction:
    # shortest round-tripping decimal of the float; recovers intended
    # constants like 1.1 as 11/10 instead of their binary approximations
    return Fraction(repr(float(v)))


def feas_radius_eq6_exact(sys: System, x, u) -> Fraction:
    """Rational-arithmetic feasibility radius for LTI systems.

    Uses the system's exact dynamics matrices and the decimal reading of
    L_f. Boundary-critical datasets (successor exactly on the eroded
    boundary, ball exactly reaching a corner of X) certify only under this
    evaluation; floats land an ulp short.
    """
    xp = exact_step(sys, x, u)
    lo = [Fraction(float(v)) for v in sys.X.lo]
    hi = [Fraction(float(v)) for v in sys.X.hi]
    margin = min(min(xp[i] - lo[i], hi[i] - xp[i]) for i in range(sys.n))
    if margin < 0:
        margin = Fraction(0)
    return margin / _decimal_fraction(sys.lipschitz.L_f)


def _float_down(fr: Fraction) -> float:
    """Largest float <= fr (nonnegative inputs)."""
    f = float(fr)
    if Fraction(f) > fr:
        f = math.nextafter(f, -math.inf)
    return max(f, 0.0)


def _box_radius(box: Box) -> float:
    """R = min_i min(|lo_i|, |hi_i|); the inscribed radius about the origin."""
    return inscribed_radius(box)


def feas_radius_xu(sys: System, x, u) -> float:
    """Closed-form radius max{0, (R - L_u ||u||) / L_f - ||x||}."""
    R = _box_radius(sys.X)
    nu = float(vec_norm(np.asarray(u, dtype=float).reshape(sys.m), sys.norm))
    nx = float(vec_norm(np.asarray(x, dtype=float).reshape(sys.n), sys.norm))
    return max(0.0, (R - sys.lipschitz.L_u * nu) / sys.lipschitz.L_f - nx)


def feas_radius_xprime(sys: System, xprime) -> float:
    """Closed-form radius (R - ||x'||) / L_f for a known successor x'."""
    R = _box_radius(sys.X)
    nxp = float(vec_norm(np.asarray(xprime, dtype=float).reshape(sys.n), sys.norm))
    return (R - nxp) / sys.lipschitz.L_f


def feas_cert(sys: System, x, u, eps: float = 0.0, kind: str = "eq6") -> FeasCert:
    """Build a feasibility certificate ball around x using the chosen radius."""
    x = np.asarray(x, dtype=float).reshape(sys.n)
    u = np.asarray(u, dtype=float).reshape(sys.m)
    if kind == "eq6":
        r = feas_radius_eq6(sys, x, u, eps)
    elif kind == "appendixA_r_xu":
        r = feas_radius_xu(sys, x, u)
    elif kind == "appendixA_r_xprime":
        r = feas_radius_xprime(sys, step(sys, x, u))
    else:
        raise ValueError(f"unknown feasibility-radius kind {kind!r}")
    return FeasCert(center=x, radius=float(r), kind=kind, one_step_pair=(x, u))


# ---------------------------------------------------------------------------
# dataset-level cover certificates
# ---------------------------------------------------------------------------

def _cover_section(result) -> dict:
    return {
        "holds": bool(result.holds),
        "witness": None if result.witness is None else [float(v) for v in result.witness],
        "exact": bool(result.exact),
    }


def check_recursive_feasibility(ds: Dataset, sys: System) -> dict:
    """Certificate that the lookup policy never leaves X from any start in X.

    Two sufficient conditions, either one suffices:
      1. the dataset states form a uniform eps/L_f cover of X;
      2. the per-point feasibility balls B(x_i, dist(f(x_i,u_i), dX)/L_f)
         cover X.
    Pairs failing the one-step recheck f(x_i, u_i) in the eroded box are
    excluded from both covers and counted in the report. For LTI systems the
    per-point radii are evaluated rationally and rounded toward zero, so
    boundary-critical covers that hold with exact equality still certify.
    """
    X = sys.X
    eps = float(ds.eps)
    L_f = sys.lipschitz.L_f
    states = ds.states()
    controls = ds.controls()
    n_total = states.shape[0]

    if n_total:
        inner = erode(X, eps, sys.norm)
        succ = step(sys, states, controls)
        ok = (
            X.contains(states)
            & sys.U.contains(controls)
            & (np.zeros(n_total, dtype=bool) if inner.is_empty else inner.contains(succ))
        )
        pts = states[ok]
        ctr = controls[ok]
    else:
        ok = np.zeros(0, dtype=bool)
        pts = states
        ctr = controls

    cond1 = is_cover(pts, eps / L_f, X, sys.norm) if pts.size else is_cover(
        np.zeros((0, sys.n)), [], X, sys.norm
    )

    radii_exact = sys.is_lti and sys.A_exact is not None
    if pts.size:
        if radii_exact:
            radii = np.array(
                [_float_down(feas_radius_eq6_exact(sys, p, c)) for p, c in zip(pts, ctr)]
            )
        else:
            radii = dist_to_boundary(step(sys, pts, ctr), X, sys.norm) / L_f
            radii = np.atleast_1d(radii)
        cond2 = is_cover(pts, radii, X, sys.norm)
    else:
        cond2 = cond1

    holds = bool(cond1.holds or cond2.holds)
    witness = None
    if not holds:
        w = cond2.witness if cond2.witness is not None else cond1.witness
        witness = None if w is None else [float(v) for v in w]
    return {
        "kind": "recursive_feasibility",
        "holds": holds,
        "witness": witness,
        "condition1": _cover_section(cond1),
        "condition2": dict(_cover_section(cond2), radii_exact=bool(radii_exact)),
        "params": {
            "eps": eps,
            "L_f": L_f,
            "uniform_radius": eps / L_f,
            "points": int(pts.shape[0]),
            "excluded_not_one_step_feasible": int(n_total - pts.shape[0]),
            "closed": bool(ds.closed),
            "terminal_succ_exemption": True,
        },
        "exact": bool(
            (cond1.holds and cond1.exact)
            or (cond2.holds and cond2.exact and radii_exact)
            or (not holds and cond1.exact and cond2.exact)
        ),
    }


def check_theorem2_coverage(ds: Dataset, lam: float, beta: float, eta: float,
                            X: Box) -> dict:
    """Coverage condition for the relative-gap guarantee.

    Holds iff every x in X has a dataset point with
    ||x - x_i|| <= beta * (j_i + eta) / ((2 + beta) * lam).
    """
    if not (beta > 0 and eta > 0 and lam > 0):
        raise ValueError("beta, eta and lam must be positive")
    states = ds.states()
    radii = perf_radius(ds.costs(), beta, eta, lam) if states.size else []
    result = is_cover(states, radii, X, ds.norm)
    return {
        "kind": "theorem2_coverage",
        "holds": bool(result.holds),
        "witness": None if result.witness is None
        else [float(v) for v in result.witness],
        "params": {"lambda": lam, "beta": beta, "eta": eta,
                   "points": int(states.shape[0])},
        "exact": bool(result.exact),
    }


# ---------------------------------------------------------------------------
# gap translation and error bounds
# ---------------------------------------------------------------------------

def translate_gap(beta_prime: float, eta: float, L: float, eps: float) -> float:
    """Original-problem relative gap implied by a conservative-problem gap.

    beta_prime bounds (J_pi - J(., eps)) / (J(., eps) + eta); the return
    value bounds (J_pi - J) / (J + eta). Requires eta > L * eps.
    """
    if not eta > L * eps:
        raise EtaTooSmall(f"eta_too_small: need eta > L*eps, got {eta} <= {L * eps}")
    return (beta_prime * eta + L * eps) / (eta - L * eps)


def translate_gap_inverse(beta: float, eta: float, L: float, eps: float) -> float:
    """Conservative-problem gap needed to certify an original-problem gap beta."""
    if not eta > L * eps:
        raise EtaTooSmall(f"eta_too_small: need eta > L*eps, got {eta} <= {L * eps}")
    return (beta * (eta - L * eps) - L * eps) / eta


def rel_err_bound(lam: float, dist: float, j_i: float, eta: float) -> float:
    """Upper bound 2*lam*d / (j_i + eta - lam*d) on the relative error at
    distance d from a dataset point; +inf when the denominator is not
    positive (the certificate cannot hold at this distance)."""
    if dist < 0:
        raise ValueError("dist must be nonnegative")
    den = j_i + eta - lam * dist
    if den <= 0:
        return math.inf
    return 2.0 * lam * dist / den


def sample_complexity(sys: System, beta: float, eta: float, delta: float,
                      eps: float, lam: Optional[float] = None,
                      L: Optional[float] = None) -> tuple[float, int]:
    """Uniform-collection radius r and iteration bound for PAC coverage.

    r = min{ (beta*(eta - L*eps) - L*eps) * eta /
             (2*lam*(2*eta + beta*(eta - L*eps) - L*eps)),  eps / (2*L_f) }
    with the second branch dropped at eps = 0. The iteration bound is
    N_cover * ln(N_cover) * ln(1/delta) rounded up with the unstated
    asymptotic constant fixed to 1, floored at one draw. lam defaults to the
    certified regularizer for the system's discount; L defaults to the
    system's declared erosion sensitivity but may be overridden (declared
    values round measured slopes up, which can be too coarse here).
    """
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must be in (0, 1)")
    if L is None:
        L = sys.lipschitz.L
    if L < 0:
        raise ValueError("L must be nonnegative")
    if lam is None:
        lam = lambda_min(sys.gamma, sys.lipschitz.L_f, sys.lipschitz.L_J)
    if not eta > L * eps:
        raise BetaEtaEpsIncompatible(
            f"beta_eta_eps_incompatible: need eta > L*eps, got {eta} <= {L * eps}"
        )
    a = beta * (eta - L * eps) - L * eps
    if a <= 0:
        raise BetaEtaEpsIncompatible(
            "beta_eta_eps_incompatible: need beta*(eta - L*eps) > L*eps"
        )
    r = a * eta / (2.0 * lam * (2.0 * eta + a))
    if eps > 0:
        r = min(r, eps / (2.0 * sys.lipschitz.L_f))
    n_cover = covering_number_box(sys.X, r, sys.norm)
    if n_cover <= 1:
        return r, 1
    bound = math.ceil(n_cover * math.log(n_cover) * math.log(1.0 / delta))
    return r, max(1, bound)


def lipschitz_LJ_bound(L_c: float, gamma: float, L_f: float, L_u: float) -> float:
    """Closed-form value-function Lipschitz bound L_c / (1 - gamma*max(L_f, L_u))."""
    g = gamma * max(L_f, L_u)
    if not g < 1.0:
        raise GammaLfConditionFailed(
            f"gamma_Lf_condition_failed: need gamma*max(L_f, L_u) < 1, got {g}"
        )
    return L_c / (1.0 - g)


# ---------------------------------------------------------------------------
# trajectory propagation property
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PropagationCheck:
    """Outcome of the trajectory-deviation bound check.

    ok is True when every step satisfied the bound; otherwise violating_t
    names the first step where the measured deviation exceeded it.
    """

    ok: bool
    violating_t: Optional[int]
    max_ratio: float

    def __bool__(self) -> bool:
        return self.ok


def propagation_bound_check(sys: System, x0, x0p, controls, controls_p,
                            rel_tol: float = 1e-9) -> PropagationCheck:
    """Check ||x_t - x_t'|| <= L_f^t ||x0 - x0'|| + L_u * sum L_f^(t-1-l) ||u_l - u_l'||.

    Simulates both control sequences and compares the measured deviation to
    the bound at every step, with a small relative tolerance absorbing float
    accumulation in dynamics whose declared constants are exactly attained.
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, sys.m)
    controls_p = np.asarray(controls_p, dtype=float).reshape(-1, sys.m)
    if controls.shape != controls_p.shape:
        raise ValueError("control sequences must have equal length")
    xs = simulate(sys, x0, controls)
    xsp = simulate(sys, x0p, controls_p)
    L_f, L_u = sys.lipschitz.L_f, sys.lipschitz.L_u
    bound = float(vec_norm(xs[0] - xsp[0], sys.norm))
    worst = 0.0
    for t in range(1, xs.shape[0]):
        bound = L_f * bound + L_u * float(vec_norm(controls[t - 1] - controls_p[t - 1], sys.norm))
        dev = float(vec_norm(xs[t] - xsp[t], sys.norm))
        if dev > bound * (1.0 + rel_tol):
            return PropagationCheck(False, t, dev / bound if bound else math.inf)
        if bound > 0:
            worst = max(worst, dev / bound)
    return PropagationCheck(True, None, worst)


# ---------------------------------------------------------------------------
# constant estimators
# ---------------------------------------------------------------------------

def estimate_lj(sys: System, eps: float, n_pairs: int = 200, seed: int = 0,
                pair_scale: float = 0.1, opts=None) -> float:
    """Empirical lower estimate of the value-function Lipschitz constant.

    Solves the conservative problem from sampled point pairs at distance
    about pair_scale and returns the largest cost slope |J(x) - J(x')| /
    ||x - x'|| over pairs where both solves succeeded. This observes slopes,
    so it can only under-estimate; round up before declaring a constant.
    """
    from .solver import solve_conservative_batch

    rng = np.random.default_rng(seed)
    base = sys.X.sample(rng, n_pairs)
    offs = rng.uniform(-pair_scale, pair_scale, size=base.shape)
    other = sys.X.clip(base + offs)
    ra = solve_conservative_batch(sys, base, eps, opts=opts)
    rb = solve_conservative_batch(sys, other, eps, opts=opts)
    best = 0.0
    for a, b, xa, xb in zip(ra, rb, base, other):
        if a.solver_status != "optimal" or b.solver_status != "optimal":
            continue
        d = float(vec_norm(xa - xb, sys.norm))
        if d > 1e-12:
            best = max(best, abs(a.cost - b.cost) / d)
    return best


def estimate_erosion_sensitivity(sys: System, eps: float, n_points: int = 100,
                                 seed: int = 0, opts=None) -> float:
    """Empirical lower estimate of L in J(x, eps) - J(x, 0) <= L * eps.

    Solves both the eroded and uneroded problems from sampled starts and
    returns the largest observed cost increase per unit of erosion.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    from .solver import solve_conservative_batch

    rng = np.random.default_rng(seed)
    X0 = sys.X.sample(rng, n_points)
    r_eps = solve_conservative_batch(sys, X0, eps, opts=opts)
    r_zero = solve_conservative_batch(sys, X0, 0.0, opts=opts)
    best = 0.0
    for a, b in zip(r_eps, r_zero):
        if a.solver_status != "optimal" or b.solver_status != "optimal":
            continue
        best = max(best, (a.cost - b.cost) / eps)
    return best


def as_json(report: dict, indent: Optional[int] = None) -> str:
    """Serialize a certificate report deterministically."""
    return _jsonutil.dumps(report, indent=indent)
