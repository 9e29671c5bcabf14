"""Reduced headless property checks behind `npmpc selftest`.

Each check prints one pass/fail line. The suite touches every layer (closed
forms, geometry, dataset round-trip, collector determinism, domain
verification, oracle sandwich at reduced 101-point grids, certified-dataset
rollouts, lookup-vs-solve latency) with sizes chosen to finish in minutes.
"""

from __future__ import annotations

import math
import time

import numpy as np


def _check_closed_forms() -> str:
    from .certify import (perf_radius, rel_err_bound, sample_complexity,
                          translate_gap, translate_gap_inverse)
    from .policy import lambda_min
    from .systems import make_clqr

    # second evaluations coded directly from the formulas
    assert abs(lambda_min(0.5, 1.2, 10.0) - (1 + 0.6) / (1 - 0.6) * 10.0) < 1e-12
    assert abs(perf_radius(2.0, 5.0, 0.01, 1.0) - 5.0 * 2.01 / 7.0) < 1e-12
    b = translate_gap(3.0, 0.05, 0.0, 0.0)
    assert abs(translate_gap_inverse(b, 0.05, 0.0, 0.0) - 3.0) < 1e-9
    assert math.isinf(rel_err_bound(1.0, 2.0, 1.0, 0.01))
    r, n_bound = sample_complexity(make_clqr(), 5.0, 0.01, 0.1, 0.1,
                                   lam=1.0, L=0.0)
    assert abs(r - 0.01 * 5 / (2 * (0.02 + 0.05))) < 1e-15
    assert n_bound >= 1
    return "formulas match second evaluations"


def _check_geometry() -> str:
    from .geometry import Box, covering_number_box, erode, is_cover

    X = Box([-3.0, -3.0], [3.0, 3.0])
    inner = erode(X, 0.1)
    assert np.allclose(inner.lo, [-2.9, -2.9]) and np.allclose(inner.hi, [2.9, 2.9])
    assert covering_number_box(X, 0.5) == 36
    centers = np.array([[x, y] for x in (-2.0, 0.0, 2.0) for y in (-2.0, 0.0, 2.0)])
    res = is_cover(centers, 1.0, X)
    assert res.holds and res.exact
    assert not is_cover(centers, 0.9, X).holds
    return "erode / covering number / exact cover decisions"


def _check_dataset_roundtrip(tmpdir: str) -> str:
    import os

    from . import dataset
    from .collector import collect
    from .systems import make_clqr

    sys_ = make_clqr()
    ds, _ = collect(sys_, 0.1, 4, seed=11)
    path = os.path.join(tmpdir, "selftest_ds.jsonl")
    dataset.save(ds, path)
    back = dataset.load(path)
    assert len(back) == len(ds) and back.closed == ds.closed
    for a, b in zip(ds.transitions, back.transitions):
        assert np.array_equal(a.x, b.x) and a.j == b.j and a.succ == b.succ
    return f"{len(ds)} transitions through save/load unchanged"


def _check_collector_determinism() -> str:
    from .collector import collect
    from .systems import make_clqr

    sys_ = make_clqr()
    a, _ = collect(sys_, 0.1, 6, seed=3)
    b, _ = collect(sys_, 0.1, 6, seed=3)
    assert len(a) == len(b)
    for ta, tb in zip(a.transitions, b.transitions):
        assert np.array_equal(ta.x, tb.x) and np.array_equal(ta.u, tb.u)
        assert ta.j == tb.j
    return "same seed reproduces the dataset bit-identically"


def _check_verify() -> str:
    from .certify import check_recursive_feasibility, check_theorem2_coverage
    from .systems import make_clqr
    from .verifier import verify

    sys_ = make_clqr()
    tree, ds, report = verify(sys_, 0.1, 1.0, 5.0, 0.01, 1.0, 2000)
    assert report["certified"], "domain verification did not certify"
    assert report["b_split_rounds"] <= 5
    rec = check_recursive_feasibility(ds, sys_)
    cov = check_theorem2_coverage(ds, 1.0, 5.0, 0.01, sys_.X)
    assert rec["condition2"]["holds"] and cov["holds"]
    return (f"fully certified in {report['b_split_rounds']} refinement "
            f"rounds, cross-checks hold")


def _check_sandwich() -> str:
    from .collector import collect_grid
    from .oracle import dp_build, dp_query
    from .policy import j_lower, j_upper_batch, make_policy
    from .systems import make_clqr

    sys_ = make_clqr()
    ds, _ = collect_grid(sys_, 0.1, 21, values_only=True)
    pol = make_policy(ds, sys_, lam=70.0)
    orc = dp_build(sys_, 0.1, state_grid=(101, 101), control_grid=(101,))
    tol = 2.0 * orc.tolerance()
    rng = np.random.default_rng(5)
    P = rng.uniform(-3, 3, size=(200, 2))
    jo = np.array([dp_query(orc, x) for x in P])
    lo = np.array([j_lower(pol, x) for x in P])
    hi = j_upper_batch(pol, P)
    finite = np.isfinite(jo)
    ok = (lo <= jo + tol) & (jo <= hi + tol)
    rate = float((ok & finite).sum()) / float(finite.sum())
    assert rate >= 0.99, f"sandwich pass rate {rate:.3f} < 0.99"
    return f"bounds bracket the oracle at {rate:.1%} of probes (tol {tol:.3g})"


def _check_rollouts() -> str:
    from .certify import check_recursive_feasibility
    from .evaluator import NppController, rollout
    from .policy import j_upper, make_policy
    from .systems import make_clqr, make_pendulum
    from .verifier import verify

    sys_ = make_clqr()
    _, ds, _ = verify(sys_, 0.1, 1.0, 5.0, 0.01, 1.0, 2000)
    rec = check_recursive_feasibility(ds, sys_)
    assert rec["holds"]
    pol = make_policy(ds, sys_, lam=70.0)
    ctl = NppController(pol, "npp")
    rng = np.random.default_rng(2)
    violations = 0
    for _ in range(20):
        rep = rollout(sys_, ctl, sys_.X.sample(rng))
        violations += int(rep.violated)
    assert violations == 0, f"{violations} rollout(s) violated constraints"

    pend = make_pendulum(gamma=0.5)
    from .collector import collect_grid
    from .policy import lambda_min
    dsp, _ = collect_grid(pend, 0.05, 5)
    lam = lambda_min(pend.gamma, pend.lipschitz.L_f, pend.lipschitz.L_J)
    polp = make_policy(dsp, pend, lam=lam)
    ctlp = NppController(polp, "npp")
    bad = 0
    for _ in range(20):
        x0 = pend.X.sample(rng)
        rep = rollout(pend, ctlp, x0)
        if rep.realized_cost > j_upper(polp, x0) + 1e-6:
            bad += 1
    assert bad == 0, f"{bad} rollout(s) exceeded the certified upper bound"
    return "0 violations on certified data; 20/20 rollouts under j_upper"


def _check_latency() -> str:
    from .collector import collect_grid
    from .evaluator import MpcController, NppController
    from .policy import make_policy
    from .systems import make_pendulum

    pend = make_pendulum()
    ds, _ = collect_grid(pend, 0.05, 7)
    pol = make_policy(ds, pend, lam=120.0)
    npp = NppController(pol, "npp")
    mpc = MpcController(pend, 20, 0.0)
    rng = np.random.default_rng(4)
    xs = [pend.X.sample(rng) for _ in range(130)]
    for x in xs[:100]:
        npp(x)
    lat_npp = []
    for x in xs[100:]:
        t0 = time.perf_counter_ns()
        npp(x)
        lat_npp.append(time.perf_counter_ns() - t0)
    for x in xs[:3]:
        mpc(x)
    lat_mpc = []
    for x in xs[100:110]:
        t0 = time.perf_counter_ns()
        mpc(x)
        lat_mpc.append(time.perf_counter_ns() - t0)
    ratio = float(np.median(lat_mpc)) / float(np.median(lat_npp))
    assert ratio >= 10.0, f"lookup only {ratio:.0f}x faster than the solve"
    return (f"lookup p50 {np.median(lat_npp)/1e3:.0f} us vs solve p50 "
            f"{np.median(lat_mpc)/1e6:.1f} ms ({ratio:.0f}x)")


def run_selftest(jobs: int = 1, verbose: bool = True) -> bool:
    """Run every check; returns True when all pass."""
    import tempfile

    checks = [
        ("closed-forms", _check_closed_forms),
        ("geometry", _check_geometry),
        ("collector-determinism", _check_collector_determinism),
        ("verify-domain", _check_verify),
        ("oracle-sandwich", _check_sandwich),
        ("certified-rollouts", _check_rollouts),
        ("latency", _check_latency),
    ]
    all_ok = True
    t_start = time.monotonic()
    with tempfile.TemporaryDirectory() as tmpdir:
        named = checks[:2] + [("dataset-roundtrip",
                               lambda: _check_dataset_roundtrip(tmpdir))] + checks[2:]
        for name, fn in named:
            t0 = time.monotonic()
            try:
                detail = fn()
                ok = True
            except AssertionError as exc:
                detail = str(exc) or "assertion failed"
                ok = False
            except Exception as exc:  # a crashed check is a failed check
                detail = f"{type(exc).__name__}: {exc}"
                ok = False
            all_ok = all_ok and ok
            if verbose:
                status = "PASS" if ok else "FAIL"
                print(f"[{status}] {name:<22} {time.monotonic()-t0:6.1f}s  {detail}")
    if verbose:
        total = time.monotonic() - t_start
        print(f"selftest {'passed' if all_ok else 'FAILED'} "
              f"in {total:.1f}s")
    return all_ok
