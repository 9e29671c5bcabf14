"""Command-line entry point: collect, verify, bench, oracle, certify, selftest.

Every run that writes files also writes a manifest.json beside them with the
full command, system config digest, seed, library versions, and wall time,
so any output directory can be reproduced bit-identically.

Exit codes: 0 success, 1 error, 2 the run finished but the certificate or
check came back negative, 64 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys as _sys
import time
from typing import Optional

import numpy as np

from . import __version__
from .errors import Assumption3Violated, NpmpcError
from .systems import BUILTINS, System, config_digest, load_system

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NEGATIVE = 2
EXIT_USAGE = 64


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we want 64
        raise _UsageError(message)


def _load_sys(args) -> System:
    name = args.system
    if name in BUILTINS:
        kwargs = {}
        if getattr(args, "gamma", None) is not None:
            kwargs["gamma"] = args.gamma
        if getattr(args, "horizon_T", None) is not None:
            kwargs["T"] = args.horizon_T
        return BUILTINS[name](**kwargs)
    return load_system(name)


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v != ""]


def _write_json(path: str, obj) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, default=_json_default)
        f.write("\n")


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v)!r}")


def _manifest(out_dirs, argv, sys_: Optional[System], seed, t0: float) -> None:
    try:
        import scipy
        scipy_version = scipy.__version__
    except ImportError:
        scipy_version = None
    doc = {
        "kind": "run_manifest",
        "command": ["npmpc"] + list(argv),
        "config_digest": None if sys_ is None else config_digest(sys_),
        "seed": seed,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy_version,
            "npmpc": __version__,
        },
        "wall_time_s": time.monotonic() - t0,
    }
    for d in dict.fromkeys(out_dirs):
        os.makedirs(d or ".", exist_ok=True)
        _write_json(os.path.join(d or ".", "manifest.json"), doc)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_collect(args, argv, t0) -> int:
    from . import collector, dataset
    sys_ = _load_sys(args)
    if args.grid is not None:
        ds, report = collector.collect_grid(sys_, args.eps, args.grid,
                                            values_only=args.values_only,
                                            jobs=args.jobs)
    else:
        if args.n is None:
            raise _UsageError("collect needs --n (or --grid)")
        ds, report = collector.collect(sys_, args.eps, args.n, args.seed,
                                       beta=args.beta, eta=args.eta,
                                       delta=args.delta, lam=args.lam,
                                       values_only=args.values_only,
                                       jobs=args.jobs)
    dataset.save(ds, args.out)
    _write_json(args.out + ".report.json", report)
    _manifest([os.path.dirname(args.out)], argv, sys_, args.seed, t0)
    print(f"dataset: {len(ds)} transitions, {ds.n_trajectories()} "
          f"trajectories -> {args.out}")
    if report.get("assumption3_violated"):
        print("warning: some start states were unsolvable "
              f"({report.get('n_infeasible')} infeasible)")
    return EXIT_OK


def _cmd_verify(args, argv, t0) -> int:
    from . import dataset, verifier
    sys_ = _load_sys(args)
    try:
        tree, ds, report = verifier.verify(
            sys_, args.eps, args.h0, args.beta, args.eta, args.lam,
            args.budget, dump_cells=args.dump_cells)
    except Assumption3Violated as exc:
        print(str(exc), file=_sys.stderr)
        if args.out:
            _write_json(os.path.join(args.out, "verify_report.json"),
                        {"kind": "verify_report", "certified": False,
                         "error": str(exc)})
            _manifest([args.out], argv, sys_, None, t0)
        return EXIT_NEGATIVE
    out_dirs = []
    if args.out:
        _write_json(os.path.join(args.out, "verify_report.json"), report)
        dataset.save(ds, os.path.join(args.out, "ds.jsonl"))
        out_dirs.append(args.out)
    if args.dump_cells:
        out_dirs.append(os.path.dirname(args.dump_cells.format(t=0)))
    _manifest(out_dirs, argv, sys_, None, t0)
    print(f"certified: {report['certified']} "
          f"(leaves {report['leaves_beta_ok']}/{report['leaves']}, "
          f"iterations {report['iterations']}, K {report['K']}/{report['budget']})")
    return EXIT_OK if report["certified"] else EXIT_NEGATIVE


def _cmd_bench(args, argv, t0) -> int:
    from . import collector, evaluator
    sys_ = _load_sys(args)
    datasets = {}
    for g in args.grids:
        ds, rep = collector.collect_grid(sys_, args.eps, g, jobs=args.jobs)
        datasets[g] = ds
        print(f"collected g={g}: {len(ds)} transitions "
              f"({rep['n_infeasible']} infeasible nodes)")
    rows, details, meta = evaluator.tradeoff_study(
        sys_, datasets, args.horizons, args.m, args.seed,
        lam=args.lam, eta=args.eta, out_dir=args.out)
    _manifest([args.out], argv, sys_, args.seed, t0)
    for r in rows:
        print(f"{r.controller_id:>10}: latency p50 {r.latency_q50:>12.0f} ns"
              f"   gap p50 {r.gap_q50:.4f}   violations {r.violations}/{r.n}")
    return EXIT_OK


def _cmd_oracle(args, argv, t0) -> int:
    from .oracle import dp_build, save_oracle
    sys_ = _load_sys(args)
    state_grid = _int_list(args.state_grid) if args.state_grid else None
    control_grid = _int_list(args.control_grid) if args.control_grid else None
    orc = dp_build(sys_, args.eps, state_grid=state_grid,
                   control_grid=control_grid)
    save_oracle(orc, args.out)
    _manifest([os.path.dirname(args.out)], argv, sys_, None, t0)
    print(f"oracle: tolerance {orc.tolerance():.6g} -> {args.out}")
    return EXIT_OK


def _cmd_certify(args, argv, t0) -> int:
    from . import certify, dataset
    ds = dataset.load(args.ds)
    if len(ds) == 0:
        # no system needed: no certificate condition can hold on no data
        print("recursive_feasibility: holds=False (empty dataset)")
        if args.out:
            _write_json(args.out, {"recursive_feasibility": {
                "holds": False, "reason": "empty dataset"}})
            _manifest([os.path.dirname(args.out)], argv, None, None, t0)
        return EXIT_NEGATIVE
    if args.system is None:
        raise _UsageError("--system is required for a non-empty dataset")
    sys_ = _load_sys(args)
    reports = {}
    rec = certify.check_recursive_feasibility(ds, sys_)
    reports["recursive_feasibility"] = rec
    holds = bool(rec["holds"])
    if args.lam is not None:
        cov = certify.check_theorem2_coverage(ds, args.lam, args.beta,
                                              args.eta, sys_.X)
        reports["theorem2_coverage"] = cov
        holds = holds and bool(cov["holds"])
    if args.out:
        _write_json(args.out, reports)
        _manifest([os.path.dirname(args.out)], argv, sys_, None, t0)
    for name, rep in reports.items():
        print(f"{name}: holds={rep['holds']} exact={rep['exact']}")
    return EXIT_OK if holds else EXIT_NEGATIVE


def _cmd_selftest(args, argv, t0) -> int:
    from .selftest import run_selftest
    ok = run_selftest(jobs=args.jobs, verbose=True)
    return EXIT_OK if ok else EXIT_NEGATIVE


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="npmpc",
                description="certified nonparametric lookup policies for MPC")
    p.add_argument("--version", action="version", version=f"npmpc {__version__}")
    sub = p.add_subparsers(dest="cmd", metavar="command")

    def add_common(sp, seed_default=0):
        sp.add_argument("--system", required=True,
                        help="builtin name (clqr, pendulum, min_time) or config path")
        sp.add_argument("--gamma", type=float, default=None,
                        help="discount override for builtin systems")
        sp.add_argument("--T", dest="horizon_T", type=int, default=None,
                        help="horizon override for builtin systems")
        sp.add_argument("--jobs", type=int,
                        default=max(1, os.cpu_count() or 1),
                        help="worker threads (results independent of value)")
        return sp

    c = add_common(sub.add_parser("collect", help="solve offline data"))
    c.add_argument("--eps", type=float, required=True)
    c.add_argument("--n", type=int, default=None, help="uniform draw budget")
    c.add_argument("--grid", type=int, default=None, help="grid points per axis")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True, help="dataset path (JSON lines)")
    c.add_argument("--values-only", action="store_true",
                   help="store start states with whole-horizon costs only")
    c.add_argument("--beta", type=float, default=5.0)
    c.add_argument("--eta", type=float, default=0.01)
    c.add_argument("--delta", type=float, default=0.1)
    c.add_argument("--lambda", dest="lam", type=float, default=None)
    c.set_defaults(func=_cmd_collect)

    v = add_common(sub.add_parser("verify", help="certify the domain by cell splitting"))
    v.add_argument("--eps", type=float, required=True)
    v.add_argument("--h0", type=float, required=True, help="initial cell radius")
    v.add_argument("--beta", type=float, default=5.0)
    v.add_argument("--eta", type=float, default=0.01)
    v.add_argument("--lambda", dest="lam", type=float, required=True)
    v.add_argument("--budget", type=int, required=True)
    v.add_argument("--dump-cells", default=None,
                   help="per-iteration JSON path pattern, e.g. out/iter_{t}.json")
    v.add_argument("--out", default=None, help="report + dataset directory")
    v.set_defaults(func=_cmd_verify)

    b = add_common(sub.add_parser("bench", help="latency/optimality trade-off study"))
    b.add_argument("--eps", type=float, required=True)
    b.add_argument("--grids", type=_int_list, required=True, help="e.g. 3,5,7,9,11")
    b.add_argument("--horizons", type=_int_list, required=True, help="e.g. 5,10,20,50")
    b.add_argument("--m", type=int, default=100)
    b.add_argument("--seed", type=int, default=7)
    b.add_argument("--eta", type=float, default=0.01)
    b.add_argument("--lambda", dest="lam", type=float, default=None)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_cmd_bench)

    o = add_common(sub.add_parser("oracle", help="build a value-table oracle"))
    o.add_argument("--eps", type=float, required=True)
    o.add_argument("--state-grid", default=None, help="points per axis, e.g. 201,201")
    o.add_argument("--control-grid", default=None)
    o.add_argument("--out", required=True, help="table path (.npdp1)")
    o.set_defaults(func=_cmd_oracle)

    ce = sub.add_parser("certify", help="certificates for a dataset")
    ce.add_argument("--system", default=None,
                    help="builtin name (clqr, pendulum, min_time) or config "
                         "path; optional for empty datasets")
    ce.add_argument("--gamma", type=float, default=None,
                    help="discount override for builtin systems")
    ce.add_argument("--T", dest="horizon_T", type=int, default=None,
                    help="horizon override for builtin systems")
    ce.add_argument("--ds", required=True, help="dataset path")
    ce.add_argument("--beta", type=float, default=5.0)
    ce.add_argument("--eta", type=float, default=0.01)
    ce.add_argument("--lambda", dest="lam", type=float, default=None,
                    help="also check coverage at this scale")
    ce.add_argument("--out", default=None, help="certificate JSON path")
    ce.set_defaults(func=_cmd_certify)

    st = sub.add_parser("selftest", help="reduced end-to-end property checks")
    st.add_argument("--jobs", type=int, default=max(1, os.cpu_count() or 1))
    st.set_defaults(func=_cmd_selftest)

    return p


def main(argv=None) -> int:
    argv = list(_sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help(_sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=_sys.stderr)
        parser.print_usage(_sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    if not getattr(args, "cmd", None):
        parser.print_help(_sys.stderr)
        return EXIT_USAGE
    t0 = time.monotonic()
    try:
        return args.func(args, argv, t0)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    except NpmpcError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
