"""``bfmf`` command line: ``run`` one configuration or ``sweep`` over grid sizes.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (including
an iteration that did not converge).
"""
from __future__ import annotations

import argparse
import json
import math
import sys

from .bench import PROBLEMS, RHS_KINDS, ConfigError, RunConfig, run, sweep
from .report import write_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _add_common(p: argparse.ArgumentParser, sweep_mode=False):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--problem", choices=PROBLEMS)
    if not sweep_mode:
        src.add_argument("--matrix", help="Matrix Market file")
        p.add_argument("--k", type=int, default=16, help="grid points per dimension")
    else:
        p.add_argument("--k", type=int, nargs="+", required=True, help="increasing grid sizes")
    p.add_argument("--rhs", choices=RHS_KINDS)
    p.add_argument("--ppw", type=float, default=15.0, help="points per wavelength")
    p.add_argument("--omega", type=float, default=8 * math.pi, help="angular frequency")
    p.add_argument("--solver", choices=("exact", "hodbf"), default="exact")
    p.add_argument("--eps", type=float, default=1e-3, help="compression tolerance")
    p.add_argument("--nmin", type=int, default=1000, help="smallest compressed front dimension")
    p.add_argument("--alpha", type=float, default=2.0, help="proxy oversampling factor")
    p.add_argument("--knn", type=int, default=16, help="graph nearest neighbours per point")
    p.add_argument("--gmres-restart", type=int, default=30)
    p.add_argument("--tol-abs", type=float, default=1e-10)
    p.add_argument("--tol-rel", type=float, default=1e-6)
    p.add_argument("--maxiter", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", nargs=2, metavar=("FORMAT", "PATH"),
                   help="write the report as 'json PATH' or 'csv PATH'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bfmf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="solve one system and report"))
    _add_common(sub.add_parser("sweep", help="one report per grid size plus fitted slopes"),
                sweep_mode=True)
    return parser


def _config(ns, k) -> RunConfig:
    return RunConfig(problem=ns.problem, matrix=getattr(ns, "matrix", None), k=k, ppw=ns.ppw,
                     omega=ns.omega, rhs=ns.rhs, solver=ns.solver, eps=ns.eps, n_min=ns.nmin, alpha=ns.alpha,
                     k_nn=ns.knn, seed=ns.seed, restart=ns.gmres_restart, tol_abs=ns.tol_abs,
                     tol_rel=ns.tol_rel, maxiter=ns.maxiter)


def _emit(ns, reports, slopes=None) -> None:
    single = ns.command == "run"
    if ns.out is None:
        if single:
            print(reports[0].to_json())
        else:
            write_csv(sys.stdout, reports, slopes)
        return
    fmt, path = ns.out
    if fmt == "json":
        if single:
            text = reports[0].to_json()
        else:
            text = json.dumps({"reports": [r.to_dict() for r in reports], "slopes": slopes},
                              indent=2, sort_keys=True)
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        write_csv(path, reports, slopes)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if ns.out is not None and ns.out[0] not in ("json", "csv"):
        print("bfmf: --out format must be 'json' or 'csv'", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if ns.command == "run":
            reports, slopes = [run(_config(ns, ns.k))], None
        else:
            reports, slopes = sweep(_config(ns, ns.k[0]), ns.k)
    except ConfigError as exc:
        print(f"bfmf: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit(ns, reports, slopes)
    if ns.command == "run" and reports[0].status != "converged":
        print(f"bfmf: {reports[0].status}: {reports[0].error}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
