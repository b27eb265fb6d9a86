"""Command-line driver: ``hybrid-hpf {run,benchmark,validate,kpi}``.

Exit codes: 0 success, 1 non-convergence (or a failed check), 2 input error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from hybrid_hpf.nic import TIERS

EXIT_OK, EXIT_NO_CONVERGENCE, EXIT_INPUT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _solver_overrides(args) -> dict:
    out = {}
    if args.harmonics is not None:
        out["H"] = args.harmonics
    if getattr(args, "tol", None) is not None:
        out["tol_residual"] = args.tol
    if getattr(args, "max_iter", None) is not None:
        out["max_iter"] = args.max_iter
    if args.tier is not None:
        out["tier"] = args.tier
    return out


def _solve_and_write(study, out_dir) -> int:
    from hybrid_hpf.results import result_set, write_results
    from hybrid_hpf.solver import run
    from hybrid_hpf.study import build_model

    cfg = study.solver
    model = build_model(study, cfg)
    rep = run(model, cfg)
    paths = write_results(result_set(study, model, rep), out_dir)
    status = "converged" if rep.converged else "NOT converged"
    print(f"{study.name or 'study'}: {status} (H={cfg.H}, tier={cfg.tier}, "
          f"{rep.iterations} Newton iterations, {rep.outer_refreshes} refreshes, "
          f"residual {rep.final_residual:.3e})")
    if rep.diagnostics:
        print(f"diagnostics: {rep.diagnostics}")
    print(f"wrote {paths['csv']} and {paths['json']}")
    return EXIT_OK if rep.converged else EXIT_NO_CONVERGENCE


def cmd_run(args) -> int:
    from hybrid_hpf.study import load_study
    study = load_study(args.study)
    return _solve_and_write(study.with_solver(**_solver_overrides(args)), args.out)


def cmd_benchmark(args) -> int:
    from hybrid_hpf.study import build_cigre_benchmark
    study = build_cigre_benchmark().with_solver(**_solver_overrides(args))
    return _solve_and_write(study, args.out)


def cmd_validate(args) -> int:
    from hybrid_hpf.oracle import validation_suite
    from hybrid_hpf.study import build_cigre_benchmark, load_study
    study = load_study(args.study) if args.study else build_cigre_benchmark()
    checks = validation_suite(study, cosim=not args.no_cosim)
    width = max(len(c.name) for c in checks)
    print(f"{'check':<{width}}  result  {'value':>10}  {'limit':>9}  detail")
    for c in checks:
        print(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL':<6}  {c.value:>10.3e}  "
              f"{c.threshold:>9.1e}  {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_NO_CONVERGENCE


def cmd_kpi(args) -> int:
    from hybrid_hpf.oracle import kpi
    from hybrid_hpf.results import kpi_to_json, read_spectra
    rep = kpi(read_spectra(args.ref), read_spectra(args.test), floor=args.floor)
    print(f"{'subsystem':<10} {'quantity':<8} {'max e_abs':>11} {'max e_arg':>11}")
    for (sid, q), (ea, eg) in rep.maxima().items():
        print(f"{sid:<10} {q:<8} {ea:>11.3e} {eg:>11.3e}")
    if args.out:
        Path(args.out).write_text(kpi_to_json(rep) + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybrid-hpf", description="Harmonic power flow for hybrid AC/DC grids.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def solver_opts(sp, full=True):
        sp.add_argument("--harmonics", type=int, metavar="H", help="highest harmonic order")
        if full:
            sp.add_argument("--tol", type=float, help="residual tolerance (p.u.)")
            sp.add_argument("--max-iter", type=int, help="Newton iterations per outer pass")
        sp.add_argument("--tier", choices=TIERS, help="NIC model tier")

    r = sub.add_parser("run", help="solve a study file")
    r.add_argument("--study", required=True, help="study JSON file")
    r.add_argument("--out", required=True, help="output directory")
    solver_opts(r)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("benchmark", help="solve the built-in hybrid microgrid benchmark")
    b.add_argument("--out", default="benchmark_results", help="output directory")
    solver_opts(b)
    b.set_defaults(func=cmd_benchmark)

    v = sub.add_parser("validate", help="run the oracle cross-checks")
    v.add_argument("--study", help="study JSON file (default: built-in benchmark)")
    v.add_argument("--no-cosim", action="store_true", help="skip the time-domain cross-check")
    v.set_defaults(func=cmd_validate)

    k = sub.add_parser("kpi", help="compare two spectra files")
    k.add_argument("--ref", required=True, help="reference spectra (results dir, .json or .csv)")
    k.add_argument("--test", required=True, help="spectra under test")
    k.add_argument("--floor", type=float, default=1e-9, help="magnitude floor for angle errors")
    k.add_argument("--out", help="write the full KPI report as JSON")
    k.set_defaults(func=cmd_kpi)
    return p


def main(argv=None) -> int:
    from hybrid_hpf.resources import LinearizationError
    from hybrid_hpf.timedomain import SettlingError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LinearizationError, SettlingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
