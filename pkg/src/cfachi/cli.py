"""
Command line entry point: ``cfachi fit | simulate | report``.

Exit codes: 0 success, 1 input error, 2 estimation did not converge.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datagen, inference, report, simulation
from .estimation import SingularityError, fit, fit_independence
from .model import ModelError, load_model

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCONVERGED = 2

LM_SHOWN = 10


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _fmt(x):
    return "nan" if x != x else f"{x:.6g}"


def _load_data(model, path):
    try:
        names, data = datagen.read_csv(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read data file {path}: {exc}") from None
    observed = list(model.observed) or [f"x{i + 1}" for i in range(model.p)]
    missing = [v for v in observed if v not in names]
    if missing:
        raise InputError(f"data file {path} lacks variable(s) named in the model: "
                         + ", ".join(missing))
    cols = [names.index(v) for v in observed]
    return data[:, cols]


def _statistic_report(kind, sol, baseline, moments):
    T = inference.statistic(kind, sol, moments)
    T_i = inference.statistic(kind, baseline, moments)
    idx = inference.indices_from_statistics(T.value, T.df, T_i.value, T_i.df, moments.n)
    out = {
        "estimator": kind, "T": T.value, "df": T.df, "p_value": T.p_value,
        "baseline_T": T_i.value, "baseline_df": T_i.df, "n": moments.n,
        "nfi": idx.nfi, "cfi": idx.cfi, "tli": idx.tli, "rmsea": idx.rmsea,
        "verdict_cfi": idx.verdict_cfi, "verdict_tli": idx.verdict_tli,
        "verdict_rmsea": idx.verdict_rmsea,
    }
    if T.df >= 1:
        out["tli_conventional"] = inference.tli_conventional(T.value, T.df, T_i.value, T_i.df)
    return out


def cmd_fit(args) -> int:
    try:
        model = load_model(args.model)
    except OSError as exc:
        raise InputError(f"cannot read model file {args.model}: {exc}") from None
    except ModelError as exc:
        raise InputError(f"model file {args.model}: {exc}") from None
    data = _load_data(model, args.data)
    if data.shape[0] < 2:
        raise InputError(f"data file {args.data} needs at least two rows")
    moments = datagen.sample_covariance(data)
    try:
        sol = fit(model, moments)
        baseline = fit_independence(moments)
    except SingularityError as exc:
        raise InputError(f"data file {args.data}: {exc}") from None

    kinds = [k.upper() for k in (args.estimator or ["ml"])]
    kinds = [k for k in (inference.KIND_ML, inference.KIND_RLS, inference.KIND_SB) if k in kinds]
    stats, notes = [], []
    for kind in kinds:
        try:
            stats.append(_statistic_report(kind, sol, baseline, moments))
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            notes.append(f"{kind}: not available ({exc})")

    labels = [model.label(p) for p in model.positions()]
    lm = [c for c in inference.lm_test(model, sol.theta_hat, moments) if c.error is None]
    lm = lm[:LM_SHOWN]

    print(f"N = {moments.N}, p = {model.p}, free parameters = {model.q}, df = {sol.df}")
    print(f"converged = {sol.converged} after {sol.iterations} iterations "
          f"(max |gradient| = {sol.gradient_norm:.3g})")
    print("\nParameter estimates")
    width = max((len(s) for s in labels), default=0)
    for name, value in zip(labels, sol.theta_hat):
        print(f"  {name.ljust(width)}  {value: .6f}")
    for st in stats:
        ok = lambda flag: "pass" if flag else "fail"  # noqa: E731
        print(f"\n{st['estimator']} test statistic")
        print(f"  T = {_fmt(st['T'])}, df = {st['df']}, p = {_fmt(st['p_value'])}")
        print(f"  baseline T = {_fmt(st['baseline_T'])}, df = {st['baseline_df']}")
        print(f"  NFI   = {_fmt(st['nfi'])}")
        print(f"  CFI   = {_fmt(st['cfi'])}  (> 0.95: {ok(st['verdict_cfi'])})")
        print(f"  TLI   = {_fmt(st['tli'])}  (> 0.95: {ok(st['verdict_tli'])})")
        print(f"  RMSEA = {_fmt(st['rmsea'])}  (< 0.06: {ok(st['verdict_rmsea'])})")
        if "tli_conventional" in st:
            print(f"  TLI, conventional Tucker-Lewis form (alternate) = "
                  f"{_fmt(st['tli_conventional'])}")
    for note in notes:
        print(f"\n{note}")
    if lm:
        print(f"\nTop {len(lm)} modification candidates (score test, 1 df)")
        for c in lm:
            print(f"  {model.label(c.target).ljust(width)}  score = {_fmt(c.score)}, "
                  f"p = {_fmt(c.p_value)}")

    if args.json:
        doc = {
            "converged": sol.converged, "iterations": sol.iterations, "f_min": sol.f_min,
            "N": moments.N, "df": sol.df,
            "parameters": [{"name": n, "matrix": p.matrix, "row": p.row, "col": p.col,
                            "estimate": float(v)}
                           for n, p, v in zip(labels, model.positions(), sol.theta_hat)],
            "statistics": stats,
            "lm": [{"name": model.label(c.target), "matrix": c.target.matrix,
                    "row": c.target.row, "col": c.target.col, "score": c.score,
                    "p_value": c.p_value} for c in lm],
        }
        with open(args.json, "w") as fh:
            json.dump(doc, fh, indent=2, allow_nan=True)
            fh.write("\n")
    return EXIT_OK if sol.converged else EXIT_NONCONVERGED


def _plan_from_args(args) -> simulation.SimulationPlan:
    doc = {}
    if args.plan:
        try:
            with open(args.plan) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read plan file {args.plan}: {exc}") from None
        if not isinstance(doc, dict):
            raise InputError(f"plan file {args.plan} must hold a JSON object")
    if args.scenario:
        doc["scenario"] = args.scenario
    if args.sizes:
        try:
            doc["sample_sizes"] = [int(s) for s in args.sizes.split(",")]
        except ValueError:
            raise InputError(f"--sizes must be comma-separated integers, got {args.sizes!r}")
    if args.reps is not None:
        doc["replications"] = args.reps
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.estimators:
        doc["estimators"] = [e.strip() for e in args.estimators.split(",")]
    if args.lm is not None:
        doc["lm_enabled"] = args.lm
    try:
        return simulation.SimulationPlan.from_dict(doc)
    except simulation.PlanError as exc:
        raise InputError(f"invalid plan: {exc}") from None


def cmd_simulate(args) -> int:
    plan = _plan_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = len(plan.sample_sizes) * plan.replications

    def progress(done, total):
        if done == total or done % max(total // 10, 1) == 0:
            print(f"  {done}/{total} replications", file=sys.stderr)

    print(f"{plan.scenario}: {cells} replications over N = "
          f"{','.join(map(str, plan.sample_sizes))}, estimators {','.join(plan.estimators)}",
          file=sys.stderr)
    rows = simulation.run_plan(plan, workers=args.workers, progress=progress)
    agg = simulation.aggregate(rows)
    simulation.write_rows(out / "rows.csv", rows)
    simulation.write_rows(out / "aggregate.csv", agg)
    print(report.format_table(agg), end="")
    print(f"wrote {len(rows)} rows to {out / 'rows.csv'} and {len(agg)} to "
          f"{out / 'aggregate.csv'}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        rows = simulation.read_aggregate(args.aggregate)
    except OSError as exc:
        raise InputError(f"cannot read {args.aggregate}: {exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if not rows:
        raise InputError(f"{args.aggregate} has no data rows")
    table = report.format_table(rows)
    out = Path(args.out)
    report.render_chart(rows, out, panel=args.panel)
    out.with_suffix(".txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfachi", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a CFA model to a CSV data file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--estimator", action="append", choices=["ml", "rls", "sb"])
    p.add_argument("--json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run a Monte Carlo plan")
    p.add_argument("--plan")
    p.add_argument("--scenario", choices=simulation.SCENARIOS)
    p.add_argument("--sizes")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--estimators")
    lm = p.add_mutually_exclusive_group()
    lm.add_argument("--lm", dest="lm", action="store_true", default=None)
    lm.add_argument("--no-lm", dest="lm", action="store_false")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="tabulate and chart an aggregate CSV")
    p.add_argument("--aggregate", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--panel", choices=report.PANELS, default="both")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
