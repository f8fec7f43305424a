"""``chordlab`` command line: run sweeps, compare with theory, export plot data.

Exit status: 0 success, 1 validation failure (failed comparisons, or
trials that errored or aborted), 2 bad input (spec, directory, quantity).
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import lab
from .fluid import TheoryParams, predict

OK, FAILED, BAD_INPUT = 0, 1, 2


def _cmd_run(args) -> int:
    try:
        spec = lab.load_spec(args.spec)
    except lab.SpecError as e:
        print(f"spec error: {e}", file=sys.stderr)
        return BAD_INPUT
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed_base=args.seed)
    out = Path(args.out or spec.out)
    results, paths = lab.run_experiment(spec, jobs=args.jobs, out=out)
    bad = 0
    for pt in results:
        line = (f"N={pt.N} r={pt.r:g} alpha={pt.alpha:g}: "
                f"{len(pt.completed)}/{spec.trials} trials")
        if pt.aborted or pt.errors:
            bad += 1
            line += f" ({pt.aborted} aborted, {len(pt.errors)} failed)"
        print(line)
    print(f"wrote {len(paths)} files to {out}")
    return FAILED if bad else OK


def _cmd_compare(args) -> int:
    try:
        rows = lab.compare(lab.read_results(args.dir))
    except (FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return BAD_INPUT
    report = lab.format_report(rows)
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return FAILED if any(c.status == "fail" for c in rows) else OK


def _cmd_plot_data(args) -> int:
    try:
        tables = lab.read_results(args.dir)
        paths = lab.write_plot_data(tables, args.quantity, args.out or Path(args.dir) / "plots")
    except (FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return BAD_INPUT
    for p in paths:
        print(p)
    return OK


def _cmd_predict(args) -> int:
    try:
        p = TheoryParams(K=args.K, N=args.N, S=args.S, r=args.r, alpha=args.alpha)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return BAD_INPUT
    ps = predict(p)
    fmt = lab.format_value
    lines = ["quantity,index,value,valid"]
    for q in ("w", "d", "f", "p_bu"):
        vec, mask = getattr(ps, q), ps.valid[q]
        lines += [f"{q},{i},{fmt(vec[i])},{int(mask[i])}" for i in range(1, vec.shape[0])]
    lines.append(f"inconsistency,0,{fmt(ps.inconsistency)},1")
    for name in ("lookup", "lookup_zero_churn", "lookup_fit"):
        lines.append(f"{name},0,{fmt(ps.value(name))},1")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chordlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the sweep described by a TOML spec")
    run.add_argument("spec")
    run.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    run.add_argument("--seed", type=int, help="override seed_base from the experiment file")
    run.add_argument("--out", help="override the output directory from the experiment file")
    run.set_defaults(func=_cmd_run)

    cmp_ = sub.add_parser("compare", help="theory vs simulation report for a results directory")
    cmp_.add_argument("dir")
    cmp_.add_argument("--out", help="also write the report to this file")
    cmp_.set_defaults(func=_cmd_compare)

    plot = sub.add_parser("plot-data", help="column files for one quantity (w1, d2, fk, lookup, ...)")
    plot.add_argument("dir")
    plot.add_argument("--quantity", required=True)
    plot.add_argument("--out", help="output directory (default <dir>/plots)")
    plot.set_defaults(func=_cmd_plot_data)

    pred = sub.add_parser("predict", help="theory values for one parameter point")
    pred.add_argument("--K", type=int, default=2**20)
    pred.add_argument("--N", type=int, default=1000)
    pred.add_argument("--S", type=int, default=6)
    pred.add_argument("--r", type=float, default=500.0)
    pred.add_argument("--alpha", type=float, default=0.5)
    pred.add_argument("--out", help="also write the table to this file")
    pred.set_defaults(func=_cmd_predict)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return BAD_INPUT if e.code else OK
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return BAD_INPUT
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
