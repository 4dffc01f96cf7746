"""``popdyn`` command line: run experiments, compare at matched bias, re-plot."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .experiment import (
    ConfigError,
    compare_at_matched_bias,
    load_summary,
    parse_config,
    recipe_names,
    run_experiment,
)

EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("popdyn")


def _band(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty band {text!r} (LO > HI)")
    return lo, hi


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popdyn", description="Popularity-bias dynamics simulator.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run an experiment config or a named recipe")
    r.add_argument("config", help=f"YAML config path or recipe name ({', '.join(recipe_names())})")
    r.add_argument("--out", type=Path, help="output directory (default: runs/<name>)")
    r.add_argument("--seed", type=int, help="base seed; repeats use seed, seed+1, ...")
    r.add_argument("--paper-scale", action="store_true", help="use K=20, T=40000, L=50")
    r.add_argument("--repeats", type=int, help="number of seeds per method")
    r.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    r.add_argument("--no-plot", action="store_true")

    c = sub.add_parser("compare", help="tabulate clicks of settings matched to a final-Gini band")
    c.add_argument("summaries", nargs="+", type=Path)
    c.add_argument("--gini-band", type=_band, required=True, metavar="LO:HI")

    pl = sub.add_parser("plot", help="redraw the chart pair from a metrics.csv")
    pl.add_argument("metrics", type=Path)
    pl.add_argument("--out", type=Path)
    return p


def _cmd_run(args) -> int:
    try:
        spec = parse_config(args.config, paper_scale=args.paper_scale)
        sim = spec.sim
        if args.seed is not None:
            sim = dataclasses.replace(sim, seed=args.seed)
        if args.repeats is not None:
            sim = dataclasses.replace(sim, repeats=args.repeats)
        spec = dataclasses.replace(spec, sim=sim, out_dir=args.out or spec.out_dir)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    summary = run_experiment(spec, jobs=args.jobs, plot=not args.no_plot)
    for e in summary["methods"]:
        if e["n_runs"]:
            print(f"{e['label']:<40} gini {e['final_gini_mean']:.3f}±{e['final_gini_sd']:.3f}  "
                  f"clicks {e['clicks_mean']:.1f}±{e['clicks_sd']:.1f}  (n={e['n_runs']})")
    print(f"wrote {spec.out_dir / 'metrics.csv'} and {spec.out_dir / 'summary.json'}")
    if summary["failures"]:
        for f in summary["failures"]:
            print(f"FAILED {f['run_id']}: {f['error']}", file=sys.stderr)
        return EXIT_RUN_FAILED
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        summaries = [load_summary(p) for p in args.summaries]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    table = compare_at_matched_bias(summaries, args.gini_band)
    print(table.format())
    return EXIT_OK if table.feasible else EXIT_RUN_FAILED


def _cmd_plot(args) -> int:
    from .plotting import plot_metrics

    try:
        paths = plot_metrics(args.metrics, args.out)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    handler = {"run": _cmd_run, "compare": _cmd_compare, "plot": _cmd_plot}[args.cmd]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
