"""Command line entry point: ``robustopt <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import harness
from .aggregation import verify_trials
from .problems import byzantine_bounds


def _cmd_run(args):
    cfg, traces = harness.run_config_file(args.config, args.set, args.out)
    target, rows = harness.compare_runs(traces)
    print(harness.format_comparison(target, rows))
    for name, t in traces.items():
        info = t.info
        print(f"{name}: rounds={len(t)} final_gap={t.loss_gap[-1]:.6g} "
              f"nu={info.get('nu', math.nan):.4g} G2={info.get('G2', math.nan):.4g} "
              f"B2={info.get('B2', math.nan):.4g} lemma1_violations={info.get('lemma1_violations', 0)}"
              + (" DIVERGED" if t.diverged else ""))
    out = args.out or cfg.output
    if out:
        print(f"wrote {out}")
    return 0


def _cmd_sweep(args):
    results = harness.sweep(args.dir, jobs=args.jobs, outdir=args.out)
    if not results:
        print(f"no *.json configs in {args.dir}", file=sys.stderr)
        return 1
    for path, (target, rows) in results.items():
        print(f"== {path}")
        print(harness.format_comparison(target, rows))
    return 0


def _cmd_bounds(args):
    b = byzantine_bounds(args.G, args.B, args.mu, args.f, args.n)
    print(f"f/n = {args.f / args.n:.6g}, breakdown limit 1/(B^2+2) = {1 / (args.B ** 2 + 2):.6g}")
    print(f"breakdown_ok = {b.breakdown_ok}")
    print(f"loss gap lower bound     = {b.value_bound:.6g}")
    print(f"grad norm^2 lower bound  = {b.gradnorm_bound:.6g}")
    return 0


def _cmd_agg_verify(args):
    res = verify_trials(args.rule, args.n, args.f, args.trials, args.seed, args.dim)
    status = "PASS" if res.holds else "FAIL"
    print(f"{args.rule} n={args.n} f={args.f} trials={args.trials}: "
          f"worst ratio {res.worst_ratio:.6g} vs nu {res.nu:.6g} [{status}]")
    return 0 if res.holds else 1


def _cmd_plot(args):
    traces = [harness.read_csv(p) for p in args.csv]
    harness.emit_plot(traces, args.output)
    print(f"wrote {args.output}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="robustopt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config", type=Path)
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (value parsed as JSON when possible)")
    r.add_argument("--out", help="output directory (overrides the config's)")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run every *.json config in a directory")
    s.add_argument("dir", type=Path)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help="root output directory; one subdirectory per config")
    s.set_defaults(func=_cmd_sweep)

    b = sub.add_parser("bounds", help="lower bounds under (G,B)-heterogeneity")
    b.add_argument("--G", type=float, required=True)
    b.add_argument("--B", type=float, required=True)
    b.add_argument("--mu", type=float, required=True)
    b.add_argument("--f", type=int, required=True)
    b.add_argument("--n", type=int, required=True)
    b.set_defaults(func=_cmd_bounds)

    a = sub.add_parser("agg-verify", help="brute-force robustness ratio vs catalog nu")
    a.add_argument("--rule", required=True, help='e.g. "cwtm", "nnm+krum", "frg(gts)+gm"')
    a.add_argument("--n", type=int, required=True)
    a.add_argument("--f", type=int, required=True)
    a.add_argument("--trials", type=int, default=200)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--dim", type=int, default=5)
    a.set_defaults(func=_cmd_agg_verify)

    pl = sub.add_parser("plot", help="log-scale loss-gap SVG from trace CSVs")
    pl.add_argument("csv", nargs="+", type=Path)
    pl.add_argument("-o", "--output", required=True, type=Path)
    pl.set_defaults(func=_cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
