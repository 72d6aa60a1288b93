"""Command line entry point: ``snpiv {grid,ugly,fit,heatmap}``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import harness
from .synthetic import load_scenario


def _float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must be nonempty")
    return values


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must be nonempty")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snpiv", description="Sieve 2SLS experiments on synthetic NPIV scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    defaults = harness.GridConfig()
    g = sub.add_parser("grid", help="MSE grid over (c_alpha, c_sigma)")
    g.add_argument("--mode", choices=harness.MODES, default=defaults.mode)
    g.add_argument("--d", type=int, default=defaults.d)
    g.add_argument("--c-alpha", type=_float_list, default=list(defaults.c_alpha))
    g.add_argument("--c-sigma", type=_float_list, default=list(defaults.c_sigma))
    g.add_argument("--reps", type=int, default=None)
    g.add_argument("--n-labeled", type=int, default=None)
    g.add_argument("--m-unlabeled", type=int, default=None)
    g.add_argument("--feature-dim", type=int, default=defaults.feature_dim)
    g.add_argument("--seed", type=int, default=defaults.master_seed)
    g.add_argument("--out", required=True)
    g.add_argument("--paper-scale", action="store_true",
                   help="500 reps, 10^4 labeled and 10^5 unlabeled samples unless given explicitly")
    g.add_argument("--features-per-rep", action="store_true",
                   help="train a fresh feature pair for every rep instead of once per cell")

    u = sub.add_parser("ugly", help="sweep of the number of signal-carrying directions")
    u.add_argument("--d", type=int, default=11)
    u.add_argument("--c", type=float, required=True)
    u.add_argument("--k-list", type=_int_list, default=None)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True)

    f = sub.add_parser("fit", help="single fit on a scenario file, writes x,h0,h_hat")
    f.add_argument("--scenario", required=True)
    f.add_argument("--mode", choices=harness.MODES, default=harness.ORACLE)
    f.add_argument("--out", required=True)

    h = sub.add_parser("heatmap", help="SVG heatmap of a grid CSV")
    h.add_argument("--in", dest="inp", required=True)
    h.add_argument("--stat", choices=harness.STATISTICS, default="median")
    h.add_argument("--out", required=True)
    return parser


def _grid_config(args) -> harness.GridConfig:
    config = harness.GridConfig(c_alpha=args.c_alpha, c_sigma=args.c_sigma, mode=args.mode,
                                feature_dim=args.feature_dim, master_seed=args.seed, out=args.out,
                                d=args.d, features_per_rep=args.features_per_rep)
    if args.paper_scale:
        config = config.paper_scale()
    explicit = {k: v for k, v in (("reps", args.reps), ("n_labeled", args.n_labeled),
                                  ("m_unlabeled", args.m_unlabeled)) if v is not None}
    return replace(config, **explicit) if explicit else config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "grid":
            records = harness.run_grid(_grid_config(args))
            flagged = sum(r.flagged for r in records)
            print(f"wrote {len(records)} rows to {args.out}" + (f" ({flagged} flagged)" if flagged else ""))
        elif args.command == "ugly":
            k_values = args.k_list if args.k_list is not None else list(range(args.d))
            rows = harness.run_ugly_sweep(args.d, args.c, k_values,
                                          harness.UglyConfig(seed=args.seed), out=args.out)
            for row in rows:
                print(f"k={row.k} floor={row.floor:.6f} population={row.population_residual:.6f} "
                      f"finite={row.finite_residual:.6f}")
        elif args.command == "fit":
            harness.run_fit(load_scenario(args.scenario), args.mode, out=args.out)
            print(f"wrote {args.out}")
        else:
            harness.emit_heatmap(args.inp, args.stat, args.out)
            print(f"wrote {args.out}")
    except (ValueError, OSError) as exc:
        print(f"snpiv: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("snpiv: interrupted; completed cells were written", file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
