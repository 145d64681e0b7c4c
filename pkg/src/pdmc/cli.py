"""Command-line entry point: ``pdmc <command> [options]``."""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .config import OUTPUT_ENV, ConfigValidationError, ExperimentConfig, load_config

# flags exposed on every subcommand; values default to None so only explicit
# flags override the config file
_COMMON = ["seed", "stream", "out_dir", "cache_dir", "tag", "target", "n", "p", "x_true",
           "data_seed", "dataset"]
_SAMPLE = ["algo", "estimator", "bound", "T", "burn_in", "refresh_rate", "epsilon", "hybrid_k",
           "ess_dt", "d"]
_CIS = ["T", "rate", "rate_policy", "rho", "proposal", "nu"]
_SMC = ["N", "h", "K", "ess_threshold", "rate", "rate_policy", "rho", "proposal", "nu", "init",
        "init_lo", "init_hi", "hist_t_min"]
_VARIANCE = ["replicates"]


def _add(parser, names):
    for name in names:
        flag = "--" + name.replace("_", "-")
        parser.add_argument(flag, dest=name, default=None, help=f"override config '{name}'")


def build_parser():
    p = argparse.ArgumentParser(prog="pdmc", description=__doc__,
                                epilog=f"Run outputs go under --out-dir, else ${OUTPUT_ENV}, else ./runs.")
    sub = p.add_subparsers(dest="command", required=True)
    groups = {
        "sample": _SAMPLE, "cis": _CIS, "smc": _SMC, "variance-study": _VARIANCE,
        "table1": ["algo", "T"], "export": _SMC,
    }
    helps = {
        "sample": "run a continuous-time MCMC sampler",
        "cis": "run a single continuous-time importance sampling path",
        "smc": "run continuous-time SMC on the mixture posterior",
        "variance-study": "Var(W_h) and data accesses against n",
        "table1": "sampler efficiency sweep over n",
        "export": "write figure data as CSV",
    }
    for name, extra in groups.items():
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="key = value config file")
        _add(sp, _COMMON + [e for e in extra if e not in _COMMON])
        if name == "sample":
            sp.add_argument("--out", help="also copy the skeleton JSON-lines here")
        if name == "variance-study":
            sp.add_argument("--ns", default="150,1500,15000")
            sp.add_argument("--offsets", default="0,1,3")
        if name == "table1":
            sp.add_argument("--ns", default="150,1500,15000")
            sp.add_argument("--methods", default="canonical,canonical-max,subsampling,cv")
            sp.add_argument("--T-scale", dest="T_scale", type=float, default=1.0,
                            help="multiply the per-cell desk horizons")
            sp.add_argument("--workers", type=int, default=1)
        if name == "export":
            sp.add_argument("--kind", required=True,
                            choices=["rates_curves", "variance_curves", "posterior_hist"])
            sp.add_argument("--out", required=True)
    return p


def _overrides(args, names):
    return {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}


def main(argv=None):
    args = build_parser().parse_args(argv)
    from . import harness

    names = [f.name for f in fields(ExperimentConfig)]
    try:
        cfg = load_config(args.config, _overrides(args, names))
    except (ConfigValidationError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command in ("sample", "cis", "smc"):
        out = harness.run_experiment(cfg, args.command)
        if args.command == "sample" and args.out:
            Path(args.out).write_bytes(out.paths["skeleton"].read_bytes())
        summary = out.extra.get("row") or out.extra.get("summary") or out.stats.as_dict()
        print(json.dumps({k: v for k, v in summary.items()}, default=float, sort_keys=True))
        for label, path in out.paths.items():
            print(f"{label}: {path}")
        return 0
    if args.command == "variance-study":
        ns = [int(v) for v in args.ns.split(",")]
        offsets = [float(v) for v in args.offsets.split(",")]
        out_dir = Path(cfg.output_dir) / (cfg.tag or f"variance-study-s{cfg.seed}-{cfg.stream}")
        out_dir.mkdir(parents=True, exist_ok=True)
        out = harness._exp_variance(cfg, out_dir, ns, offsets)
        for row in out.extra["rows"]:
            print(json.dumps(row, sort_keys=True))
        print(f"table: {out.paths['table']}")
        return 0
    if args.command == "table1":
        ns = [int(v) for v in args.ns.split(",")]
        methods = [m for m in args.methods.split(",") if m]
        out_dir = Path(cfg.output_dir) / (cfg.tag or f"table1-s{cfg.seed}-{cfg.stream}")
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = harness.table1_sweep(cfg, ns, methods, workers=args.workers,
                                    out_path=out_dir / "table1.csv", T_scale=args.T_scale)
        for r in rows:
            print(f"{r['method']:>14} n={r['n']:<6} t/ESS={r['t_per_ess']:.4g} "
                  f"iters/t={r['iters_per_unit_time']:.4g} iters/ESS={r['iters_per_ess']:.4g}"
                  + (f" ERROR {r['error']}" if r["error"] else ""))
        for name, (ok, detail) in harness.table1_trends(rows).items():
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        print(f"table: {out_dir / 'table1.csv'}")
        return 0
    if args.command == "export":
        rows = harness.export_figure_data(args.kind, cfg, args.out)
        print(f"wrote {len(rows)} rows to {args.out}")
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
