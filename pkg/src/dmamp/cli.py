"""Command line: ``dmamp run | report | lambda-check``.

Exit status is 1 when a checked invariant fails (cross-variant agreement,
moment upper bound) and 2 on configuration errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

import numpy as np

from .harness import (ConfigError, ExperimentConfig, agreement_report, agreement_tolerance,
                      approx_vs_exact_lambda_report, group_results, mean_curves, read_results_csv,
                      run_experiment, to_db)

_FLAGS = [f.name for f in dataclasses.fields(ExperimentConfig) if f.name != "topology_params"]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    for name in _FLAGS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="VALUE")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any config key, e.g. topology.diameter=3")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    pairs = [(n, getattr(args, f"cfg_{n}")) for n in _FLAGS if getattr(args, f"cfg_{n}") is not None]
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append(tuple(item.split("=", 1)))
    return ExperimentConfig.from_pairs(pairs, cfg).validate()


def _check_agreement(results, cfg) -> int:
    bad = 0
    for a in agreement_report(results):
        tol = agreement_tolerance(a.variant, a.reference, cfg)
        flag = ""
        if tol is not None and not a.max_rel_dev <= tol:
            flag = f"  VIOLATION (> {tol:g})"
            bad += 1
        print(f"seed {a.seed}: {a.variant} vs {a.reference}: max rel dev {a.max_rel_dev:.3e}{flag}")
    return bad


def _summary(results) -> None:
    for v, curve in mean_curves(results).items():
        db = to_db(curve)
        print(f"{v:12s} final {db[-1]:8.3f} dB over {len({r.seed for r in results if r.variant == v})} seeds")


def cmd_run(args) -> int:
    cfg = _config(args)
    results = run_experiment(cfg)
    _summary(results)
    if cfg.output:
        print(f"wrote {cfg.output}")
    return 1 if _check_agreement(results, cfg) else 0


def cmd_report(args) -> int:
    results = group_results(read_results_csv(args.csv))
    _summary(results)
    cfg = ExperimentConfig.from_file(args.csv + ".config") if args.with_config else None
    return 1 if _check_agreement(results, cfg) else 0


def cmd_lambda_check(args) -> int:
    cfg = _config(args)
    rep = approx_vs_exact_lambda_report(cfg)
    print(f"kappa={cfg.kappa:g} seeds={len(cfg.seeds)} T={cfg.T}")
    print("iter exact_db approx_db gap_db")
    for t, (a, b) in enumerate(zip(rep.exact_db, rep.approx_db), 1):
        print(f"{t} {a:.4f} {b:.4f} {abs(b - a):.4f}")
    print(f"final gap {rep.final_gap_db:.4f} dB (seed-averaged); per-seed max {np.max(rep.per_seed_final_gap_db):.4f} dB")
    if not rep.upper_bound_ok:
        print("VIOLATION: estimated lambda_max below the dense value")
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmamp", description="Distributed memory AMP experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every configured variant and seed")
    _add_config_flags(r)
    r.set_defaults(func=cmd_run)
    rep = sub.add_parser("report", help="summarize a results CSV")
    rep.add_argument("csv")
    rep.add_argument("--with-config", action="store_true",
                     help="read <csv>.config to decide which FD runs must match exactly")
    rep.set_defaults(func=cmd_report)
    lc = sub.add_parser("lambda-check", help="D-MAMP with exact vs probe-estimated moments")
    _add_config_flags(lc)
    lc.set_defaults(func=cmd_lambda_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
