"""Command-line entry points: run, sweep, outage, verify."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import robust
from .algo import AlgoConfig, bcd, find_feasible_start
from .bench import (ExperimentConfig, load_config, outage_experiment,
                    run_experiment)
from .model import InvalidInputError, generate_scenario, weighted_sum_rate


def _load(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise InvalidInputError(f"config file not found: {path}")
    return load_config(path)


def _cmd_run(args) -> int:
    cfg = _load(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    records = run_experiment(cfg)
    bad = [r for r in records if r.status not in ("ok",)]
    print(f"wrote {len(records)} records to {cfg.output_dir}/results.csv "
          f"({len(bad)} degraded)")
    if args.strict and bad:
        return 2
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load(args.config)
    values = tuple(float(v) for v in args.values.split(","))
    cfg = replace(cfg, sweep_param=args.param, sweep_values=values)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    cfg.__post_init__()
    records = run_experiment(cfg)
    bad = [r for r in records if r.status != "ok"]
    print(f"swept {args.param} over {values}: {len(records)} records "
          f"({len(bad)} degraded)")
    if args.strict and bad:
        return 2
    return 0


def _cmd_outage(args) -> int:
    cfg = _load(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    targets = [float(t) for t in args.targets.split(",")]
    rows = outage_experiment(cfg, targets, n_error_samples=args.samples)
    print(f"wrote {len(rows)} outage cells to {cfg.output_dir}/outage.csv")
    return 0


def _cmd_verify(args) -> int:
    """Run the invariant battery on a single seed of the configured scenario."""
    cfg = _load(args.config)
    seed = cfg.seeds[0]
    s = generate_scenario(cfg.scenario, seed)
    checks = []

    start = find_feasible_start(s, seed, cfg.algo)
    ok_start = all(not robust.verify_robust_leakage(s, start, i, 300, seed)["violated"]
                   for i in range(s.params.i_pu))
    checks.append(("feasible start respects leakage", ok_start))

    out = bcd(s, start, cfg.algo)
    tr = out["trace"]
    fo = tr.outer_objectives()
    checks.append(("bcd status ok", out["status"] == "ok"))
    checks.append(("outer objective non-decreasing", bool(np.all(np.diff(fo) >= -1e-6))))
    wp = tr.stage_objectives("wp")
    checks.append(("inner surrogate non-increasing",
                   bool(np.all(np.diff(wp) <= 1e-6)) if wp.size else True))
    checks.append(("converged within outer budget",
                   out["outer_iters"] <= cfg.algo.max_outer_iters))
    rank_max = max((r.rank_ratio_max for r in tr.rows), default=0.0)
    checks.append(("rank-one beamformers", rank_max <= cfg.algo.rank_tol))
    alloc = out["alloc"]
    checks.append(("C1 transmit power", float(np.sum(np.abs(alloc.w) ** 2))
                   <= s.params.p_max_dl * (1 + 1e-9)))
    checks.append(("C2 UL powers", bool(np.all(alloc.p <= s.params.p_max_ul + 1e-12)
                                        and np.all(alloc.p >= 0))))
    robust_ok = all(not robust.verify_robust_leakage(s, alloc, i, 2000, seed + i)["violated"]
                    for i in range(s.params.i_pu))
    checks.append(("robust leakage certificate", robust_ok))
    checks.append(("final rate above start", out["sum_rate"] >=
                   weighted_sum_rate(s, start) - 1e-9))

    failed = 0
    for name, ok in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        failed += not ok
    return 0 if failed == 0 else 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdcr", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="")
    p_run.add_argument("--strict", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep one scenario parameter")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated list")
    p_sweep.add_argument("--out", default="")
    p_sweep.add_argument("--strict", action="store_true")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_out = sub.add_parser("outage", help="outage probability versus target tolerance")
    p_out.add_argument("--config", required=True)
    p_out.add_argument("--targets", required=True, help="comma-separated dBm list")
    p_out.add_argument("--samples", type=int, default=1000)
    p_out.add_argument("--out", default="")
    p_out.set_defaults(func=_cmd_outage)

    p_ver = sub.add_parser("verify", help="run the invariant suite on one seed")
    p_ver.add_argument("--config", required=True)
    p_ver.set_defaults(func=_cmd_verify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except InvalidInputError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
