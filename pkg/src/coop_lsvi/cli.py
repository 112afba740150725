"""Command-line front end: run, sweep, validate, and lower-bound subcommands.

Exit codes: 0 success, 2 configuration error, 3 run failure, 4
acceptance-check failure (a validation or report assertion did not hold).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import numpy as np

from . import mdp as mdp_mod
from .chart import run_chart_svg
from .configio import SweepSpec, config_hash, emit_config, parse_config_file
from .harness import (ConfigError, RunConfig, comm_complexity_scale,
                      metrics_csv_text, run_experiment)
from .sweep import atomic_write, run_sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3
EXIT_CHECK = 4


def _workers_default() -> int:
    env = os.environ.get("COOP_LSVI_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def cmd_run(args) -> int:
    try:
        cfg = parse_config_file(args.config)
        if isinstance(cfg, SweepSpec):
            raise ConfigError("config defines a sweep; use the 'sweep' subcommand")
        if args.seed is not None:
            cfg.master_seed = args.seed
        resolved = cfg.resolved()
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(args.out, exist_ok=True)
        record = run_experiment(resolved)
        atomic_write(os.path.join(args.out, "resolved.cfg"), emit_config(resolved))
        atomic_write(os.path.join(args.out, "metrics.csv"), metrics_csv_text(record))
        summary = {
            "config_hash": config_hash(resolved),
            "K": resolved.K,
            "M": resolved.M,
            "protocol": resolved.protocol,
            "total_regret": record.total_regret,
            "total_comm_rounds": record.total_comm,
            "total_switches": record.total_switches,
            "n_triggers": int(record.triggered.sum()),
            "epoch_starts": record.epoch_starts,
        }
        atomic_write(os.path.join(args.out, "summary.json"),
                     json.dumps(summary, sort_keys=True, indent=2) + "\n")
        if args.svg:
            atomic_write(os.path.join(args.out, "chart.svg"),
                         run_chart_svg(record.k, record.cum_regret, record.cum_comm))
    except Exception as e:
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUN
    print(f"run ok: K={resolved.K} regret={record.total_regret:.6g} "
          f"comm={record.total_comm} switches={record.total_switches}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        spec = parse_config_file(args.config)
        if not isinstance(spec, SweepSpec):
            raise ConfigError("config has no [sweep] section; use the 'run' subcommand")
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    workers = args.workers if args.workers else _workers_default()
    try:
        rows = run_sweep(spec, args.out, workers=workers)
    except Exception as e:
        print(f"sweep failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUN
    n_bad = sum(1 for r in rows if r["status"] != "ok")
    print(f"sweep ok: {len(rows)} runs, {n_bad} failed, outputs in {args.out}")
    return EXIT_RUN if n_bad == len(rows) and rows else EXIT_OK


def cmd_validate(args) -> int:
    try:
        mdp = mdp_mod.read_mdp(args.mdp_file)
    except (OSError, mdp_mod.InvalidMdpError) as e:
        print(f"file error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    checks = mdp_mod.validate_linear_mdp(mdp)
    all_ok = True
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        detail = f"  [{c.detail}]" if c.detail else ""
        print(f"{status} {c.name}: worst slack {c.worst_slack:.3e}{detail}")
        all_ok &= c.passed
    return EXIT_OK if all_ok else EXIT_CHECK


def _lower_bound_config(d, H, M, K, gap, seed, protocol) -> RunConfig:
    return RunConfig(
        mdp_kind="hard", mdp_d=d, mdp_horizon=H, mdp_gap=gap,
        M=M, K=K, protocol=protocol, master_seed=seed,
        schedule="lower_bound", init_state="epoch", eval_mode="exact",
    )


def cmd_lower_bound(args) -> int:
    d, H, M, K = args.d, args.horizon, args.M, args.K
    try:
        if d % 2 != 0 or d < 8:
            raise ConfigError(f"d must be even and >= 8, got {d}")
        if K < d * M:
            raise ConfigError(f"K must be >= d*M = {d * M}, got {K}")
        gap = args.gap if args.gap is not None else mdp_mod.default_hard_gap(d, M, K)
        seeds = list(range(args.seeds))
        configs = {
            proto: [_lower_bound_config(d, H, M, K, gap, s, proto).resolved()
                    for s in seeds]
            for proto in ("async_trigger", "no_comm")
        }
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        results = {proto: [run_experiment(c) for c in cfgs]
                   for proto, cfgs in configs.items()}
    except Exception as e:
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUN
    report = {"d": d, "H": H, "M": M, "K": K, "gap": gap, "n_seeds": len(seeds)}
    for proto, recs in results.items():
        regs = [r.total_regret for r in recs]
        comms = [r.total_comm for r in recs]
        report[proto] = {
            "mean_total_regret": float(np.mean(regs)),
            "mean_total_comm": float(np.mean(comms)),
            "per_seed_regret": regs,
            "per_seed_comm": comms,
        }
    mean_async = report["async_trigger"]["mean_total_regret"]
    mean_nc = report["no_comm"]["mean_total_regret"]
    report["regret_ratio_no_comm_over_async"] = (
        mean_nc / mean_async if mean_async != 0 else float("inf"))
    alpha = 1.0 / (M * M)
    scale = d * H * M * M * math.log(1.0 + K / d)
    report["comm_bound_scale_dHM2logK"] = scale
    report["async_comm_fitted_constant"] = (
        report["async_trigger"]["mean_total_comm"] / scale)
    report["comm_budget_full_form"] = comm_complexity_scale(d, H, M, alpha, K, 1.0)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write(os.path.join(args.out, "lower_bound_report.json"),
                     json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"hard instance d={d} H={H} M={M} K={K} gap={gap:.6g} seeds={len(seeds)}")
    print(f"  async_trigger: mean regret {mean_async:.6g}, "
          f"mean comm {report['async_trigger']['mean_total_comm']:.1f}")
    print(f"  no_comm:       mean regret {mean_nc:.6g}, mean comm "
          f"{report['no_comm']['mean_total_comm']:.1f}")
    print(f"  regret ratio no_comm/async = "
          f"{report['regret_ratio_no_comm_over_async']:.4g}")
    print(f"  async comm / (d H M^2 log(1+K/d)) = "
          f"{report['async_comm_fitted_constant']:.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coop-lsvi",
        description="Cooperative multi-agent LSVI simulator with "
                    "event-triggered server communication.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured run")
    p_run.add_argument("--config", required=True, help="config file path")
    p_run.add_argument("--out", default=".", help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override master_seed")
    p_run.add_argument("--svg", action="store_true", help="emit chart.svg")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="execute a configured sweep")
    p_sweep.add_argument("--config", required=True, help="config file with [sweep]")
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.add_argument("--workers", type=int, default=None,
                         help="worker processes (default: COOP_LSVI_WORKERS or 1)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_val = sub.add_parser("validate", help="check a serialized MDP file")
    p_val.add_argument("mdp_file", help="MDP file in the sectioned text format")
    p_val.set_defaults(func=cmd_validate)

    p_lb = sub.add_parser("lower-bound",
                          help="hard-instance trade-off report (async vs no-comm)")
    p_lb.add_argument("--d", type=int, default=8)
    p_lb.add_argument("--horizon", "--H", dest="horizon", type=int, default=3)
    p_lb.add_argument("--M", type=int, default=8)
    p_lb.add_argument("--K", type=int, required=True)
    p_lb.add_argument("--gap", type=float, default=None,
                      help="arm gap (default min(1/4, sqrt(dM/8K)))")
    p_lb.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p_lb.add_argument("--out", default=None, help="directory for the JSON report")
    p_lb.set_defaults(func=cmd_lower_bound)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
