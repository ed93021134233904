"""Command line entry point: ``sparse-smpc {offline,run,montecarlo,report}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import BASELINE, SPARSE, ExperimentConfig
from .errors import ConfigError, EmptyDomain, InfeasibleAtRuntime
from .harness import (closed_loop_cost, load_summary, monte_carlo, offline_fsps, report_text,
                      run_closed_loop, run_disturbances, summarize, write_trajectory)
from .sparse_recovery import Fsps

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_FSPS = "fsps.txt"


def _parser():
    parser = argparse.ArgumentParser(prog="sparse-smpc", description="Adaptive stochastic MPC for sparse FIR systems.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=False, runs=False):
        p.add_argument("--config", help="experiment config file (defaults to the built-in reference setup)")
        p.add_argument("--seed", type=int, help="override the seed used by this command")
        p.add_argument("--out", default=".", help="output directory")
        if mode:
            p.add_argument("--mode", choices=[SPARSE, BASELINE], help="controller variant")
        if runs:
            p.add_argument("--runs", type=int, help="number of paired Monte Carlo runs")
            p.add_argument("--workers", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("offline", help="recover the sparse parameter set and write it to a file")
    common(p)
    p.add_argument("--fsps", help=f"output file (default OUT/{DEFAULT_FSPS})")

    p = sub.add_parser("run", help="simulate one closed loop")
    common(p, mode=True)
    p.add_argument("--fsps", help=f"sparse parameter set from 'offline' (default OUT/{DEFAULT_FSPS})")
    p.add_argument("--run-index", type=int, default=0, help="which disturbance sequence to use")

    p = sub.add_parser("montecarlo", help="paired sparse/baseline batch")
    common(p, runs=True)
    p.add_argument("--fsps", help=f"sparse parameter set to use (default OUT/{DEFAULT_FSPS}, computed if absent)")

    p = sub.add_parser("report", help="re-summarize a finished batch from its CSV files")
    p.add_argument("--out", default=".", help="directory holding the batch CSV files")
    return parser


def _load_config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config) if args.config else ExperimentConfig()


def _fsps_path(args):
    return args.fsps or os.path.join(args.out, DEFAULT_FSPS)


def _cmd_offline(args):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(offline_seed=args.seed)
    fsps = offline_fsps(cfg)
    path = _fsps_path(args)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fsps.save(path)
    print(f"wrote {path} (q = {fsps.q}, radii = {', '.join(repr(float(r)) for r in fsps.radii)})")
    return EXIT_OK


def _read_fsps(path):
    if not os.path.exists(path):
        raise ConfigError(f"sparse parameter set file not found: {path} (run the 'offline' command first)")
    try:
        return Fsps.load(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read sparse parameter set file {path}: {exc}") from exc


def _cmd_run(args):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(run_seed_base=args.seed)
    mode = args.mode or cfg.mode
    fsps = _read_fsps(_fsps_path(args)) if mode == SPARSE else None
    log = run_closed_loop(cfg, run_disturbances(cfg, args.run_index), fsps, mode)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"trajectory_{mode}.csv")
    write_trajectory(log, path)
    print(f"mode = {mode}")
    print(f"cost = {closed_loop_cost(log, cfg.Q, cfg.S)!r}")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_montecarlo(args):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(run_seed_base=args.seed)
    path = _fsps_path(args)
    if args.fsps or os.path.exists(path):
        fsps = _read_fsps(path)
    else:
        fsps = offline_fsps(cfg)
        os.makedirs(args.out, exist_ok=True)
        fsps.save(path)
    summary = monte_carlo(cfg, args.runs, fsps=fsps, workers=args.workers)
    if len(summary.runs) == 0:
        for f in summary.failures:
            print(f"runtime failure: run={f.run} mode={f.mode} t={f.t}: {f.message}", file=sys.stderr)
        print("no run completed in both modes; nothing to summarize", file=sys.stderr)
        return EXIT_RUNTIME
    print(summarize(summary, args.out), end="")
    return EXIT_RUNTIME if summary.failures else EXIT_OK


def _cmd_report(args):
    try:
        summary = load_summary(args.out)
    except (OSError, KeyError) as exc:
        raise ConfigError(f"cannot read batch results from {args.out}: {exc}") from exc
    text = report_text(summary)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"offline": _cmd_offline, "run": _cmd_run, "montecarlo": _cmd_montecarlo, "report": _cmd_report}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleAtRuntime, EmptyDomain) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        text = getattr(exc, "program_text", None)
        if text and getattr(args, "out", None):
            os.makedirs(args.out, exist_ok=True)
            path = os.path.join(args.out, f"infeasible_t{exc.t}.mtx")
            with open(path, "w") as fh:
                fh.write(text)
            print(f"offending program written to {path}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
