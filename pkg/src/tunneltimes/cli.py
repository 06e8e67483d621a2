"""Command-line entry point: ``tunneltimes <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import harness
from .flux_times import report_to_dict
from .harness import ResultBundle, SweepConfig, point_row


def _config(args) -> SweepConfig:
    cfg = SweepConfig.load(args.config) if args.config else SweepConfig()
    over = {}
    if args.out is not None:
        over["out"] = args.out
    if args.seed is not None:
        over["seed"] = args.seed
    if args.dt_scale is not None:
        over["dt_scale"] = args.dt_scale
    return cfg.replace(**over) if over else cfg


def _cmd_run(cfg: SweepConfig, args) -> int:
    t0 = time.perf_counter()
    res = harness.run_point(cfg)
    bundle = ResultBundle("run", cfg, [res], [point_row(res)])
    bundle.runtime_s = time.perf_counter() - t0
    path = bundle.write()
    if res.orr is not None:
        (path.parent / "or_report.json").write_text(
            json.dumps(report_to_dict(res.orr), indent=2) + "\n")
    print(bundle.csv_text(), end="")
    return 1 if res.error else 0


def _cmd_sweep_width(cfg, args) -> int:
    return _emit(harness.sweep_width(cfg, threads=args.threads))


def _cmd_sweep_energy(cfg, args) -> int:
    return _emit(harness.sweep_energy(cfg, threads=args.threads))


def _cmd_fig1(cfg, args) -> int:
    return _emit(harness.fig1_demo(cfg, threads=args.threads))


def _cmd_feasibility(cfg, args) -> int:
    return _emit(harness.feasibility(cfg, threads=args.threads))


def _emit(bundle: ResultBundle) -> int:
    path = bundle.write()
    print(f"wrote {path} ({len(bundle.rows)} rows, {bundle.runtime_s:.1f} s)")
    failed = [r for r in bundle.rows if "error" in r.get("flags", "")]
    return 1 if failed else 0


def _cmd_verify(cfg, args) -> int:
    checks = harness.verify(cfg)
    for c in checks:
        print(c.line())
    bad = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(bad)}/{len(checks)} checks passed")
    return 1 if bad else 0


COMMANDS = {
    "run": (_cmd_run, "single point: flux and trajectory times"),
    "sweep-width": (_cmd_sweep_width, "barrier-width sweep at each sigma"),
    "sweep-energy": (_cmd_sweep_energy, "incident-energy sweep"),
    "fig1": (_cmd_fig1, "peak passage vs flux-averaged passage for free packets"),
    "feasibility": (_cmd_feasibility, "preparation-time ratio over the energy sweep"),
    "verify": (_cmd_verify, "identity suite; nonzero exit on any violation"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--seed", type=int, help="seed for pseudorandom sampling (u64)")
    common.add_argument("--dt-scale", type=float, dest="dt_scale",
                        help="multiply the default time step")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="tunneltimes", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
    except (ValueError, OSError) as exc:
        print(f"bad configuration: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command][0](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
