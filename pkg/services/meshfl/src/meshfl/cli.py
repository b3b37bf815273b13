"""Command-line entry point: `meshfl run|compare|sweep|presets`."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import OUTPUT_DIR, configure_logging
from .errors import ConfigError, DataError, MeshFLError
from .harness import compare, emit_metrics, run_experiment, sweep
from .scenario import ExperimentConfig, list_presets, load_config, load_preset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshfl", description="Federated learning over a simulated wireless mesh")
    parser.add_argument("--seed", type=int, default=None, help="Override every seed field")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one scenario")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", type=Path, help="Scenario YAML file")
    source.add_argument("--preset", help="Shipped preset name")
    run.add_argument("--variant", help="Preset variant (default: first)")
    run.add_argument("--protocol", help="Override the routing protocol")
    run.add_argument("--out", type=Path, default=OUTPUT_DIR)
    run.add_argument("--trace", action="store_true", help="Dump per-packet hops as JSON lines")

    cmp_ = sub.add_parser("compare", help="Run scenarios that differ only in routing and compare them")
    cmp_.add_argument("--configs", type=Path, nargs="+", required=True)
    cmp_.add_argument("--target-loss", type=float, required=True)
    cmp_.add_argument("--out", type=Path, default=None)

    sw = sub.add_parser("sweep", help="Run every variant, protocol and replicate of a preset")
    sw.add_argument("--preset", required=True)
    sw.add_argument("--replicates", type=int, default=1)
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--target-loss", type=float, default=None)
    sw.add_argument("--out", type=Path, default=None)

    sub.add_parser("presets", help="List shipped presets")
    return parser


def _seeded(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    return cfg.with_seed(seed) if seed is not None else cfg


def _cmd_run(args: argparse.Namespace) -> None:
    if args.config is not None:
        cfg = load_config(args.config)
        if args.protocol:
            cfg = cfg.with_protocol(args.protocol)
    else:
        cfg = load_preset(args.preset).config(args.variant, args.protocol)
    cfg = _seeded(cfg, args.seed)
    stem = f"{cfg.name}_{cfg.protocol}"
    trace = args.out / f"{stem}_trace.jsonl" if args.trace else None
    if trace is not None:
        cfg = replace(cfg, network=replace(cfg.network, trace=True))
    log = run_experiment(cfg, trace_path=trace)
    path = emit_metrics(log, args.out / f"{stem}.csv")
    summary = log.summary()
    print(f"{cfg.name} [{cfg.protocol}]: {summary['rounds']} rounds, loss {summary['final_loss']:.4f}, "
          f"{summary['total_minutes']:.2f} simulated minutes")
    print(f"metrics written to {path}")


def _cmd_compare(args: argparse.Namespace) -> None:
    logs = {}
    for path in args.configs:
        cfg = _seeded(load_config(path), args.seed)
        key = cfg.protocol if cfg.protocol not in logs else f"{cfg.protocol}:{cfg.name}"
        logs[key] = run_experiment(cfg)
        if args.out is not None:
            emit_metrics(logs[key], args.out / f"{cfg.name}_{cfg.protocol}.csv")
    report = compare(logs, args.target_loss)
    frame = report.as_frame()
    print(frame.to_string(index=False))
    print(f"iteration curves equal: {report.curves_equal}")
    if args.out is not None:
        frame.to_csv(args.out / "comparison.csv", index=False)


def _cmd_sweep(args: argparse.Namespace) -> None:
    out = args.out or OUTPUT_DIR / args.preset
    summary = sweep(
        args.preset, args.replicates, out, jobs=args.jobs, seed=args.seed, target_loss=args.target_loss
    )
    print(summary.to_string(index=False))
    print(f"summary written to {out / 'summary.csv'}")


def _cmd_presets(args: argparse.Namespace) -> None:
    for name in list_presets():
        preset = load_preset(name)
        print(f"{name}: {preset.description}")
        print(f"    variants: {', '.join(preset.variant_names)}")
        print(f"    protocols: {', '.join(preset.protocols)}")


COMMANDS = {"run": _cmd_run, "compare": _cmd_compare, "sweep": _cmd_sweep, "presets": _cmd_presets}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MeshFLError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
