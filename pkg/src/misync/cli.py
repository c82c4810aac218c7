"""Command-line entry point.

Exit codes: 0 on success, 2 on configuration errors, 3 on numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from .config import evaluate, load_config
from .errors import ConfigError, NumericalError
from .runner import analyze, run_scenario, sweep_sync_time

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def preset_paths() -> dict:
    """Preset name to file path for every shipped scenario."""
    root = resources.files("misync") / "presets"
    return {p.name[: -len(".yaml")]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml")}


def resolve_config(name_or_path: str):
    """Load a config from a file path or a preset name."""
    path = Path(name_or_path)
    if path.exists():
        return load_config(path)
    presets = preset_paths()
    if name_or_path in presets:
        return load_config(presets[name_or_path])
    raise ConfigError(f"no config file or preset named {name_or_path!r}")


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, default=str))


def _cmd_run(args) -> int:
    cfg = resolve_config(args.config)
    if args.size is not None:
        cfg = cfg.with_updates({"ensemble": {"size": args.size}})
    if args.seed is not None:
        cfg = cfg.with_updates({"integrator": {"seed": args.seed}})
    result = run_scenario(cfg, output_dir=args.output, workers=args.workers)
    print(f"wrote {result.output_dir}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    report = analyze(args.n, args.site, gamma=args.gamma, J=args.J, h=args.h)
    if args.output:
        Path(args.output).write_text(json.dumps(report, indent=2) + "\n")
    _print_json(report)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = resolve_config(args.config)
    if args.gammas:
        gammas = [evaluate(g) for g in args.gammas.split(",")]
    else:
        gammas = [evaluate(g) for g in cfg.sweep.get("gammas", [])]
    if not gammas:
        raise ConfigError("no gamma grid: pass --gammas or set sweep.gammas in the config")
    result = sweep_sync_time(cfg, gammas, output_dir=args.output, workers=args.workers, size=args.size)
    for row in result.summary["sync_time"]:
        print(f"gamma={row['gamma']:g} mean={row['mean']:.4g} var={row['variance']:.4g} "
              f"n={row['count']}/{row['total']} undecided={row['undecided']}")
    print(f"wrote {result.output_dir}")
    return EXIT_OK


def _cmd_presets(args) -> int:
    for name, path in sorted(preset_paths().items()):
        cfg = load_config(path)
        print(f"{name:22s} {' '.join(cfg['description'].split())}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misync", description="Measurement-induced synchronisation of spin chains.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario config or preset")
    run.add_argument("config", help="YAML file or preset name")
    run.add_argument("--output", help="output directory (overrides config and environment)")
    run.add_argument("--workers", type=int, help="worker processes")
    run.add_argument("--size", type=int, help="override the ensemble size")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.set_defaults(func=_cmd_run)

    an = sub.add_parser("analyze", help="report the decoherence-free subspaces of a chain")
    an.add_argument("--n", type=int, required=True, help="number of sites")
    an.add_argument("--site", type=int, required=True, help="measured site (1-based)")
    an.add_argument("--gamma", type=float, default=1.0, help="measurement strength Gamma/J")
    an.add_argument("--J", type=float, default=1.0)
    an.add_argument("--h", type=float, default=1.0)
    an.add_argument("--output", help="also write the report to this JSON file")
    an.set_defaults(func=_cmd_analyze)

    sw = sub.add_parser("sweep-sync-time", help="hitting-time statistics over a gamma grid")
    sw.add_argument("config", help="YAML file or preset name")
    sw.add_argument("--gammas", help="comma-separated gamma values")
    sw.add_argument("--output", help="output directory")
    sw.add_argument("--workers", type=int)
    sw.add_argument("--size", type=int, help="trajectories per gamma")
    sw.set_defaults(func=_cmd_sweep)

    pr = sub.add_parser("presets", help="preset scenarios")
    pr_sub = pr.add_subparsers(dest="action", required=True)
    pr_sub.add_parser("list", help="list shipped presets").set_defaults(func=_cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
