"""Command line entry point: ``pdsgdm run|sweep|check|preset``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import OUTPUT_ROOT_ENV, ConfigError, flatten, load_config, parse_assignment, parse_toml_text
from .runner import PRESETS, preset_cells, run, sweep

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _load_grid(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from exc
    raw = parse_toml_text(text, path)
    if "cells" in raw:
        return [flatten(c) for c in raw["cells"]]
    return raw


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    result = run(cfg, args.out)
    s = result.summary
    print(
        f"{s['method']}: t={s['iterations_done']} f_bar={s['final_f_bar']:.6g} "
        f"grad_norm_sq={s['final_grad_norm_sq']:.3e} bits={s['total_bits']} -> {result.out_dir}"
    )
    if s["aborted_at"] is not None:
        print(f"aborted at t={s['aborted_at']}: {s['abort_reason']}", file=sys.stderr)
    return EXIT_FAILURE if result.status else EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    grid = _load_grid(args.grid)
    res = sweep(cfg, grid, repeats=args.repeats, out_dir=args.out, jobs=args.jobs)
    print(f"{len(res.rows)} runs -> {res.out_dir / 'aggregate.csv'}")
    return EXIT_FAILURE if res.status else EXIT_OK


def _cmd_check(args) -> int:
    cfg = load_config(args.config, args.set)
    print(cfg.to_toml(), end="")
    return EXIT_OK


def _cmd_preset(args) -> int:
    if args.name is None:
        for name, spec in PRESETS.items():
            print(f"{name:14s} {spec['description']}")
        return EXIT_OK
    base, cells = preset_cells(args.name)
    if args.set:
        base = base.with_overrides(dict(parse_assignment(s) for s in args.set))
    out = args.out or str(Path(base["output_dir"]) / args.name)
    res = sweep(base, cells, repeats=args.repeats, out_dir=out, jobs=args.jobs)
    print(f"{len(res.rows)} runs -> {res.out_dir / 'aggregate.csv'}")
    return EXIT_FAILURE if res.status else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdsgdm",
        description="Simulate periodic and compressed decentralized momentum SGD.",
        epilog=f"Default output root comes from ${OUTPUT_ROOT_ENV} (else ./runs).",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("run", help="execute one run")
    common(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run a parameter grid")
    common(p)
    p.add_argument("--grid", required=True, help="TOML file mapping keys to value lists, or [[cells]]")
    p.add_argument("--repeats", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("check", help="validate a config and print it resolved")
    common(p)
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("preset", help="list or execute a built-in experiment")
    p.add_argument("name", nargs="?", choices=sorted(PRESETS))
    common(p, config=False)
    p.add_argument("--repeats", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_preset)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
