"""Command line: ``ngembed run|reference|check <config>``."""
from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path

from ..errors import ConfigError, NgEmbedError
from . import io
from .config import OUTPUT_ROOT_ENV, load, preset_names

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ngembed", description="Neural Galerkin runs with conserved quantities.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in [("run", "fit, integrate and write trajectory, metrics and manifest"),
                       ("reference", "compute or refresh the spectral reference solution"),
                       ("check", "validate the configuration only")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help=f"YAML file or preset name ({', '.join(preset_names())})")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set time.T=0.1")
        p.add_argument("--output-root", default=None,
                       help=f"prefix for relative output directories (default: ${OUTPUT_ROOT_ENV})")
    sub.add_parser("presets", help="list the bundled presets")
    return ap


def _error_report(out_dir, command, err) -> None:
    try:
        io.write_json(Path(out_dir) / "error.json", {
            "command": command, "error": type(err).__name__, "message": str(err),
            "traceback": traceback.format_exception(type(err), err, err.__traceback__),
        })
    except OSError:
        pass


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    try:
        cfg = load(args.config, args.overrides, args.output_root)
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "check":
        print(f"{cfg.name}: ok ({cfg.model.name}, variant {cfg.variant}, {cfg.integrator.n_steps} steps, "
              f"output {cfg.output_dir})")
        return 0
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "reference":
            from .pipeline import reference_solution

            cache = cfg.output_dir / "reference.npz"
            if cache.exists():
                cache.unlink()
            sol = reference_solution(cfg, cache)
            print(f"reference written to {cache} ({len(sol.times)} frames, N = {sol.N})")
            return 0
        from .pipeline import run_experiment

        summary = run_experiment(cfg)
        print(f"{cfg.name}: max E_r = {summary['max_E_r']}, max E_C = {summary['max_E_C']}, "
              f"output in {cfg.output_dir}")
        return 0
    except (NgEmbedError, ValueError, FloatingPointError, ArithmeticError) as err:
        _error_report(cfg.output_dir, args.command, err)
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
