"""
app/main.py - Command-Line Entry Point

    anvil <data-gen|cfd|optimize> --config <path> [--stl <path>] [--out <dir>]

The subcommand must match the config's mode; running the wrong experiment by
accident is a config error.

Exit codes:
    0  success
    1  fatal config or IO error (and any other domain error)
    2  every evaluation failed, or auto-meshing gave up

Logs go to stderr (loguru); stage timing lines carry "stage=<name>".
"""

import argparse
import sys
from pathlib import Path

from loguru import logger

from app.core.config import TOOL_VERSION
from app.core.errors import (
    AllEvaluationsFailedError,
    AnvilError,
    AutoMeshExhaustedError,
    ConfigError,
    IoFailureError,
)
from app.core.logging import configure_logging
from app.core.run_config import Mode, RunConfig, parse_config
from app.modes.cfd import run_cfd
from app.modes.data_generation import run_data_generation
from app.modes.optimize import run_optimize

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_EVALUATION_FAILED = 2

COMMANDS = {
    "data-gen": Mode.DATA_GENERATION,
    "cfd": Mode.CFD,
    "optimize": Mode.OPTIMIZE,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anvil", description="Parametric shape optimization for drag")
    parser.add_argument("--version", action="version", version=f"anvil {TOOL_VERSION}")
    parser.add_argument("--log-level", default=None, help="loguru level (default: ANVIL_LOG_LEVEL or INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("data-gen", "sample the design space and build a drag dataset"),
        ("cfd", "evaluate a single design"),
        ("optimize", "minimize drag with Bayesian optimization"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, type=Path, help="JSON run configuration")
        sub.add_argument("--out", type=Path, default=None, help="output directory (default: config output_dir)")
        if name == "cfd":
            sub.add_argument("--stl", type=Path, default=None, help="evaluate this STL instead of the seed design")
            sub.add_argument(
                "--param",
                action="append",
                default=[],
                metavar="NAME=VALUE",
                help="parameter value in mm (repeatable)",
            )
    return parser


def load_config(path: Path) -> RunConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailureError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def parse_assignments(items: list[str]) -> dict[str, float]:
    """["a=1.5", "b=2"] -> {"a": 1.5, "b": 2.0}"""
    assignment: dict[str, float] = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise ConfigError(f"--param expects NAME=VALUE, got {item!r}")
        try:
            assignment[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"--param {name}: {value!r} is not a number") from None
    return assignment


def run(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    expected = COMMANDS[args.command]
    if config.mode != expected:
        raise ConfigError(f"command '{args.command}' needs mode={expected.value}, config has mode={config.mode.value}")

    match config.mode:
        case Mode.DATA_GENERATION:
            run_data_generation(config, args.out)
        case Mode.CFD:
            report = run_cfd(config, args.out, stl_path=args.stl, params=parse_assignments(args.param))
            logger.info(f"drag={report.drag_force:.6e}N Cd={report.drag_coefficient:.4f} Re={report.reynolds:.4g}")
        case Mode.OPTIMIZE:
            history = run_optimize(config, args.out)
            best = history.incumbent
            if best is not None:
                logger.info(f"best drag={best.drag:.6e}N at evaluation {best.iteration}: {best.params}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    try:
        run(args)
    except (AllEvaluationsFailedError, AutoMeshExhaustedError) as e:
        logger.error(f"{e.code}: {e}")
        return EXIT_EVALUATION_FAILED
    except AnvilError as e:
        logger.error(f"{e.code}: {e}")
        return EXIT_FATAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
