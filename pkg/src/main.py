"""
Command-line entry point.
Superdiffusion simulation and verification toolkit: python -m src.main <subcommand> [flags].
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from src import __version__
from src.api.commands import COMMANDS, Invocation, execute, load_run_config, manifest_text
from src.config import settings
from src.exceptions import ConfigError, RegimeError, SuperflowError
from src.models.config import EXPERIMENTS
from src.services.cache import cache_service
from src.services.database import RunLedger

logger = logging.getLogger(__name__)

EXIT_USAGE = 64


def configure_logging():
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


class UsageParser(argparse.ArgumentParser):
    """argparse with usage errors raised as ConfigError instead of exiting 2."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="superflow", description="Superdiffusion simulation and verification toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run document")
    parser.add_argument("--out", default="out", help="Output directory")
    parser.add_argument("--seed", type=int, help="Master seed (u64)")
    parser.add_argument("--grid", type=int, help="Nodes on the largest truncation")
    parser.add_argument("--dt", type=float, help="PDE time step")
    parser.add_argument("--replicates", type=int)
    parser.add_argument("--n", type=int, help="Particle level")
    parser.add_argument("--horizon", type=float, help="Simulation horizon")
    parser.add_argument("--model", help="Registry model name")
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--ell", type=float)
    parser.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                        help="Extra model parameter, repeatable")
    parser.add_argument("--experiment", choices=EXPERIMENTS)
    parser.add_argument("--representation", choices=["direct", "transformed"])
    parser.add_argument("--t-grid", type=float, nargs="+", dest="t_grid")
    parser.add_argument("--analytic", action="store_true", help="Use the model's analytic ground state")
    return parser


def _parameters(args) -> Dict[str, float]:
    parameters = {name: getattr(args, name) for name in ("gamma", "beta", "alpha", "ell")
                  if getattr(args, name) is not None}
    for item in args.param:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--param expects NAME=VALUE, got '{item}'")
        try:
            parameters[name.strip()] = float(value)
        except ValueError as e:
            raise ConfigError(f"--param {name}: {value} is not a number") from e
    return parameters


def parse_invocation(argv: Optional[List[str]] = None) -> Invocation:
    args = build_parser().parse_args(argv)
    model_name = args.model
    if args.subcommand == "models" and model_name is None and args.config is None:
        model_name = "wright-fisher"
    overrides = {
        "model_name": model_name,
        "parameters": _parameters(args),
        "grid_size": args.grid,
        "dt": args.dt,
        "simulation": {"seed": args.seed, "replicates": args.replicates, "n": args.n, "horizon": args.horizon},
        "experiment": {"experiment": args.experiment, "representation": args.representation,
                       "t_grid": args.t_grid},
    }
    run = load_run_config(args.config, overrides)
    return Invocation(args.subcommand, run, Path(args.out), args.analytic)


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    if settings.cache_enabled and not cache_service.health_check():
        logger.warning("Spectral cache enabled but Redis is unreachable; eigen-solves will not be cached")
    ledger = RunLedger()
    try:
        invocation = parse_invocation(argv)
    except SuperflowError as e:
        logger.error(str(e))
        return e.exit_code

    logger.info(f"superflow {__version__}: {invocation.subcommand}")
    manifest = None
    try:
        code, manifest = execute(invocation)
    except RegimeError as e:
        logger.error(f"Refusing to run: {e}")
        code = e.exit_code
    except SuperflowError as e:
        logger.error(f"{type(e).__name__}: {e}")
        code = e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        code = 1

    experiment = invocation.run.experiment.experiment if invocation.subcommand == "verify" else None
    ledger.record(invocation.subcommand, experiment, invocation.config_hash, invocation.seed, __version__,
                  code, manifest_text(manifest) if manifest else None)
    logger.info(f"Finished with exit code {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
