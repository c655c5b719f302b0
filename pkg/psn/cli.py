"""``psn`` command line: one sub-command module per command under :mod:`psn.commands`.

Exit codes: 0 success, 1 verification failure, 2 usage or contract error, 3 numeric divergence.
"""
import argparse
import logging
from typing import List, Optional

from pydantic import ValidationError

from psn import __version__
from psn.commands import COMMANDS
from psn.errors import ContractError, DimensionError, DivergenceError, IdxFormatError, VerificationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psn", description="Parallel spiking neuron toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except VerificationError as exc:
        logger.error(str(exc))
        return EXIT_VERIFICATION
    except DivergenceError as exc:
        logger.error(f"Numeric divergence: {exc}")
        return EXIT_DIVERGENCE
    except (ContractError, DimensionError, IdxFormatError, ValidationError, FileNotFoundError) as exc:
        logger.error(f"{args.command}: {exc}")
        return EXIT_USAGE
