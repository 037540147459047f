import argparse
import logging
import sys
from collections.abc import Sequence

from pydantic import ValidationError

from conf.config import settings
from errors import NextBasketError
from routes import evaluate, recommend, synth, train
from services.tensor import set_default_dtype

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nextbasket", description="Knowledge-prompted next-basket recommendation")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for route in (synth, train, evaluate, recommend):
        route.register(subparsers)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def run_cli(argv: Sequence[str] | None = None) -> int:

    """
    The run_cli function parses the command line, runs the chosen sub-command and maps failures to exit codes:
    1 for usage and configuration errors, 2 for data errors, 3 for runtime errors.

    :param argv: Sequence[str] | None: Arguments without the program name; sys.argv when None
    :return: The process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return 0 if exit_.code in (0, None) else 1
    configure_logging(settings.log_level)
    set_default_dtype(settings.default_dtype)
    try:
        return args.handler(args)
    except NextBasketError as err:
        print(f"error: {err.detail}", file=sys.stderr)
        return err.exit_code
    except ValidationError as err:
        print(f"error: invalid data: {err.errors()[0]['msg']}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err.filename or 'file'}: {err.strerror}", file=sys.stderr)
        return 2
    except RuntimeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(run_cli())
