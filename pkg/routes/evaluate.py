import argparse
import logging
from pathlib import Path

from conf.config import settings
from database.checkpoint import load_checkpoint
from errors import DataError, UsageError
from repository.corpus import reindex
from routes.train import load_splits
from services.evaluation import DEFAULT_KS, evaluate_split

logger = logging.getLogger(__name__)


def parse_ks(text: str) -> list[int]:
    try:
        ks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"--k expects positive integers, got {text!r}")
    return sorted(set(ks))


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("evaluate", help="F1, HR and NDCG at k on the held-out users")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--events", required=True)
    parser.add_argument("--kg", required=True)
    parser.add_argument("--k", default=",".join(str(k) for k in DEFAULT_KS))
    parser.add_argument("--report", help="also write the JSON report here")
    parser.add_argument("--split", choices=("test", "val"), default="test")
    parser.add_argument("--template", type=int, default=None, help="MUP template override")
    parser.add_argument("--hr-mode", dest="hr_mode", choices=("recall", "any-hit"), default="recall")
    parser.add_argument("--cold-only", dest="cold_only", action="store_true")
    parser.add_argument("--baseline", action="store_true", help="also report the frequency baseline")
    parser.add_argument("--workers", type=int, default=None)
    parser.set_defaults(handler=evaluate)


def evaluate(args: argparse.Namespace) -> int:

    """
    The evaluate function rebuilds the run's split from the checkpoint config and prints a MetricsReport as JSON.

    :param args: argparse.Namespace: Parsed command-line options
    :return: Exit code 0
    """
    ks = parse_ks(args.k)
    checkpoint = load_checkpoint(args.ckpt)
    if args.template is not None and args.template not in checkpoint.templates:
        raise UsageError(f"--template {args.template} is not stored in the checkpoint")
    (_, val_set, test_set), kg = load_splits(args.events, args.kg, checkpoint.config)
    chosen = reindex(val_set if args.split == "val" else test_set, checkpoint.catalog)
    report = evaluate_split(checkpoint, chosen, kg, ks, template_id=args.template, hr_mode=args.hr_mode,
                            cold_only=args.cold_only, baseline=args.baseline,
                            workers=args.workers or settings.workers)
    text = report.model_dump_json()
    print(text)
    if args.report:
        try:
            Path(args.report).write_text(text + "\n", encoding="utf-8")
        except OSError as err:
            raise DataError(f"cannot write report to {args.report}: {err.strerror}") from None
    return 0
