import argparse
import logging

from conf.config import load_synthetic_spec
from database.files import export_dataset, write_interactions, write_kg
from repository.corpus import gen_synthetic, preprocess
from schemas import PreprocessRules

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("synth", help="write a synthetic dataset with planted co-purchase patterns")
    parser.add_argument("--spec", help="key=value synthetic spec; defaults when omitted")
    parser.add_argument("--out-events", dest="out_events", required=True)
    parser.add_argument("--out-kg", dest="out_kg", required=True)
    parser.add_argument("--out-dataset", dest="out_dataset", help="also export the preprocessed dataset")
    parser.set_defaults(handler=synth)


def synth(args: argparse.Namespace) -> int:

    """
    The synth function generates events and a KG from a spec and writes them as TSV.

    :param args: argparse.Namespace: Parsed command-line options
    :return: Exit code 0
    """
    spec = load_synthetic_spec(args.spec)
    events, kg = gen_synthetic(spec)
    write_interactions(events, args.out_events)
    write_kg(kg, args.out_kg)
    if args.out_dataset:
        rules = PreprocessRules(max_basket_size=max(spec.max_basket_size, 2), sample_seed=spec.seed)
        export_dataset(preprocess(events, rules), args.out_dataset)
    logger.info("wrote %d events to %s and %d triples to %s", len(events), args.out_events, len(kg.triples),
                args.out_kg)
    return 0
