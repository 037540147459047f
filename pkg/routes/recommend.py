import argparse
import logging

from conf.config import derive_seed
from database.checkpoint import load_checkpoint
from database.files import load_interactions, load_kg
from errors import DataError, UsageError
from repository.corpus import preprocess, reindex
from services.head import recommend_topn
from services.recommender import Predictor

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("recommend", help="top-n next-basket items for one user")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--user", required=True)
    parser.add_argument("--events", required=True)
    parser.add_argument("--kg", required=True)
    parser.add_argument("--n", type=int, default=5)
    parser.add_argument("--template", type=int, default=None)
    parser.set_defaults(handler=recommend)


def recommend(args: argparse.Namespace) -> int:

    """
    The recommend function predicts the next basket of one user from the whole recorded history
    and prints rank<TAB>item_id<TAB>score lines.

    :param args: argparse.Namespace: Parsed command-line options
    :return: Exit code 0
    """
    checkpoint = load_checkpoint(args.ckpt)
    if not 1 <= args.n <= len(checkpoint.catalog):
        raise UsageError(f"--n must be in [1, {len(checkpoint.catalog)}]")
    user_events = [event for event in load_interactions(args.events) if event.user_id == args.user]
    if not user_events:
        raise DataError(f"{args.events}: no events for user {args.user!r}")
    config = checkpoint.config
    rules = config.preprocess
    if rules.sample_seed is None:
        rules = rules.model_copy(update={"sample_seed": derive_seed(config.seed, "preprocess")})
    dataset = reindex(preprocess(user_events, rules), checkpoint.catalog)
    history = dataset.baskets(args.user)
    if not history:
        raise DataError(f"user {args.user!r} has no basket over the trained catalog")
    predictor = Predictor(checkpoint, load_kg(args.kg))
    scores = predictor.scores(history, args.n, args.template)
    for rank, item in enumerate(recommend_topn(scores, args.n), start=1):
        print(f"{rank}\t{checkpoint.catalog[item]}\t{float(scores[item]):.6f}")
    return 0
