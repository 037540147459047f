import argparse
import logging

from conf.config import derive_seed, load_config, settings
from database.checkpoint import save_checkpoint
from database.files import load_interactions, load_kg, load_names
from database.models import BasketDataset, KnowledgeGraph
from repository.corpus import attach_names, preprocess, split
from schemas import RunConfig
from services.trainer import Trainer

logger = logging.getLogger(__name__)


def load_splits(events_path: str, kg_path: str, config: RunConfig,
                names_path: str | None = None) -> tuple[tuple[BasketDataset, BasketDataset, BasketDataset],
                                                        KnowledgeGraph]:

    """
    The load_splits function reads events and KG and reproduces the preprocessing and user split
    of a run configuration, so training and evaluation see the same users in the same parts.

    :param events_path: str: Interaction TSV
    :param kg_path: str: KG TSV
    :param config: RunConfig: Seed, preprocessing rules and split ratios
    :param names_path: str | None: Optional item surface names TSV
    :return: The train, validation and test datasets, and the KG
    """
    rules = config.preprocess
    if rules.sample_seed is None:
        rules = rules.model_copy(update={"sample_seed": derive_seed(config.seed, "preprocess")})
    dataset = preprocess(load_interactions(events_path), rules)
    if names_path:
        dataset = attach_names(dataset, load_names(names_path))
    ratios = (config.train.train_ratio, config.train.val_ratio, config.train.test_ratio)
    parts = split(dataset, ratios, derive_seed(config.seed, "split"))
    return parts, load_kg(kg_path)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("train", help="preprocess, split and train; prints one JSON object per epoch")
    parser.add_argument("--events", required=True)
    parser.add_argument("--kg", required=True)
    parser.add_argument("--names")
    parser.add_argument("--config")
    parser.add_argument("--out", required=True, help="checkpoint path")
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--dump-similarity", dest="dump_similarity", help="TSV dump of the learned item similarity")
    parser.set_defaults(handler=train)


def train(args: argparse.Namespace) -> int:

    """
    The train function runs the whole training pipeline and writes the best checkpoint.

    :param args: argparse.Namespace: Parsed command-line options
    :return: Exit code 0
    """
    config = load_config(args.config)
    (train_set, val_set, _), kg = load_splits(args.events, args.kg, config, args.names)
    logger.info("split into %d train, %d validation users", len(train_set), len(val_set))
    trainer = Trainer(train_set, val_set, kg, config, workers=args.workers or settings.workers,
                      log_sink=lambda line: print(line, flush=True))
    checkpoint = trainer.train()
    save_checkpoint(checkpoint, args.out)
    logger.info("checkpoint written to %s", args.out)
    if args.dump_similarity:
        trainer.dump_similarity(args.dump_similarity)
    return 0
