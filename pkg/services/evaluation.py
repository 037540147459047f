import logging
import math
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from database.checkpoint import Checkpoint
from database.models import BasketDataset, KnowledgeGraph
from repository.corpus import frequency_vector
from schemas import MetricsReport, MetricValues
from services.head import recommend_topn
from services.recommender import Predictor

logger = logging.getLogger(__name__)

DEFAULT_KS = (5, 10)


def _hits(ranked: Sequence[int], truth: Iterable[int], k: int) -> tuple[int, set[int]]:
    truth = set(truth)
    if not truth:
        raise ValueError("the truth basket is empty")
    if not 1 <= k <= len(ranked):
        raise ValueError(f"k={k} outside [1, {len(ranked)}]")
    return len(set(ranked[:k]) & truth), truth


def f1_at_k(ranked: Sequence[int], truth: Iterable[int], k: int) -> float:
    hits, truth = _hits(ranked, truth, k)
    if hits == 0:
        return 0.0
    precision, recall = hits / k, hits / len(truth)
    return 2.0 * precision * recall / (precision + recall)


def hr_at_k(ranked: Sequence[int], truth: Iterable[int], k: int, mode: str = "recall") -> float:
    """Fraction of truth items in the top k; "any-hit" mode gives 1 when at least one is there."""
    hits, truth = _hits(ranked, truth, k)
    if mode == "any-hit":
        return 1.0 if hits else 0.0
    if mode != "recall":
        raise ValueError(f"unknown hit-rate mode {mode!r}")
    return hits / len(truth)


def ndcg_at_k(ranked: Sequence[int], truth: Iterable[int], k: int) -> float:
    _, truth = _hits(ranked, truth, k)
    dcg = sum(1.0 / math.log2(j + 2) for j, item in enumerate(ranked[:k]) if item in truth)
    ideal = sum(1.0 / math.log2(j + 2) for j in range(min(k, len(truth))))
    return dcg / ideal


def frequency_baseline(history: Sequence[frozenset[int]], catalog_size: int, n: int,
                       popularity: np.ndarray | None = None) -> list[int]:

    """
    The frequency_baseline function recommends the user's most frequent past items;
    global popularity orders the remaining slots, then item index.

    :param history: Sequence[frozenset[int]]: Past baskets
    :param catalog_size: int: Number of catalog items
    :param n: int: How many items to return
    :param popularity: np.ndarray | None: Training item counts
    :return: n item indices in ranking order
    """
    scores = frequency_vector(history, catalog_size)
    if popularity is not None and popularity.max() > 0:
        scores = scores + 1e-6 * popularity / popularity.max()
    return recommend_topn(scores, n)


def _average(rows: list[MetricValues]) -> MetricValues:
    if not rows:
        return MetricValues(f1=0.0, hr=0.0, ndcg=0.0)
    return MetricValues(f1=float(np.mean([r.f1 for r in rows])), hr=float(np.mean([r.hr for r in rows])),
                        ndcg=float(np.mean([r.ndcg for r in rows])))


def _measure(ranked: list[int], truth: frozenset[int], k: int, hr_mode: str) -> MetricValues:
    return MetricValues(f1=f1_at_k(ranked, truth, k), hr=hr_at_k(ranked, truth, k, hr_mode),
                        ndcg=ndcg_at_k(ranked, truth, k))


def evaluate_rankings(split: BasketDataset, rank: Callable[[list[frozenset[int]], int], list[int]],
                      ks: Sequence[int] = DEFAULT_KS, hr_mode: str = "recall",
                      keep: Callable[[list[frozenset[int]]], bool] | None = None,
                      workers: int = 1) -> tuple[dict[int, MetricValues], int, int]:

    """
    The evaluate_rankings function scores a ranking function on every user of a split:
    the last basket is the truth, the rest is the history. Users with a single basket are skipped.

    :param split: BasketDataset: Users to evaluate
    :param rank: Callable: (history, k) -> ranked item indices
    :param ks: Sequence[int]: Cut-offs
    :param hr_mode: str: "recall" or "any-hit"
    :param keep: Callable | None: Filter on the history (e.g. cold users only)
    :param workers: int: Threads used for ranking
    :return: Mean metrics per k, number of evaluated users, number of skipped users
    """
    users, skipped = [], 0
    for user_id in sorted(split.users):
        baskets = split.baskets(user_id)
        if len(baskets) < 2:
            skipped += 1
            continue
        if keep is not None and not keep(baskets[:-1]):
            continue
        users.append(baskets)

    def run(baskets: list[frozenset[int]]) -> dict[int, MetricValues]:
        return {k: _measure(rank(baskets[:-1], k), baskets[-1], k, hr_mode) for k in ks}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_user = list(pool.map(run, users))
    else:
        per_user = [run(baskets) for baskets in users]
    metrics = {k: _average([row[k] for row in per_user]) for k in ks}
    return metrics, len(users), skipped


def evaluate_split(checkpoint: Checkpoint, split: BasketDataset, kg: KnowledgeGraph,
                   ks: Sequence[int] = DEFAULT_KS, template_id: int | None = None, hr_mode: str = "recall",
                   cold_only: bool = False, baseline: bool = False, workers: int = 1) -> MetricsReport:

    """
    The evaluate_split function computes F1, HR and NDCG at every k for the model in a checkpoint.
    The MUP of each user carries k mask tokens when ranking for cut-off k.

    :param checkpoint: Checkpoint: The trained model
    :param split: BasketDataset: Users to evaluate, indexed by the checkpoint catalog
    :param kg: KnowledgeGraph: The item knowledge graph
    :param ks: Sequence[int]: Cut-offs
    :param template_id: int | None: MUP template override
    :param hr_mode: str: "recall" or "any-hit"
    :param cold_only: bool: Keep only users whose history has no item seen in training
    :param baseline: bool: Also report the frequency baseline on the same users
    :param workers: int: Threads used for scoring
    :return: A MetricsReport
    """
    if not split.users:
        raise ValueError("cannot evaluate an empty split")
    if tuple(split.catalog) != tuple(checkpoint.catalog):
        raise ValueError("split catalog differs from the checkpoint catalog; reindex it first")
    predictor = Predictor(checkpoint, kg)
    popularity = predictor.item_frequency

    def model_rank(history: list[frozenset[int]], k: int) -> list[int]:
        return recommend_topn(predictor.scores(history, k, template_id), k)

    def is_cold(history: list[frozenset[int]]) -> bool:
        return all(popularity[i] == 0 for basket in history for i in basket)

    keep = is_cold if cold_only else None
    metrics, n_users, skipped = evaluate_rankings(split, model_rank, ks, hr_mode, keep, workers)
    reference = None
    if baseline:
        n = len(checkpoint.catalog)
        reference, _, _ = evaluate_rankings(
            split, lambda history, k: frequency_baseline(history, n, k, popularity), ks, hr_mode, keep)
    logger.info("evaluated %d users (%d skipped) at k=%s", n_users, skipped, list(ks))
    return MetricsReport(metrics=metrics, n_users=n_users, n_skipped=skipped, baseline=reference,
                         config={"ks": list(ks), "hr_mode": hr_mode, "cold_only": cold_only,
                                 "template_id": checkpoint.config.knowledge.template_id
                                 if template_id is None else template_id,
                                 "ablate": checkpoint.config.ablate.model_dump()})
