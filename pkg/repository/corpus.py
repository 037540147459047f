import logging
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

from database.models import Basket, BasketDataset, KnowledgeGraph, Triplet
from errors import EmptyDatasetError
from schemas import InteractionEvent, PreprocessRules, SyntheticSpec

logger = logging.getLogger(__name__)

ATTRIBUTE_RELATIONS = ("function_is", "level_is", "gender_is", "origin_is", "form_is")


def preprocess(events: Sequence[InteractionEvent], rules: PreprocessRules) -> BasketDataset:

    """
    The preprocess function groups events into baskets by (user, timestamp) and applies the dataset rules:
    undersized baskets are dropped, oversized ones are downsampled with a seeded sampler,
    short sequences are dropped and long ones keep their most recent baskets.

    :param events: Sequence[InteractionEvent]: Raw interaction events
    :param rules: PreprocessRules: Size bounds and sampling seed
    :return: A BasketDataset whose catalog holds the surviving item ids in sorted order
    """
    if not events:
        raise EmptyDatasetError("no interaction events to preprocess")
    seed = rules.sample_seed if rules.sample_seed is not None else 0
    rules = rules.model_copy(update={"sample_seed": seed})
    rng = np.random.default_rng(seed)

    grouped: dict[str, dict[int, set[str]]] = defaultdict(lambda: defaultdict(set))
    for event in events:
        grouped[event.user_id][event.timestamp].add(event.item_id)

    kept: dict[str, list[tuple[int, list[str]]]] = {}
    for user_id in sorted(grouped):
        baskets = []
        for timestamp in sorted(grouped[user_id]):
            items = sorted(grouped[user_id][timestamp])
            if len(items) < rules.min_basket_size:
                continue
            if len(items) > rules.max_basket_size:
                chosen = rng.choice(len(items), size=rules.max_basket_size, replace=False)
                items = sorted(items[i] for i in chosen)
            baskets.append((timestamp, items))
        if len(baskets) < rules.min_seq_len:
            continue
        kept[user_id] = baskets[-rules.max_seq_len:]

    if not kept:
        raise EmptyDatasetError("every user was filtered out by the preprocessing rules")
    catalog = tuple(sorted({item for baskets in kept.values() for _, items in baskets for item in items}))
    index = {item: i for i, item in enumerate(catalog)}
    sequences = {user_id: tuple(Basket(timestamp=ts, items=frozenset(index[item] for item in items))
                                for ts, items in baskets)
                 for user_id, baskets in kept.items()}
    logger.info("preprocessed %d events into %d users over %d items", len(events), len(sequences), len(catalog))
    return BasketDataset(catalog=catalog, sequences=sequences, rules=rules)


def dataset_events(dataset: BasketDataset) -> list[InteractionEvent]:
    """Flatten a dataset back into events (inverse of the grouping step of preprocess)."""
    return [InteractionEvent(user_id=user_id, timestamp=basket.timestamp, item_id=dataset.catalog[i])
            for user_id, baskets in dataset.sequences.items()
            for basket in baskets
            for i in sorted(basket.items)]


def attach_names(dataset: BasketDataset, names: Mapping[str, str]) -> BasketDataset:
    index = {item: i for i, item in enumerate(dataset.catalog)}
    resolved = {index[item]: name for item, name in names.items() if item in index}
    return dataset.model_copy(update={"names": resolved})


def reindex(dataset: BasketDataset, catalog: Sequence[str]) -> BasketDataset:

    """
    The reindex function maps a dataset onto another catalog (e.g. the one stored in a checkpoint).
    Items missing from the target catalog are dropped from their baskets; empty baskets are dropped.

    :param dataset: BasketDataset: The dataset to map
    :param catalog: Sequence[str]: The target catalog
    :return: A BasketDataset over the target catalog
    """
    target = {item: i for i, item in enumerate(catalog)}
    sequences = {}
    for user_id, baskets in dataset.sequences.items():
        mapped = []
        for basket in baskets:
            items = frozenset(target[dataset.catalog[i]] for i in basket.items if dataset.catalog[i] in target)
            if items:
                mapped.append(Basket(timestamp=basket.timestamp, items=items))
        sequences[user_id] = tuple(mapped)
    names = {target[dataset.catalog[i]]: name for i, name in dataset.names.items() if dataset.catalog[i] in target}
    return BasketDataset(catalog=tuple(catalog), sequences=sequences, names=names, rules=dataset.rules)


def split(dataset: BasketDataset, ratios: tuple[float, float, float],
          seed: int) -> tuple[BasketDataset, BasketDataset, BasketDataset]:

    """
    The split function shuffles users with a seed and partitions them by ratio.
    Every part receives at least one user; all parts share the input catalog.

    :param dataset: BasketDataset: The dataset to split
    :param ratios: tuple[float, float, float]: Train/validation/test ratios summing to 1
    :param seed: int: Shuffle seed
    :return: The train, validation and test datasets
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    users = sorted(dataset.users)
    if len(users) < 3:
        raise EmptyDatasetError(f"at least 3 users are needed to split, got {len(users)}")
    order = np.random.default_rng(seed).permutation(len(users))
    shuffled = [users[i] for i in order]
    n_val = max(1, round(ratios[1] * len(users)))
    n_test = max(1, round(ratios[2] * len(users)))
    n_train = len(users) - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = 1, 1, len(users) - 2
    parts = (shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])
    return tuple(dataset.subset(part) for part in parts)


def frequency_vector(sequence: Iterable[Iterable[int]], catalog_size: int) -> np.ndarray:

    """
    The frequency_vector function counts item occurrences across baskets and normalizes them to sum to 1.
    An empty sequence yields the zero vector.

    :param sequence: Iterable[Iterable[int]]: Baskets of item indices
    :param catalog_size: int: Length of the vector
    :return: A float64 vector of length catalog_size
    """
    counts = np.zeros(catalog_size, dtype=np.float64)
    for basket in sequence:
        for item in basket:
            if not 0 <= item < catalog_size:
                raise ValueError(f"item index {item} outside catalog of size {catalog_size}")
            counts[item] += 1.0
    total = counts.sum()
    return counts / total if total > 0 else counts


def item_counts(dataset: BasketDataset) -> np.ndarray:
    """Total occurrences of each catalog item across every basket of the dataset."""
    counts = np.zeros(len(dataset.catalog), dtype=np.float64)
    for baskets in dataset.sequences.values():
        for basket in baskets:
            counts[list(basket.items)] += 1.0
    return counts


def gen_synthetic(spec: SyntheticSpec) -> tuple[list[InteractionEvent], KnowledgeGraph]:

    """
    The gen_synthetic function builds a desk-scale dataset with planted co-purchase patterns.
    Each user owns 1..patterns_per_user patterns and cycles through them basket by basket;
    every basket holds one whole pattern plus, per slot, a noise item with probability noise_rate.
    The KG links each item to its pattern category, to kg_attrs_per_item attributes,
    and each category to a department.

    :param spec: SyntheticSpec: Sizes, noise and seed
    :return: The events and the knowledge graph
    """
    rng = np.random.default_rng(spec.seed)
    items = [f"item_{i:03d}" for i in range(spec.n_items)]
    order = rng.permutation(spec.n_items)
    patterns = [[items[j] for j in sorted(order[p * spec.pattern_size:(p + 1) * spec.pattern_size])]
                for p in range(spec.n_patterns)]
    label = {item: f"category_{p}" for p, members in enumerate(patterns) for item in members}

    triples = []
    n_values = max(2, spec.n_patterns)
    for item in items:
        category = label.get(item, "category_unplanned")
        triples.append(Triplet(head=item, relation="category_is", tail=category))
        pattern_index = int(category.rsplit("_", 1)[1]) if item in label else spec.n_patterns
        for a in range(spec.kg_attrs_per_item):
            relation = ATTRIBUTE_RELATIONS[a % len(ATTRIBUTE_RELATIONS)]
            value = (pattern_index + a + int(rng.integers(0, 2))) % n_values
            triples.append(Triplet(head=item, relation=relation, tail=f"{relation[:-3]}_{value}"))
    for p in range(spec.n_patterns):
        triples.append(Triplet(head=f"category_{p}", relation="department_is", tail=f"department_{p % 3}"))
    kg = KnowledgeGraph.from_triples(triples)

    events = []
    for u in range(spec.n_users):
        user_id = f"user_{u:04d}"
        n_owned = int(rng.integers(1, spec.patterns_per_user + 1))
        owned = [int(p) for p in rng.choice(spec.n_patterns, size=n_owned, replace=False)]
        for b in range(spec.n_baskets_per_user):
            members = patterns[owned[b % n_owned]]
            basket = set(members)
            outside = [item for item in items if item not in basket]
            for _ in range(spec.pattern_size):
                if outside and rng.random() < spec.noise_rate:
                    basket.add(outside[int(rng.integers(0, len(outside)))])
            events.extend(InteractionEvent(user_id=user_id, timestamp=b + 1, item_id=item) for item in sorted(basket))
    logger.info("generated %d events for %d users and %d KG triples", len(events), spec.n_users, len(kg.triples))
    return events, kg
