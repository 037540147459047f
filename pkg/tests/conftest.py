import numpy as np
import pytest

from conf.config import dump_config
from database.files import write_interactions, write_kg
from database.models import Basket, BasketDataset, KnowledgeGraph, Triplet
from repository.corpus import gen_synthetic, preprocess
from schemas import PreprocessRules, RunConfig, SyntheticSpec


TINY_SPEC = SyntheticSpec(n_users=15, n_items=12, n_baskets_per_user=5, n_patterns=3, pattern_size=3,
                          noise_rate=0.2, kg_attrs_per_item=1, patterns_per_user=2, max_basket_size=4, seed=3)

TINY_RUN = {
    "seed": 11,
    "preprocess": {"min_basket_size": 1, "max_basket_size": 5, "min_seq_len": 2, "max_seq_len": 6},
    "model": {"d_model": 8, "n_enc_layers": 1, "n_dec_layers": 1, "n_heads": 2, "ffn_mult": 2,
              "max_tokens": 256, "dropout": 0.1},
    "relation": {"d2": 4, "d3": 4, "n_experts": 2, "gcn_layers": 1, "hyper_layers": 1, "k_topk": 3},
    "knowledge": {"n_hops": 2, "beam_width": 4, "token_budget": 160},
    "train": {"epochs": 1, "batch_size": 4, "lr_backbone": 1e-3, "lr_overhead": 1e-2, "val_k": 5},
}


def tiny_config(**overrides) -> RunConfig:
    """The tiny run config with section-level overrides, e.g. ablate={"no_fbg": True}."""
    raw = {section: dict(values) if isinstance(values, dict) else values for section, values in TINY_RUN.items()}
    for section, values in overrides.items():
        if isinstance(values, dict):
            raw.setdefault(section, {}).update(values)
        else:
            raw[section] = values
    return RunConfig.model_validate(raw)


@pytest.fixture(scope="session")
def tiny_corpus():
    events, kg = gen_synthetic(TINY_SPEC)
    dataset = preprocess(events, PreprocessRules(min_basket_size=1, max_basket_size=5, min_seq_len=2,
                                                 max_seq_len=6, sample_seed=0))
    return events, kg, dataset


@pytest.fixture(scope="function")
def run_config():
    return tiny_config()


@pytest.fixture(scope="function")
def toy_dataset():
    sequences = {
        "u1": (Basket(timestamp=1, items=frozenset({0, 1})), Basket(timestamp=2, items=frozenset({1, 2})),
               Basket(timestamp=3, items=frozenset({0, 1, 2}))),
        "u2": (Basket(timestamp=5, items=frozenset({3})), Basket(timestamp=9, items=frozenset({2, 3}))),
        "u3": (Basket(timestamp=1, items=frozenset({4, 0})), Basket(timestamp=2, items=frozenset({4}))),
    }
    return BasketDataset(catalog=("apple", "bread", "cheese", "dates", "eggs"), sequences=sequences,
                         names={1: "rye bread"})


@pytest.fixture(scope="function")
def toy_kg():
    triples = [
        Triplet(head="apple", relation="category_is", tail="fruit"),
        Triplet(head="dates", relation="category_is", tail="fruit"),
        Triplet(head="bread", relation="category_is", tail="bakery"),
        Triplet(head="cheese", relation="category_is", tail="dairy"),
        Triplet(head="eggs", relation="category_is", tail="dairy"),
        Triplet(head="fruit", relation="department_is", tail="fresh"),
        Triplet(head="dairy", relation="department_is", tail="fresh"),
    ]
    return KnowledgeGraph.from_triples(triples)


@pytest.fixture(scope="function")
def synthetic_files(tmp_path, tiny_corpus):
    events, kg, _ = tiny_corpus
    paths = {"events": tmp_path / "events.tsv", "kg": tmp_path / "kg.tsv", "config": tmp_path / "run.conf",
             "ckpt": tmp_path / "model.ckpt"}
    write_interactions(events, paths["events"])
    write_kg(kg, paths["kg"])
    paths["config"].write_text(dump_config(tiny_config()), encoding="utf-8")
    return paths


@pytest.fixture(scope="function")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="function")
def make_config():
    return tiny_config


@pytest.fixture(scope="function")
def spec_file(tmp_path):
    path = tmp_path / "tiny.spec"
    path.write_text("".join(f"{key}={value}\n" for key, value in TINY_SPEC.model_dump().items()), encoding="utf-8")
    return path
