from collections.abc import Iterable
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from schemas import PreprocessRules


class Basket(BaseModel):
    model_config = ConfigDict(frozen=True)

    timestamp: int
    items: frozenset[int]


class BasketDataset(BaseModel):
    """
    Per-user chronologically ordered basket sequences over an item catalog.
    Item index i refers to catalog[i]; the catalog is sorted lexicographically.
    """
    model_config = ConfigDict(frozen=True)

    catalog: tuple[str, ...]
    sequences: dict[str, tuple[Basket, ...]]
    names: dict[int, str] = {}
    rules: PreprocessRules | None = None

    @model_validator(mode="after")
    def check_indices(self):
        size = len(self.catalog)
        for user_id, baskets in self.sequences.items():
            previous = None
            for basket in baskets:
                if any(not 0 <= i < size for i in basket.items):
                    raise ValueError(f"user {user_id}: item index out of catalog range")
                if previous is not None and basket.timestamp <= previous:
                    raise ValueError(f"user {user_id}: basket timestamps must strictly increase")
                previous = basket.timestamp
        return self

    @property
    def users(self) -> list[str]:
        return list(self.sequences)

    def baskets(self, user_id: str) -> list[frozenset[int]]:
        return [basket.items for basket in self.sequences[user_id]]

    def item_name(self, index: int) -> str:
        return self.names.get(index, self.catalog[index])

    def surface_names(self) -> list[str]:
        return [self.item_name(i) for i in range(len(self.catalog))]

    def entity_names(self) -> dict[str, str]:
        return {self.catalog[i]: name for i, name in self.names.items()}

    def subset(self, users: Iterable[str]) -> "BasketDataset":
        return BasketDataset(catalog=self.catalog,
                             sequences={user: self.sequences[user] for user in users},
                             names=self.names,
                             rules=self.rules)

    def __len__(self) -> int:
        return len(self.sequences)


class Triplet(BaseModel):
    model_config = ConfigDict(frozen=True)

    head: str = Field(min_length=1)
    relation: str = Field(min_length=1)
    tail: str = Field(min_length=1)


class KnowledgeGraph(BaseModel):
    """
    A set of (head, relation, tail) triples with an outgoing adjacency index.
    Build instances with from_triples; they are not mutated afterwards.
    """
    model_config = ConfigDict(frozen=True)

    entities: frozenset[str]
    relations: frozenset[str]
    triples: tuple[Triplet, ...]
    adjacency: dict[str, tuple[tuple[str, str], ...]]

    @classmethod
    def from_triples(cls, triples: Iterable[Triplet], extra_entities: Iterable[str] = ()) -> "KnowledgeGraph":
        unique: dict[Triplet, None] = dict.fromkeys(triples)
        entities = set(extra_entities)
        relations = set()
        adjacency: dict[str, list[tuple[str, str]]] = {}
        for triple in unique:
            entities.update((triple.head, triple.tail))
            relations.add(triple.relation)
            adjacency.setdefault(triple.head, []).append((triple.relation, triple.tail))
        return cls(entities=frozenset(entities),
                   relations=frozenset(relations),
                   triples=tuple(unique),
                   adjacency={head: tuple(edges) for head, edges in adjacency.items()})

    @model_validator(mode="after")
    def check_consistency(self):
        for triple in self.triples:
            if triple.head not in self.entities or triple.tail not in self.entities:
                raise ValueError(f"triple {triple} references an unknown entity")
            if triple.relation not in self.relations:
                raise ValueError(f"triple {triple} references an unknown relation")
        if sum(len(edges) for edges in self.adjacency.values()) != len(self.triples):
            raise ValueError("adjacency does not match triples")
        return self

    def out_degree(self, entity: str) -> int:
        return len(self.adjacency.get(entity, ()))


class TripletSequence(BaseModel):
    model_config = ConfigDict(frozen=True)

    triples: tuple[Triplet, ...] = ()
    hop_of: tuple[int, ...] = ()

    @model_validator(mode="after")
    def check_order(self):
        if len(self.triples) != len(self.hop_of):
            raise ValueError("every triple needs a hop value")
        if any(later < earlier for earlier, later in zip(self.hop_of, self.hop_of[1:])):
            raise ValueError("hop values must be non-decreasing")
        return self


class PromptText(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    kind: Literal["MUP", "KTP"]
    n_masks: int = 0
    mask_positions: tuple[int, ...] = ()
