from collections.abc import Iterable
from pathlib import Path

from database.models import Basket, BasketDataset, KnowledgeGraph, Triplet
from errors import MissingFileError, ParseError
from schemas import InteractionEvent, PreprocessRules

EXPORT_MAGIC = "#nextbasket-dataset"


def _read_lines(path: str | Path) -> list[str]:
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError:
        raise MissingFileError(str(path)) from None
    try:
        return data.decode("utf-8").split("\n")
    except UnicodeDecodeError as err:
        raise ParseError(str(path), data.count(b"\n", 0, err.start) + 1, "invalid UTF-8") from None


def _fields(path: str | Path, number: int, line: str, count: int) -> list[str]:
    fields = line.rstrip("\r").split("\t")
    if len(fields) != count or not all(fields):
        raise ParseError(str(path), number, f"expected {count} non-empty tab-separated fields, got {len(fields)}")
    return fields


def load_interactions(path: str | Path) -> list[InteractionEvent]:

    """
    The load_interactions function reads a user_id<TAB>timestamp<TAB>item_id file, one event per non-empty line.

    :param path: str | Path: The events file
    :return: A list of events in file order
    """
    events = []
    for number, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        user_id, timestamp, item_id = _fields(path, number, line, 3)
        try:
            events.append(InteractionEvent(user_id=user_id, timestamp=int(timestamp), item_id=item_id))
        except ValueError:
            raise ParseError(str(path), number, f"timestamp is not an integer: {timestamp!r}") from None
    return events


def write_interactions(events: Iterable[InteractionEvent], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for event in events:
            handle.write(f"{event.user_id}\t{event.timestamp}\t{event.item_id}\n")


def load_kg(path: str | Path) -> KnowledgeGraph:

    """
    The load_kg function reads a head<TAB>relation<TAB>tail file; duplicate lines collapse to one triple.

    :param path: str | Path: The KG file
    :return: A KnowledgeGraph (possibly empty)
    """
    triples = []
    for number, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        head, relation, tail = _fields(path, number, line, 3)
        triples.append(Triplet(head=head, relation=relation, tail=tail))
    return KnowledgeGraph.from_triples(triples)


def write_kg(kg: KnowledgeGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for triple in kg.triples:
            handle.write(f"{triple.head}\t{triple.relation}\t{triple.tail}\n")


def load_names(path: str | Path) -> dict[str, str]:

    """
    The load_names function reads an optional item_id<TAB>surface_name file.

    :param path: str | Path: The names file
    :return: A map item_id -> surface name
    """
    names = {}
    for number, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        item_id, name = _fields(path, number, line, 2)
        names[item_id] = name
    return names


def load_templates(path: str | Path) -> dict[int, tuple[str, str, str]]:

    """
    The load_templates function reads MUP templates, one per line: id<TAB>header<TAB>basket<TAB>target.
    Placeholders are {n_baskets} (header), {basket_index} and {items} (basket), {basket_index} and {masks} (target).

    :param path: str | Path: The template file
    :return: A map template id -> (header, basket, target) patterns
    """
    templates = {}
    for number, line in enumerate(_read_lines(path), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        template_id, header, basket, target = _fields(path, number, line, 4)
        if not template_id.isdigit():
            raise ParseError(str(path), number, f"template id must be a non-negative integer: {template_id!r}")
        if "{masks}" not in target:
            raise ParseError(str(path), number, "target pattern must contain {masks}")
        templates[int(template_id)] = (header, basket, target)
    return templates


def export_dataset(dataset: BasketDataset, path: str | Path) -> None:

    """
    The export_dataset function writes a dataset as a header line carrying seed and rule values,
    followed by user_id<TAB>ts:item,item;ts:item,... records.

    :param dataset: BasketDataset: The dataset to write
    :param path: str | Path: The output file
    """
    rules = dataset.rules or PreprocessRules()
    header = " ".join(f"{key}={value}" for key, value in rules.model_dump().items())
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(f"{EXPORT_MAGIC} {header}\n")
        for user_id, baskets in dataset.sequences.items():
            rendered = ";".join(
                f"{basket.timestamp}:" + ",".join(dataset.catalog[i] for i in sorted(basket.items))
                for basket in baskets
            )
            handle.write(f"{user_id}\t{rendered}\n")


def read_dataset_export(path: str | Path) -> BasketDataset:

    """
    The read_dataset_export function reloads a file written by export_dataset.

    :param path: str | Path: The export file
    :return: A BasketDataset with the recorded rules
    """
    lines = _read_lines(path)
    if not lines or not lines[0].startswith(EXPORT_MAGIC):
        raise ParseError(str(path), 1, "missing dataset export header")
    values = dict(pair.split("=", 1) for pair in lines[0][len(EXPORT_MAGIC):].split())
    rules = PreprocessRules(**{key: None if value == "None" else value for key, value in values.items()})
    raw: dict[str, list[tuple[int, list[str]]]] = {}
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        user_id, body = _fields(path, number, line, 2)
        try:
            raw[user_id] = [(int(ts), items.split(",")) for ts, items in
                            (chunk.split(":", 1) for chunk in body.split(";"))]
        except ValueError:
            raise ParseError(str(path), number, "malformed basket record") from None
    catalog = tuple(sorted({item for baskets in raw.values() for _, items in baskets for item in items}))
    index = {item: i for i, item in enumerate(catalog)}
    sequences = {user: tuple(Basket(timestamp=ts, items=frozenset(index[item] for item in items))
                             for ts, items in baskets)
                 for user, baskets in raw.items()}
    return BasketDataset(catalog=catalog, sequences=sequences, rules=rules)
