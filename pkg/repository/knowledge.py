import re
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence

from database.models import KnowledgeGraph, PromptText, Triplet, TripletSequence

CONSIST_OF = "consist_of"
SEQUENCE_ENTITY = "<sequence>"

PAD, BOS, EOS, MASK, SEP, UNK = "[PAD]", "[BOS]", "[EOS]", "[MASK]", "[SEP]", "[UNK]"
SPECIALS = (PAD, BOS, EOS, MASK, SEP, UNK)

BUILTIN_TEMPLATES: dict[int, tuple[str, str, str]] = {
    0: ("User has purchased {n_baskets} baskets.",
        "Basket_{basket_index} consists of {items}.",
        "Basket_{basket_index} will consist of {masks}"),
    1: ("The customer placed {n_baskets} orders.",
        "Order {basket_index} contains {items} ;",
        "order {basket_index} will contain {masks}"),
    2: ("Shopping history of {n_baskets} visits :",
        "in visit {basket_index} the user bought {items} ,",
        "in the next visit the user will buy {masks}"),
}

_WORD = r"\[[A-Z]+\]|\w+|[^\w\s]"


def sequence_entity(kg: KnowledgeGraph) -> str:
    """Name of the root entity s, chosen so it never collides with an existing entity."""
    root = SEQUENCE_ENTITY
    while root in kg.entities:
        root += "'"
    return root


def augment_kg(kg: KnowledgeGraph, sequence: Iterable[Iterable[int]],
               item_names: Sequence[str] | Mapping[int, str]) -> KnowledgeGraph:

    """
    The augment_kg function adds the root entity s and one (s, consist_of, i) triple
    for every distinct item of the basket sequence. The input graph is left untouched.

    :param kg: KnowledgeGraph: The item knowledge graph
    :param sequence: Iterable[Iterable[int]]: Baskets of item indices
    :param item_names: Sequence[str] | Mapping[int, str]: Entity id of each item index
    :return: The augmented graph; its root is sequence_entity(kg)
    """
    root = sequence_entity(kg)
    distinct = sorted({item for basket in sequence for item in basket})
    added = [Triplet(head=root, relation=CONSIST_OF, tail=item_names[i]) for i in distinct]
    return KnowledgeGraph.from_triples(list(kg.triples) + added, extra_entities=set(kg.entities) | {root})


def build_knowledge_tree(aug: KnowledgeGraph, root: str, n_hops: int, beam_width: int,
                         entity_scores: Mapping[str, float] | None = None) -> TripletSequence:

    """
    The build_knowledge_tree function runs a breadth-first beam search from the root entity.
    At every hop at most beam_width unvisited tails are expanded, ranked by training interaction
    frequency, then out-degree, then entity id. Each entity is visited once, so the result is a tree.

    :param aug: KnowledgeGraph: The augmented graph
    :param root: str: The root entity s
    :param n_hops: int: Maximum depth
    :param beam_width: int: Maximum expansions per hop
    :param entity_scores: Mapping[str, float] | None: Interaction frequency per item entity
    :return: The triples in breadth-first order with the hop distance of each head
    """
    if root not in aug.entities:
        raise ValueError(f"root entity {root!r} is not in the knowledge graph")
    if n_hops < 1 or beam_width < 1:
        raise ValueError("n_hops and beam_width must be at least 1")
    scores = entity_scores or {}

    def rank(entity: str) -> tuple:
        return -scores.get(entity, 0.0), -aug.out_degree(entity), entity

    visited = {root}
    frontier = [root]
    triples: list[Triplet] = []
    hops: list[int] = []
    for depth in range(n_hops):
        best: dict[str, tuple] = {}
        for position, head in enumerate(frontier):
            for relation, tail in aug.adjacency.get(head, ()):
                if tail in visited:
                    continue
                key = (rank(tail), position, relation)
                if tail not in best or key < best[tail][0]:
                    best[tail] = (key, head, relation)
        chosen = sorted(best.items(), key=lambda entry: entry[1][0])[:beam_width]
        # breadth-first: children of earlier frontier entities first, then by rank
        chosen.sort(key=lambda entry: (entry[1][0][1], entry[1][0][0]))
        frontier = []
        for tail, (_, head, relation) in chosen:
            visited.add(tail)
            frontier.append(tail)
            triples.append(Triplet(head=head, relation=relation, tail=tail))
            hops.append(depth)
        if not frontier:
            break
    return TripletSequence(triples=tuple(triples), hop_of=tuple(hops))


def render_mup(sequence: Sequence[Iterable[int]], names: Sequence[str] | Mapping[int, str], n_masks: int,
               template_id: int = 0, templates: Mapping[int, tuple[str, str, str]] | None = None) -> PromptText:

    """
    The render_mup function turns a basket sequence into a masked user prompt ending with n_masks mask tokens.
    Items of each basket are listed in catalog order.

    :param sequence: Sequence[Iterable[int]]: Historical baskets of item indices
    :param names: Sequence[str] | Mapping[int, str]: Surface name of each item index
    :param n_masks: int: Expected size of the next basket
    :param template_id: int: Which template to use
    :param templates: Mapping | None: Template table, the built-in one by default
    :return: A MUP PromptText
    """
    if n_masks < 1:
        raise ValueError("n_masks must be at least 1")
    table = templates if templates is not None else BUILTIN_TEMPLATES
    if template_id not in table:
        raise ValueError(f"unknown template id {template_id}; known: {sorted(table)}")
    header, basket, target = table[template_id]
    parts = [header.format(n_baskets=len(sequence))]
    for index, items in enumerate(sequence):
        parts.append(basket.format(basket_index=index, items=", ".join(names[i] for i in sorted(items))))
    parts.append(target.format(basket_index=len(sequence), masks=", ".join([MASK] * n_masks)))
    return PromptText(text=" ".join(part for part in parts if part), kind="MUP", n_masks=n_masks)


def ktp_sentence(triple: Triplet, names: Mapping[str, str]) -> str:
    return f"The {triple.relation} of {names.get(triple.head, triple.head)} is {names.get(triple.tail, triple.tail)}."


def render_ktp(tree: TripletSequence, names: Mapping[str, str], token_budget: int,
               tokenizer: "Tokenizer") -> PromptText:

    """
    The render_ktp function linearizes a knowledge tree as "The r of h is t." sentences in tree order.
    Triples hanging off the root repeat the MUP items and are skipped; the text stops at the last
    whole sentence that fits the token budget.

    :param tree: TripletSequence: The knowledge tree
    :param names: Mapping[str, str]: Surface names of entities (ids are used when absent)
    :param token_budget: int: Maximum number of tokens
    :param tokenizer: Tokenizer: Used to count tokens
    :return: A KTP PromptText
    """
    sentences = []
    used = 0
    for triple, hop in zip(tree.triples, tree.hop_of):
        if hop == 0:
            continue
        sentence = ktp_sentence(triple, names)
        cost = len(tokenizer.split(sentence))
        if used + cost > token_budget:
            break
        sentences.append(sentence)
        used += cost
    return PromptText(text=" ".join(sentences), kind="KTP")


class Tokenizer:
    """
    Word-level tokenizer. Item surface names are always single tokens, even when they contain
    spaces or punctuation.
    """

    def __init__(self, tokens: Sequence[str], phrases: Iterable[str] = ()):
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("the vocabulary must start with the special tokens")
        self.id_to_token = list(tokens)
        self.vocab = {token: i for i, token in enumerate(self.id_to_token)}
        if len(self.vocab) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.phrases = sorted({p for p in phrases if not re.fullmatch(r"\w+", p)}, key=lambda p: (-len(p), p))
        alternatives = [rf"(?<!\w){re.escape(p)}(?!\w)" for p in self.phrases] + [_WORD]
        self._pattern = re.compile("|".join(alternatives))
        self.pad_id, self.bos_id, self.eos_id, self.mask_id, self.sep_id, self.unk_id = range(len(SPECIALS))

    def __len__(self) -> int:
        return len(self.id_to_token)

    def split(self, text: str) -> list[str]:
        return self._pattern.findall(text)

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(token, self.unk_id) for token in self.split(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocab(corpus: Sequence[str], min_count: int = 1, item_names: Iterable[str] = ()) -> Tokenizer:

    """
    The build_vocab function collects word-level tokens seen at least min_count times.
    Special tokens come first, item names are force-included, the rest is ordered by count then text.

    :param corpus: Sequence[str]: Training texts
    :param min_count: int: Minimum frequency for ordinary tokens
    :param item_names: Iterable[str]: Surface names that must be single in-vocabulary tokens
    :return: A Tokenizer
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    forced = sorted(set(item_names) - set(SPECIALS))
    splitter = Tokenizer(SPECIALS, phrases=forced)
    counts = Counter(token for text in corpus for token in splitter.split(text))
    ordinary = sorted((token for token, count in counts.items()
                       if count >= min_count and token not in SPECIALS and token not in forced),
                      key=lambda token: (-counts[token], token))
    return Tokenizer(list(SPECIALS) + forced + ordinary, phrases=forced)


def tokenize(tok: Tokenizer, prompt: PromptText) -> tuple[list[int], PromptText]:

    """
    The tokenize function encodes a prompt and records where the mask tokens are.

    :param tok: Tokenizer: The vocabulary
    :param prompt: PromptText: MUP or KTP text
    :return: The token ids and the prompt with mask_positions filled
    """
    ids = tok.encode(prompt.text)
    positions = tuple(i for i, token_id in enumerate(ids) if token_id == tok.mask_id)
    return ids, prompt.model_copy(update={"mask_positions": positions})
