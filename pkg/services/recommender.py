import logging
from collections.abc import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from conf.config import derive_seed
from database.checkpoint import Checkpoint
from database.files import load_templates
from database.models import BasketDataset, KnowledgeGraph
from errors import CheckpointFormatError, PromptBudgetError, ShapeError
from repository.corpus import frequency_vector
from repository.knowledge import (BUILTIN_TEMPLATES, Tokenizer, augment_kg, build_knowledge_tree, build_vocab,
                                  ktp_sentence, render_ktp, render_mup, sequence_entity, tokenize)
from schemas import KnowledgeConfig, RunConfig
from services.head import GatingParams, fbg_score
from services.relenc import (BipartiteGCN, BipartiteGraph, ExpertBank, HypergraphAdjacency, HypergraphConv,
                             refine_items)
from services.seqenc import SeqEncoderModel, encode_prompts
from services.tensor import Module, Tensor, default_dtype, no_grad

logger = logging.getLogger(__name__)

CHECKPOINT_DTYPE = "float32"


class EncodedPrompt(BaseModel):
    model_config = ConfigDict(frozen=True)

    mup_ids: tuple[int, ...]
    ktp_ids: tuple[int, ...]
    mask_positions: tuple[int, ...]


def resolve_templates(knowledge: KnowledgeConfig) -> dict[int, tuple[str, str, str]]:
    """Built-in templates, overridden and extended by knowledge.template_file when set."""
    templates = dict(BUILTIN_TEMPLATES)
    if knowledge.template_file:
        templates.update(load_templates(knowledge.template_file))
    if knowledge.template_id not in templates:
        raise ValueError(f"knowledge.template_id={knowledge.template_id} is not a known template")
    return templates


def target_text(basket: frozenset[int], names: Sequence[str]) -> str:
    return ", ".join(names[i] for i in sorted(basket))


def fit_tokenizer(dataset: BasketDataset, kg: KnowledgeGraph, knowledge: KnowledgeConfig,
                  templates: Mapping[int, tuple[str, str, str]]) -> Tokenizer:

    """
    The fit_tokenizer function builds the vocabulary from the training prompts, the training targets
    and one sentence per KG triple. Only the configured template is seen, so other templates
    exercise unseen wording at evaluation time.

    :param dataset: BasketDataset: The training split
    :param kg: KnowledgeGraph: The item knowledge graph
    :param knowledge: KnowledgeConfig: Template id and min_count
    :param templates: Mapping: The template table
    :return: A Tokenizer covering every catalog surface name
    """
    names = dataset.surface_names()
    entity_names = dataset.entity_names()
    corpus = []
    for user_id in dataset.users:
        baskets = dataset.baskets(user_id)
        corpus.append(render_mup(baskets[:-1], names, max(1, len(baskets[-1])), knowledge.template_id,
                                 templates).text)
        corpus.append(target_text(baskets[-1], names))
    corpus.extend(ktp_sentence(triple, entity_names) for triple in kg.triples)
    return build_vocab(corpus, knowledge.min_count, names)


class PromptBuilder:
    """
    Renders and tokenizes the MUP and the KTP of a basket history.
    The MUP is never truncated; the KTP gets whatever the token budget leaves after MUP and separator.
    """

    def __init__(self, tokenizer: Tokenizer, kg: KnowledgeGraph, catalog: Sequence[str], names: Sequence[str],
                 knowledge: KnowledgeConfig, templates: Mapping[int, tuple[str, str, str]],
                 item_frequency: np.ndarray, max_tokens: int, use_ktp: bool = True):
        self.tokenizer = tokenizer
        self.kg = kg
        self.catalog = list(catalog)
        self.names = list(names)
        self.knowledge = knowledge
        self.templates = dict(templates)
        self.max_tokens = max_tokens
        self.use_ktp = use_ktp
        self.entity_names = {item: name for item, name in zip(self.catalog, self.names)}
        self.entity_scores = {item: float(count) for item, count in zip(self.catalog, item_frequency) if count > 0}
        self.root = sequence_entity(kg)

    def build(self, history: Sequence[frozenset[int]], n_masks: int, template_id: int | None = None) -> EncodedPrompt:
        template = self.knowledge.template_id if template_id is None else template_id
        mup = render_mup(history, self.names, n_masks, template, self.templates)
        mup_ids, mup = tokenize(self.tokenizer, mup)
        if len(mup.mask_positions) != n_masks:
            raise ValueError(f"template {template} does not keep mask tokens intact")
        if len(mup_ids) + 1 > self.max_tokens:
            raise PromptBudgetError(f"MUP of {len(mup_ids)} tokens leaves no room in {self.max_tokens}")
        ktp_ids: list[int] = []
        if self.use_ktp:
            budget = max(0, min(self.knowledge.token_budget, self.max_tokens) - len(mup_ids) - 1)
            augmented = augment_kg(self.kg, history, self.catalog)
            tree = build_knowledge_tree(augmented, self.root, self.knowledge.n_hops, self.knowledge.beam_width,
                                        self.entity_scores)
            ktp_ids = self.tokenizer.encode(render_ktp(tree, self.entity_names, budget, self.tokenizer).text)
        return EncodedPrompt(mup_ids=tuple(mup_ids), ktp_ids=tuple(ktp_ids), mask_positions=mup.mask_positions)


class RecommenderModel(Module):
    """
    The backbone (fine-tuned parameters) plus the overhead modules: basket-item GCN,
    similarity experts, hypergraph convolution and the gating head.
    """

    def __init__(self, config: RunConfig, n_items: int, n_baskets: int):
        relation = config.relation
        self.config = config
        self.backbone = SeqEncoderModel(config.model, derive_seed(config.seed, "model"))
        self.gcn = BipartiteGCN(n_items, n_baskets, relation.d2, relation.gcn_layers, derive_seed(config.seed, "gcn"))
        self.experts = ExpertBank(relation.n_experts, relation.d2, relation.d3, derive_seed(config.seed, "experts"))
        self.hyperconv = HypergraphConv(relation.d2, relation.hyper_layers, derive_seed(config.seed, "hyperconv"))
        self.gating = GatingParams(config.model.d_model, relation.d2, n_items, derive_seed(config.seed, "gating"),
                                   diagonal=relation.diagonal_gate)

    @property
    def top_k(self) -> int:
        n_items = self.gcn.item_init.shape[0]
        return max(1, min(self.config.relation.k_topk, n_items - 1))

    def backbone_parameters(self) -> list[Tensor]:
        return self.backbone.parameters()

    def overhead_parameters(self) -> list[Tensor]:
        """Overhead parameters that take part in the objective under the configured ablations."""
        ablate = self.config.ablate
        params = [self.gcn.item_init, self.gcn.basket_init, self.gating.projection.weight]
        if not ablate.no_gcn:
            params += [p for layer in self.gcn.layers for p in layer.parameters()]
        if not ablate.no_hypergcn:
            params += self.experts.parameters() + self.hyperconv.parameters()
        if not ablate.no_fbg:
            params += [self.gating.content, self.gating.gate_weight, self.gating.gate_bias]
        return params

    def item_states(self, graph: BipartiteGraph,
                    mask: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor, Tensor | None,
                                                             HypergraphAdjacency | None]:

        """
        The item_states function computes item and basket embeddings, the similarity matrix and
        the refined item embeddings for the current parameters.

        :param graph: BipartiteGraph: The training basket-item graph
        :param mask: np.ndarray | None: Hyperedge mask to reuse; None selects hyperedges afresh
        :return: v_i, v_b, v', similarity (None without the hypergraph) and the adjacency used
        """
        ablate = self.config.ablate
        items, baskets = self.gcn.initial() if ablate.no_gcn else self.gcn(graph)
        if ablate.no_hypergcn:
            return items, baskets, items, None, None
        refined, similarity, adjacency = refine_items(items, self.experts, self.hyperconv, self.top_k,
                                                      self.config.relation.degree_mode, mask)
        return items, baskets, refined, similarity, adjacency

    def snapshot(self, graph: BipartiteGraph, catalog: Sequence[str], names: Sequence[str], tokenizer: Tokenizer,
                 templates: Mapping[int, tuple[str, str, str]], item_frequency: np.ndarray,
                 mask: np.ndarray | None = None) -> Checkpoint:
        """A float32 checkpoint of the current parameters with precomputed item embeddings."""
        with no_grad():
            _, _, refined, _, _ = self.item_states(graph, mask)
        tensors = {name: np.asarray(p.data, dtype=CHECKPOINT_DTYPE) for name, p in self.named_parameters().items()}
        tensors["derived.item_embeddings"] = np.asarray(refined.data, dtype=CHECKPOINT_DTYPE)
        tensors["derived.item_frequency"] = np.asarray(item_frequency, dtype=CHECKPOINT_DTYPE)
        return Checkpoint(config=self.config, catalog=list(catalog), names=list(names),
                          vocab=list(tokenizer.id_to_token), templates=dict(templates), tensors=tensors)


class Predictor:
    """
    Inference from a checkpoint. All arithmetic runs in float32 with dropout off, so scores are
    identical whether the checkpoint came straight from training or from disk.
    """

    def __init__(self, ckpt: Checkpoint, kg: KnowledgeGraph):
        config = ckpt.config
        self.checkpoint = ckpt
        self.config = config
        self.tokenizer = Tokenizer(ckpt.vocab, phrases=ckpt.names)
        n_items = len(ckpt.catalog)
        try:
            with default_dtype(CHECKPOINT_DTYPE):
                self.backbone = SeqEncoderModel(config.model, 0)
                self.backbone.load_state(ckpt.state("backbone"))
                self.backbone.eval()
                self.gating = GatingParams(config.model.d_model, config.relation.d2, n_items, 0,
                                           diagonal=config.relation.diagonal_gate)
                self.gating.load_state(ckpt.state("gating"))
                self.item_embeddings = Tensor(ckpt.tensors["derived.item_embeddings"])
            self.item_frequency = np.asarray(ckpt.tensors["derived.item_frequency"], dtype=np.float64)
        except KeyError as err:
            raise CheckpointFormatError(f"checkpoint does not match its config: {err.args[0]}") from None
        except ShapeError as err:
            raise CheckpointFormatError(f"checkpoint does not match its config: {err.detail}") from None
        self.prompts = PromptBuilder(self.tokenizer, kg, ckpt.catalog, ckpt.names, config.knowledge, ckpt.templates,
                                     self.item_frequency, config.model.max_tokens, use_ktp=not config.ablate.no_ktp)

    @property
    def n_items(self) -> int:
        return len(self.checkpoint.catalog)

    def scores(self, history: Sequence[frozenset[int]], n_masks: int, template_id: int | None = None) -> np.ndarray:

        """
        The scores function scores every catalog item as the next-basket candidate for one history.

        :param history: Sequence[frozenset[int]]: Past baskets, oldest first
        :param n_masks: int: Number of mask tokens in the MUP
        :param template_id: int | None: Template override
        :return: Raw float32 scores of size |I|
        """
        prompt = self.prompts.build(history, n_masks, template_id)
        frequency = frequency_vector(history, self.n_items)
        with default_dtype(CHECKPOINT_DTYPE), no_grad():
            _, sequence_embedding, _ = encode_prompts(self.backbone, prompt.mup_ids, prompt.ktp_ids,
                                                      prompt.mask_positions, self.tokenizer.sep_id)
            scores = fbg_score(sequence_embedding, self.item_embeddings, frequency, self.gating,
                               use_gate=not self.config.ablate.no_fbg)
        return scores.data
