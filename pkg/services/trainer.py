import json
import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from conf.config import derive_seed
from database.checkpoint import Checkpoint
from database.models import BasketDataset, KnowledgeGraph
from errors import ConfigError, EmptyDatasetError
from repository.corpus import frequency_vector, item_counts
from schemas import EpochLog, RunConfig
from services.evaluation import evaluate_split
from services.head import fbg_score, joint_loss, rec_loss
from services.optim import AdamW
from services.recommender import (EncodedPrompt, PromptBuilder, RecommenderModel, fit_tokenizer, resolve_templates,
                                  target_text)
from services.relenc import (build_bipartite, dump_similarity, loss_bi, loss_ii, sample_pos_neg,
                             select_hyperedges)
from services.seqenc import encode_prompts, masked_item_loss, plm_loss
from services.tensor import Tensor, backward, default_dtype, no_grad

logger = logging.getLogger(__name__)


class TrainingExample(BaseModel):
    """One user: the history prefix predicts the final basket."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    user_id: str
    history: tuple[frozenset[int], ...]
    target: frozenset[int]
    prompt: EncodedPrompt
    target_ids: tuple[int, ...]
    item_ids: tuple[int, ...]
    frequency: np.ndarray


class Trainer:
    """
    Joint training of the backbone and the overhead modules. Each batch step computes the
    basket-item GCN, the similarity matrix and the hypergraph convolution once, then runs the
    per-user prompt encoders (optionally on worker threads) and sums the four losses.
    """

    def __init__(self, train_set: BasketDataset, val_set: BasketDataset, kg: KnowledgeGraph, config: RunConfig,
                 workers: int = 1, log_sink: Callable[[str], None] = print):
        if not train_set.users:
            raise EmptyDatasetError("the training split has no users")
        if config.knowledge.token_budget > config.model.max_tokens:
            raise ConfigError(f"must not exceed model.max_tokens={config.model.max_tokens}",
                              key="knowledge.token_budget")
        if config.model.architecture == "encoder_only" and config.model.n_dec_layers:
            logger.info("encoder_only architecture ignores model.n_dec_layers=%d", config.model.n_dec_layers)
        self.train_set = train_set
        self.val_set = val_set
        self.kg = kg
        self.workers = max(1, workers)
        self.log_sink = log_sink
        self.templates = resolve_templates(config.knowledge)
        self.tokenizer = fit_tokenizer(train_set, kg, config.knowledge, self.templates)
        self.config = config.model_copy(update={
            "model": config.model.model_copy(update={"vocab_size": len(self.tokenizer)})})
        self.names = train_set.surface_names()
        self.counts = item_counts(train_set)
        self.graph = build_bipartite(train_set)
        with default_dtype(self.config.train.dtype):
            self.model = RecommenderModel(self.config, len(train_set.catalog), self.graph.n_baskets)
        self.prompts = PromptBuilder(self.tokenizer, kg, train_set.catalog, self.names, self.config.knowledge,
                                     self.templates, self.counts, self.config.model.max_tokens,
                                     use_ktp=not self.config.ablate.no_ktp)
        self.examples = [self._example(user_id) for user_id in sorted(train_set.users)]
        train = self.config.train
        self.optimizer = AdamW([{"params": self.model.backbone_parameters(), "lr": train.lr_backbone},
                                {"params": self.model.overhead_parameters(), "lr": train.lr_overhead}],
                               weight_decay=train.weight_decay)
        self.weights = {"plm": train.w_plm, "rec": train.w_rec, "bi": train.w_bi, "ii": train.w_ii}
        self.mask: np.ndarray | None = None

    def _example(self, user_id: str) -> TrainingExample:
        baskets = self.train_set.baskets(user_id)
        history, target = baskets[:-1], baskets[-1]
        prompt = self.prompts.build(history, len(target))
        target_ids = [self.tokenizer.bos_id] + self.tokenizer.encode(target_text(target, self.names)) + \
            [self.tokenizer.eos_id]
        item_ids = [self.tokenizer.vocab[self.names[i]] for i in sorted(target)]
        return TrainingExample(user_id=user_id, history=tuple(history), target=target, prompt=prompt,
                               target_ids=tuple(target_ids), item_ids=tuple(item_ids),
                               frequency=frequency_vector(history, len(self.names)))

    def _user_losses(self, example: TrainingExample, refined: Tensor,
                     rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        model = self.model
        prompt = example.prompt
        rows, sequence_embedding, memory = encode_prompts(model.backbone, prompt.mup_ids, prompt.ktp_ids,
                                                          prompt.mask_positions, self.tokenizer.sep_id, rng)
        if self.config.model.architecture == "encoder_only":
            language = masked_item_loss(model.backbone, rows, example.item_ids)
        else:
            language = plm_loss(model.backbone, prompt.mup_ids, prompt.ktp_ids, example.target_ids,
                                self.tokenizer.sep_id, self.tokenizer.pad_id, memory=memory, rng=rng)
        scores = fbg_score(sequence_embedding, refined, example.frequency, model.gating,
                           use_gate=not self.config.ablate.no_fbg)
        return language, rec_loss(scores, example.target)

    def _relation_losses(self, batch: list[TrainingExample], items: Tensor, baskets: Tensor,
                         similarity: Tensor | None, rng: np.random.Generator) -> tuple[Tensor | None, Tensor | None]:
        n_items = items.shape[0]
        nodes, positives, negatives, anchors = [], [], [], []
        for example in batch:
            for node in self.graph.nodes_of[example.user_id]:
                basket = self.graph.baskets[node]
                if len(basket) >= n_items:
                    continue
                _, positive, negative = sample_pos_neg(basket, n_items, rng, "BI")
                nodes.append(node)
                positives.append(positive)
                negatives.append(negative)
                if similarity is not None and len(basket) >= 2:
                    anchors.append([sample_pos_neg(basket, n_items, rng, "II", anchor=i) for i in sorted(basket)])
        bi = None
        if nodes:
            bi = loss_bi(baskets[np.asarray(nodes)], items[np.asarray(positives)], items[np.asarray(negatives)])
        ii = loss_ii(similarity, anchors) if similarity is not None else None
        return bi, ii

    def step(self, batch: list[TrainingExample], epoch: int, step: int) -> dict[str, float]:

        """
        The step function runs one optimization step on a batch of users.

        :param batch: list[TrainingExample]: The users of this step
        :param epoch: int: Epoch number, used for error reports and random streams
        :param step: int: Step number within the epoch
        :return: The value of every loss component (0 for a skipped one)
        """
        seed = self.config.seed
        model = self.model
        mask = None if self.config.relation.hypergraph_rebuild == "step" else self.mask
        items, baskets, refined, similarity, _ = model.item_states(self.graph, mask)
        sampler = np.random.default_rng([derive_seed(seed, "sampling"), epoch, step])
        bi, ii = self._relation_losses(batch, items, baskets, similarity, sampler)

        def forward(example: TrainingExample) -> tuple[Tensor, Tensor]:
            dropout = np.random.default_rng([derive_seed(seed, f"dropout:{example.user_id}"), epoch, step])
            with default_dtype(self.config.train.dtype):
                return self._user_losses(example, refined, dropout)

        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(forward, batch))
        else:
            results = [forward(example) for example in batch]
        plm = results[0][0]
        rec = results[0][1]
        for language, recommendation in results[1:]:
            plm = plm + language
            rec = rec + recommendation
        components = {"plm": plm, "rec": rec, "bi": bi, "ii": ii}
        loss = joint_loss(components, self.weights, epoch, step)
        backward(loss)
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
        self.optimizer.step()
        return {name: float(value.data) if value is not None else 0.0 for name, value in components.items()}

    def snapshot(self) -> Checkpoint:
        return self.model.snapshot(self.graph, self.train_set.catalog, self.names, self.tokenizer, self.templates,
                                   self.counts, self.mask)

    def validate(self, ckpt: Checkpoint) -> float:
        k = self.config.train.val_k
        report = evaluate_split(ckpt, self.val_set, self.kg, ks=[k], workers=self.workers)
        return report.metrics[k].hr

    def header(self) -> dict:
        return {"event": "start", "users": len(self.examples), "items": len(self.names),
                "baskets": self.graph.n_baskets, "vocab": len(self.tokenizer),
                "ablate": self.config.ablate.model_dump(),
                "ktp": "empty" if self.config.ablate.no_ktp else "enabled"}

    def train(self) -> Checkpoint:

        """
        The train function runs every epoch, validates HR@k on the validation users after each one
        and returns the checkpoint of the best epoch (the earliest one on ties).

        :return: The best Checkpoint
        """
        config = self.config
        self.log_sink(json.dumps(self.header(), sort_keys=True))
        shuffle = np.random.default_rng(derive_seed(config.seed, "shuffle"))
        best, best_hr = None, -1.0
        for epoch in range(config.train.epochs):
            self.model.train()
            with default_dtype(config.train.dtype):
                if config.relation.hypergraph_rebuild == "epoch" and not config.ablate.no_hypergcn:
                    items, _ = (self.model.gcn.initial() if config.ablate.no_gcn else self.model.gcn(self.graph))
                    self.mask = select_hyperedges(items, self.model.experts, self.model.top_k)
                order = shuffle.permutation(len(self.examples))
                totals = {"plm": 0.0, "rec": 0.0, "bi": 0.0, "ii": 0.0}
                size = config.train.batch_size
                for step, start in enumerate(range(0, len(order), size)):
                    batch = [self.examples[i] for i in order[start:start + size]]
                    for name, value in self.step(batch, epoch, step).items():
                        totals[name] += value
            self.model.eval()
            ckpt = self.snapshot()
            hr = self.validate(ckpt)
            n = len(self.examples)
            entry = EpochLog(epoch=epoch, l_plm=totals["plm"] / n, l_rec=totals["rec"] / n, l_bi=totals["bi"] / n,
                             l_ii=totals["ii"] / n, val_hr5=hr,
                             mup_tokens=float(np.mean([len(e.prompt.mup_ids) for e in self.examples])),
                             ktp_tokens=float(np.mean([len(e.prompt.ktp_ids) for e in self.examples])))
            self.log_sink(entry.model_dump_json())
            if hr > best_hr:
                best, best_hr = ckpt, hr
                self.best_state = {name: p.data.copy() for name, p in self.model.named_parameters().items()}
                self.best_mask = self.mask
        logger.info("training finished, best validation HR@%d %.4f", config.train.val_k, best_hr)
        return best

    def dump_similarity(self, path: str | Path) -> None:
        """Write the similarity matrix and the hypergraph weights of the best epoch."""
        if self.config.ablate.no_hypergcn:
            raise ConfigError("no similarity matrix is learned with ablate.no_hypergcn=true",
                              key="ablate.no_hypergcn")
        self.model.load_state(self.best_state)
        with default_dtype(self.config.train.dtype), no_grad():
            _, _, _, similarity, adjacency = self.model.item_states(self.graph, self.best_mask)
        dump_similarity(similarity, adjacency, self.train_set.catalog, Path(path))


def train(train_set: BasketDataset, val_set: BasketDataset, kg: KnowledgeGraph, config: RunConfig,
          workers: int = 1, log_sink: Callable[[str], None] = print) -> Checkpoint:
    """Train on train_set and return the checkpoint with the best validation hit rate."""
    return Trainer(train_set, val_set, kg, config, workers, log_sink).train()
