import logging
import math
from collections.abc import Sequence

import numpy as np

from errors import PromptBudgetError
from schemas import ModelConfig
from services.tensor import (Module, Tensor, concat, embedding_lookup, layer_norm, log_softmax, masked_fill, matmul,
                             mean, mul, ones_parameter, parameter, relu, scalar_mul, softmax, sum_, zeros_parameter)

logger = logging.getLogger(__name__)

NEG_INF = -1e9


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep, dtype=x.data.dtype))


class Linear(Module):

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter(rng, (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.bias = zeros_parameter((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):

    def __init__(self, width: int):
        self.gain = ones_parameter((width,))
        self.shift = zeros_parameter((width,))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift)


class MultiHeadAttention(Module):

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = Linear(rng, d_model, d_model)
        self.key = Linear(rng, d_model, d_model)
        self.value = Linear(rng, d_model, d_model)
        self.output = Linear(rng, d_model, d_model)

    def __call__(self, x: Tensor, memory: Tensor, causal: bool = False, p: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
        q, k, v = self.query(x), self.key(memory), self.value(memory)
        mask = np.triu(np.ones((x.shape[0], memory.shape[0]), dtype=bool), k=1) if causal else None
        heads = []
        for h in range(self.n_heads):
            cols = (slice(None), slice(h * self.d_head, (h + 1) * self.d_head))
            scores = scalar_mul(matmul(q[cols], k[cols].T), 1.0 / math.sqrt(self.d_head))
            if mask is not None:
                scores = masked_fill(scores, mask, NEG_INF)
            weights = dropout(softmax(scores, axis=1), p, rng)
            heads.append(matmul(weights, v[cols]))
        return self.output(concat(heads, axis=1))


class FeedForward(Module):

    def __init__(self, rng: np.random.Generator, d_model: int, mult: int):
        self.expand = Linear(rng, d_model, d_model * mult)
        self.project = Linear(rng, d_model * mult, d_model)

    def __call__(self, x: Tensor, p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        return self.project(dropout(relu(self.expand(x)), p, rng))


class EncoderLayer(Module):

    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        self.norm_attn = LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(rng, config.d_model, config.n_heads)
        self.norm_ffn = LayerNorm(config.d_model)
        self.ffn = FeedForward(rng, config.d_model, config.ffn_mult)

    def __call__(self, x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
        h = self.norm_attn(x)
        x = x + dropout(self.attn(h, h, p=p, rng=rng), p, rng)
        return x + dropout(self.ffn(self.norm_ffn(x), p, rng), p, rng)


class DecoderLayer(Module):

    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        self.norm_self = LayerNorm(config.d_model)
        self.self_attn = MultiHeadAttention(rng, config.d_model, config.n_heads)
        self.norm_cross = LayerNorm(config.d_model)
        self.cross_attn = MultiHeadAttention(rng, config.d_model, config.n_heads)
        self.norm_ffn = LayerNorm(config.d_model)
        self.ffn = FeedForward(rng, config.d_model, config.ffn_mult)

    def __call__(self, x: Tensor, memory: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
        h = self.norm_self(x)
        x = x + dropout(self.self_attn(h, h, causal=True, p=p, rng=rng), p, rng)
        x = x + dropout(self.cross_attn(self.norm_cross(x), memory, p=p, rng=rng), p, rng)
        return x + dropout(self.ffn(self.norm_ffn(x), p, rng), p, rng)


class SeqEncoderModel(Module):
    """
    Compact pre-norm transformer: token and learned position embeddings, an encoder stack,
    an optional causal decoder stack with cross-attention, and an output projection tied
    to the token embeddings.
    """

    def __init__(self, config: ModelConfig, seed: int):
        if config.vocab_size < 1:
            raise ValueError("model.vocab_size must be set from the tokenizer")
        rng = np.random.default_rng(seed)
        self.config = config
        self.token_embedding = parameter(rng, (config.vocab_size, config.d_model), 0.02)
        self.position_embedding = parameter(rng, (config.max_tokens, config.d_model), 0.02)
        self.encoder = [EncoderLayer(rng, config) for _ in range(config.n_enc_layers)]
        self.encoder_norm = LayerNorm(config.d_model)
        self.decoder: list[DecoderLayer] = []
        if config.architecture == "encoder_decoder":
            self.decoder = [DecoderLayer(rng, config) for _ in range(config.n_dec_layers)]
            self.decoder_norm = LayerNorm(config.d_model)

    def _p(self, rng: np.random.Generator | None) -> float:
        return self.config.dropout if self.training and rng is not None else 0.0

    def embed(self, ids: Sequence[int]) -> Tensor:
        if len(ids) > self.config.max_tokens:
            raise PromptBudgetError(f"{len(ids)} tokens exceed model.max_tokens={self.config.max_tokens}")
        return embedding_lookup(self.token_embedding, ids) + embedding_lookup(self.position_embedding,
                                                                             np.arange(len(ids)))

    def encode(self, ids: Sequence[int], rng: np.random.Generator | None = None) -> Tensor:
        p = self._p(rng)
        x = dropout(self.embed(ids), p, rng)
        for layer in self.encoder:
            x = layer(x, p, rng)
        return self.encoder_norm(x)

    def decode(self, memory: Tensor, ids: Sequence[int], rng: np.random.Generator | None = None) -> Tensor:
        """Logits over the vocabulary for every decoder input position."""
        if not self.decoder:
            raise ValueError("encoder-only models have no decoder")
        p = self._p(rng)
        x = dropout(self.embed(ids), p, rng)
        for layer in self.decoder:
            x = layer(x, memory, p, rng)
        return matmul(self.decoder_norm(x), self.token_embedding.T)


def join_prompts(mup_tokens: Sequence[int], ktp_tokens: Sequence[int], sep_id: int) -> list[int]:
    return list(mup_tokens) + [sep_id] + list(ktp_tokens)


def encode_prompts(model: SeqEncoderModel, mup_tokens: Sequence[int], ktp_tokens: Sequence[int],
                   mask_positions: Sequence[int], sep_id: int = 4,
                   rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:

    """
    The encode_prompts function runs the encoder over [MUP; SEP; KTP] and mean-pools the rows at the mask positions.

    :param model: SeqEncoderModel: The backbone
    :param mup_tokens: Sequence[int]: MUP token ids
    :param ktp_tokens: Sequence[int]: KTP token ids
    :param mask_positions: Sequence[int]: Indices of the mask tokens inside the MUP
    :param sep_id: int: Id of the separator token
    :param rng: np.random.Generator | None: Dropout source; None disables dropout
    :return: The per-mask rows, the sequence embedding v_S and the full encoder memory
    """
    if not mask_positions:
        raise ValueError("at least one mask position is required")
    ids = join_prompts(mup_tokens, ktp_tokens, sep_id)
    if len(ids) > model.config.max_tokens:
        raise PromptBudgetError(f"prompt of {len(ids)} tokens exceeds {model.config.max_tokens}; re-budget the KTP")
    memory = model.encode(ids, rng)
    rows = memory[np.asarray(mask_positions, dtype=np.int64)]
    return rows, mean(rows, axis=0), memory


def _nll(logits: Tensor, labels: Sequence[int], pad_id: int) -> Tensor:
    keep = np.asarray([label != pad_id for label in labels])
    rows = np.arange(len(labels))[keep]
    picked = log_softmax(logits, axis=1)[(rows, np.asarray(labels)[keep])]
    return scalar_mul(sum_(picked), -1.0)


def plm_loss(model: SeqEncoderModel, mup_tokens: Sequence[int], ktp_tokens: Sequence[int],
             target_tokens: Sequence[int], sep_id: int = 4, pad_id: int = 0, memory: Tensor | None = None,
             rng: np.random.Generator | None = None) -> Tensor:

    """
    The plm_loss function is the teacher-forced auto-regressive negative log-likelihood of the target
    given the prompts, summed over target positions and excluding padding.

    :param model: SeqEncoderModel: An encoder-decoder backbone
    :param mup_tokens: Sequence[int]: MUP token ids
    :param ktp_tokens: Sequence[int]: KTP token ids
    :param target_tokens: Sequence[int]: BOS + canonical target + EOS
    :param memory: Tensor | None: Encoder output to reuse instead of encoding again
    :return: A scalar loss
    """
    if len([token for token in target_tokens if token != pad_id]) < 3:
        raise ValueError("target must hold BOS, at least one content token and EOS")
    if memory is None:
        memory = model.encode(join_prompts(mup_tokens, ktp_tokens, sep_id), rng)
    logits = model.decode(memory, target_tokens[:-1], rng)
    return _nll(logits, list(target_tokens[1:]), pad_id)


def masked_item_loss(model: SeqEncoderModel, mask_rows: Tensor, item_tokens: Sequence[int]) -> Tensor:

    """
    The masked_item_loss function is the encoder-only variant of the PLM loss: mask j predicts the
    j-th target item token through the tied output projection.

    :param model: SeqEncoderModel: The backbone
    :param mask_rows: Tensor: Encoder rows at the mask positions
    :param item_tokens: Sequence[int]: Target item tokens in canonical order
    :return: A scalar loss summed over the paired masks
    """
    if not item_tokens:
        raise ValueError("target must hold at least one item")
    count = min(mask_rows.shape[0], len(item_tokens))
    logits = matmul(mask_rows[:count], model.token_embedding.T)
    return _nll(logits, list(item_tokens[:count]), pad_id=-1)
