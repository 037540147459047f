import logging
import math
from collections.abc import Iterable, Mapping

import numpy as np

from errors import TrainingDivergenceError
from services.seqenc import Linear
from services.tensor import (Module, Tensor, clip, concat, log, matmul, mul, parameter, reshape, scalar_mul,
                             sigmoid, sum_, zeros_parameter)

logger = logging.getLogger(__name__)

PROBABILITY_EPS = 1e-7


class GatingParams(Module):
    """
    Frequency-based gating head. W_p projects the sequence embedding into the item space,
    W1 scores [user ; item] content, and W2 (full or diagonal) with b2 turns the user's
    frequency vector into per-item gates.
    """

    def __init__(self, d_model: int, d2: int, n_items: int, seed: int, diagonal: bool = False):
        rng = np.random.default_rng(seed)
        self.d2 = d2
        self.diagonal = diagonal
        self.projection = Linear(rng, d_model, d2, bias=False)
        self.content = parameter(rng, (2 * d2, 1), 1.0 / math.sqrt(2 * d2))
        shape = (n_items,) if diagonal else (n_items, n_items)
        self.gate_weight = parameter(rng, shape, 0.01)
        self.gate_bias = zeros_parameter((n_items,))

    def gate(self, frequency: Tensor) -> Tensor:
        if self.diagonal:
            return mul(self.gate_weight, frequency) + self.gate_bias
        return matmul(self.gate_weight, frequency) + self.gate_bias


def fbg_score(sequence_embedding: Tensor, item_embeddings: Tensor, frequency: np.ndarray, params: GatingParams,
              use_gate: bool = True) -> Tensor:

    """
    The fbg_score function scores every catalog item for one user.

        content_i = [W_p v_S ; v'_i] W1
        alpha     = W2 gamma + b2
        y_i       = (content_i * (1 - beta_i * alpha_i) + gamma_i * alpha_i) / sqrt(2 * d2)

    beta_i is 1 for items the user bought before. Without the gate, y_i = <W_p v_S, v'_i>.

    :param sequence_embedding: Tensor: v_S of size d_model
    :param item_embeddings: Tensor: |I| x d2 refined item embeddings
    :param frequency: np.ndarray: The user's normalized frequency vector gamma
    :param params: GatingParams: Head parameters
    :param use_gate: bool: False for the ablation without gating
    :return: Raw scores of size |I|
    """
    n = item_embeddings.shape[0]
    if frequency.shape != (n,):
        raise ValueError(f"frequency vector of shape {frequency.shape} for {n} items")
    user = params.projection(sequence_embedding)
    if not use_gate:
        return matmul(item_embeddings, user)
    gamma = Tensor(frequency)
    repeated = matmul(Tensor(np.ones((n, 1))), reshape(user, (1, params.d2)))
    content = reshape(matmul(concat([repeated, item_embeddings], axis=1), params.content), (n,))
    alpha = params.gate(gamma)
    beta = Tensor((frequency > 0).astype(np.float64))
    gated = mul(content, Tensor(np.ones(n)) - mul(beta, alpha)) + mul(gamma, alpha)
    return scalar_mul(gated, 1.0 / math.sqrt(2 * params.d2))


def rec_loss(scores: Tensor, positives: Iterable[int]) -> Tensor:

    """
    The rec_loss function is binary cross-entropy with the positive and negative terms each
    averaged over their own count. Probabilities are clipped to [1e-7, 1 - 1e-7].

    :param scores: Tensor: Raw scores of size |I|
    :param positives: Iterable[int]: Item indices of the target basket
    :return: A scalar loss
    """
    n = scores.shape[0]
    target = np.zeros(n)
    target[sorted(set(positives))] = 1.0
    n_pos = int(target.sum())
    if n_pos == 0:
        raise ValueError("the target basket is empty")
    probability = clip(sigmoid(scores), PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)
    loss = scalar_mul(sum_(mul(Tensor(target), log(probability))), -1.0 / n_pos)
    if n_pos < n:
        negative = log(Tensor(np.ones(n)) - probability)
        loss = loss + scalar_mul(sum_(mul(Tensor(1.0 - target), negative)), -1.0 / (n - n_pos))
    return loss


def joint_loss(components: Mapping[str, Tensor | None], weights: Mapping[str, float],
               epoch: int | None = None, step: int | None = None) -> Tensor:

    """
    The joint_loss function is the weighted sum of the loss components. A component that is None
    was skipped for this batch. Non-finite components stop training with the offending names.

    :param components: Mapping[str, Tensor | None]: plm, rec, bi, ii
    :param weights: Mapping[str, float]: Weight per component
    :return: A scalar loss
    """
    bad = [name for name, value in components.items() if value is not None and not np.isfinite(value.data).all()]
    if bad:
        raise TrainingDivergenceError(bad, epoch, step)
    total = None
    for name, value in components.items():
        if value is None or weights.get(name, 1.0) == 0.0:
            continue
        term = scalar_mul(value, weights.get(name, 1.0))
        total = term if total is None else total + term
    if total is None:
        raise ValueError("every loss component was skipped")
    return total


def recommend_topn(scores: np.ndarray, n: int, exclude: Iterable[int] = ()) -> list[int]:
    """The n highest-scoring items, ties broken by smaller index, excluded items skipped."""
    scores = np.asarray(scores)
    excluded = set(exclude)
    if n < 1 or n > len(scores) - len(excluded & set(range(len(scores)))):
        raise ValueError(f"cannot recommend {n} of {len(scores)} items with {len(excluded)} excluded")
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(i) for i in order if int(i) not in excluded][:n]
