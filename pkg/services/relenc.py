import logging
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from database.models import BasketDataset
from errors import DegenerateGraphError, EmptyDatasetError
from services.seqenc import Linear
from services.tensor import (Module, Tensor, clip, diag, div, log_sigmoid, masked_fill, matmul, mul,
                             no_grad, parameter, relu, scalar_mul, sqrt, sum_)

logger = logging.getLogger(__name__)


class BipartiteGraph:
    """
    Basket-item incidence of a training split. Basket nodes are numbered in user order,
    then by position in the user's sequence; owners[b] is (user_id, position) of basket b.
    """

    def __init__(self, n_items: int, baskets: Sequence[frozenset[int]], owners: Sequence[tuple[str, int]]):
        self.n_items = n_items
        self.baskets = list(baskets)
        self.owners = list(owners)
        self.incidence = np.zeros((len(self.baskets), n_items))
        for b, items in enumerate(self.baskets):
            self.incidence[b, sorted(items)] = 1.0
        self.basket_degree = self.incidence.sum(axis=1)
        self.item_degree = self.incidence.sum(axis=0)
        self.nodes_of: dict[str, list[int]] = {}
        for b, (user_id, _) in enumerate(self.owners):
            self.nodes_of.setdefault(user_id, []).append(b)

    @property
    def n_baskets(self) -> int:
        return len(self.baskets)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(b, i) for b, items in enumerate(self.baskets) for i in sorted(items)]

    def normalized(self) -> np.ndarray:
        """R / sqrt(deg_b * deg_i); rows and columns of isolated nodes are zero."""
        scale = np.sqrt(np.outer(self.basket_degree, self.item_degree))
        return np.divide(self.incidence, scale, out=np.zeros_like(self.incidence), where=scale > 0)


def build_bipartite(dataset: BasketDataset) -> BipartiteGraph:
    baskets, owners = [], []
    for user_id in sorted(dataset.users):
        for position, basket in enumerate(dataset.baskets(user_id)):
            baskets.append(basket)
            owners.append((user_id, position))
    if not baskets:
        raise EmptyDatasetError("cannot build a basket-item graph without baskets")
    return BipartiteGraph(len(dataset.catalog), baskets, owners)


class BipartiteGCN(Module):
    """
    Message passing over the basket-item graph. Each layer sums symmetric-normalized neighbour
    messages, projects them with a shared weight, adds the node's own state and applies ReLU.
    Isolated nodes keep their layer-0 embedding.
    """

    def __init__(self, n_items: int, n_baskets: int, d2: int, n_layers: int, seed: int):
        rng = np.random.default_rng(seed)
        self.item_init = parameter(rng, (n_items, d2), 1.0 / math.sqrt(d2))
        self.basket_init = parameter(rng, (n_baskets, d2), 1.0 / math.sqrt(d2))
        self.layers = [Linear(rng, d2, d2, bias=False) for _ in range(n_layers)]

    def initial(self) -> tuple[Tensor, Tensor]:
        return self.item_init, self.basket_init

    def __call__(self, graph: BipartiteGraph) -> tuple[Tensor, Tensor]:
        if graph.n_items != self.item_init.shape[0] or graph.n_baskets != self.basket_init.shape[0]:
            raise ValueError("graph size does not match the embedding tables")
        adjacency = Tensor(graph.normalized())
        items, baskets = self.item_init, self.basket_init
        for layer in self.layers:
            items, baskets = (relu(layer(matmul(adjacency.T, baskets)) + items),
                              relu(layer(matmul(adjacency, items)) + baskets))
        items = _keep_isolated(items, self.item_init, graph.item_degree)
        baskets = _keep_isolated(baskets, self.basket_init, graph.basket_degree)
        return items, baskets


def _keep_isolated(h: Tensor, h0: Tensor, degree: np.ndarray) -> Tensor:
    isolated = degree == 0
    if not isolated.any():
        return h
    connected = np.repeat((~isolated)[:, None], h.shape[1], axis=1).astype(h.data.dtype)
    return mul(h, Tensor(connected)) + mul(h0, Tensor(1.0 - connected))


def gcn_embed(graph: BipartiteGraph, n_layers: int, d2: int, seed: int) -> tuple[Tensor, Tensor]:
    """Item and basket embeddings of a freshly initialized GCN."""
    return BipartiteGCN(graph.n_items, graph.n_baskets, d2, n_layers, seed)(graph)


class ExpertBank(Module):

    def __init__(self, n_experts: int, d2: int, d3: int, seed: int):
        rng = np.random.default_rng(seed)
        self.experts = [parameter(rng, (d2, d3), 1.0 / math.sqrt(d2)) for _ in range(n_experts)]


def moe_similarity(item_embeddings: Tensor, experts: ExpertBank | Sequence[Tensor]) -> Tensor:

    """
    The moe_similarity function averages per-expert cosine similarities mapped from [-1, 1] to [0, 1].
    A zero projection has cosine 0 with everything, and the diagonal is fixed at 1.

    :param item_embeddings: Tensor: |I| x d2 item embeddings
    :param experts: ExpertBank | Sequence[Tensor]: d2 x d3 projections
    :return: The |I| x |I| similarity matrix
    """
    weights = experts.experts if isinstance(experts, ExpertBank) else list(experts)
    if not weights:
        raise ValueError("at least one expert is required")
    n = item_embeddings.shape[0]
    eye = np.eye(n, dtype=bool)
    total = None
    for weight in weights:
        z = matmul(item_embeddings, weight)
        squared = sum_(mul(z, z), axis=1)
        zero = Tensor((squared.data == 0).astype(squared.data.dtype))
        inverse = div(Tensor(np.ones(n)), sqrt(squared + zero))
        unit = matmul(diag(inverse), z)
        cosine = clip(masked_fill(matmul(unit, unit.T), eye, 1.0), -1.0, 1.0)
        mapped = scalar_mul(cosine + 1.0, 0.5)
        total = mapped if total is None else total + mapped
    return scalar_mul(total, 1.0 / len(weights))


class HypergraphAdjacency:
    """
    Top-k item hypergraph. Column j is the hyperedge of item j: its k most similar other items
    plus j itself. mask is a constant 0/1 matrix; weights = similarity * mask keeps the gradient
    path to the similarity values.
    """

    def __init__(self, mask: np.ndarray, weights: Tensor, degree_mode: str = "weighted"):
        if degree_mode not in ("weighted", "count"):
            raise ValueError(f"unknown degree mode {degree_mode!r}")
        self.mask = mask
        self.weights = weights
        self.degree_mode = degree_mode

    @property
    def k(self) -> int:
        return int(self.mask[:, 0].sum()) - 1

    def with_similarity(self, similarity: Tensor) -> "HypergraphAdjacency":
        """Same hyperedges, weights taken from a new similarity matrix."""
        if similarity.shape != self.mask.shape:
            raise ValueError("similarity shape does not match the hyperedge mask")
        return HypergraphAdjacency(self.mask, mul(similarity, Tensor(self.mask)), self.degree_mode)

    def vertex_degree(self) -> Tensor:
        if self.degree_mode == "count":
            return Tensor(self.mask.sum(axis=1))
        return sum_(self.weights, axis=1)

    def edge_degree(self) -> Tensor:
        if self.degree_mode == "count":
            return Tensor(self.mask.sum(axis=0))
        return sum_(self.weights, axis=0)


def build_hypergraph(similarity: Tensor, k: int, degree_mode: str = "weighted") -> HypergraphAdjacency:

    """
    The build_hypergraph function keeps, for each item j, the k items i != j with the largest
    similarity (ties broken by smaller index) and always adds j to its own hyperedge.
    Selection does not take part in differentiation.

    :param similarity: Tensor: |I| x |I| similarity
    :param k: int: Neighbours per hyperedge, 1 <= k < |I|
    :param degree_mode: str: "weighted" degrees sum the kept weights, "count" degrees count them
    :return: A HypergraphAdjacency
    """
    n = similarity.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    values = similarity.data
    mask = np.zeros((n, n))
    indices = np.arange(n)
    for j in range(n):
        others = indices[indices != j]
        order = np.lexsort((others, -values[others, j]))
        mask[others[order[:k]], j] = 1.0
        mask[j, j] = 1.0
    return HypergraphAdjacency(mask, mul(similarity, Tensor(mask)), degree_mode)


def propagation_operator(adjacency: HypergraphAdjacency) -> Tensor:
    """diag(1/D_v) M diag(1/D_e) M^T, whose rows sum to 1."""
    vertex, edge = adjacency.vertex_degree(), adjacency.edge_degree()
    if (vertex.data <= 0).any() or (edge.data <= 0).any():
        raise DegenerateGraphError("hypergraph has a non-positive vertex or hyperedge degree")
    n = vertex.shape[0]
    inv_vertex = diag(div(Tensor(np.ones(n)), vertex))
    inv_edge = diag(div(Tensor(np.ones(n)), edge))
    m = adjacency.weights
    return matmul(matmul(matmul(inv_vertex, m), inv_edge), m.T)


class HypergraphConv(Module):

    def __init__(self, d2: int, n_layers: int, seed: int):
        rng = np.random.default_rng(seed)
        self.layers = [Linear(rng, d2, d2) for _ in range(n_layers)]

    def __call__(self, adjacency: HypergraphAdjacency, h0: Tensor) -> Tensor:
        return hypergraph_conv(adjacency, h0, len(self.layers), self)


def hypergraph_conv(adjacency: HypergraphAdjacency, h0: Tensor, n_layers: int,
                    conv: HypergraphConv | None = None) -> Tensor:

    """
    The hypergraph_conv function applies n_layers of H <- FFN(P H). Without a conv module the FFN
    is the identity, which is useful for checking the propagation alone.

    :param adjacency: HypergraphAdjacency: The item hypergraph
    :param h0: Tensor: |I| x d2 input embeddings
    :param n_layers: int: Number of propagation steps
    :param conv: HypergraphConv | None: Per-layer Linear + ReLU
    :return: The refined |I| x d2 item embeddings
    """
    if conv is not None and len(conv.layers) < n_layers:
        raise ValueError(f"conv has {len(conv.layers)} layers, {n_layers} requested")
    operator = propagation_operator(adjacency)
    h = h0
    for layer in range(n_layers):
        h = matmul(operator, h)
        if conv is not None:
            h = relu(conv.layers[layer](h))
    return h


def sample_pos_neg(basket: frozenset[int] | set[int], catalog_size: int, rng: np.random.Generator,
                   mode: str = "BI", anchor: int | None = None) -> tuple[int | None, int, int] | None:

    """
    The sample_pos_neg function draws a positive from the basket and a negative from its complement,
    both uniformly. In "II" mode the anchor is also drawn from the basket (unless given) and the
    positive excludes it; a basket with fewer than two items yields None.

    :param basket: frozenset[int]: Item indices of one basket
    :param catalog_size: int: Number of catalog items
    :param rng: np.random.Generator: Sampling source
    :param mode: str: "BI" for basket-item or "II" for item-item
    :param anchor: int | None: Fixed anchor for "II" mode
    :return: (anchor, positive, negative); anchor is None in "BI" mode
    """
    if mode not in ("BI", "II"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    members = sorted(basket)
    if not members:
        raise ValueError("cannot sample from an empty basket")
    if len(members) >= catalog_size:
        raise ValueError("the basket covers the whole catalog, no negative exists")
    negative = int(rng.integers(0, catalog_size))
    while negative in basket:
        negative = int(rng.integers(0, catalog_size))
    if mode == "BI":
        return None, members[int(rng.integers(0, len(members)))], negative
    if len(members) < 2:
        return None
    if anchor is None:
        anchor = members[int(rng.integers(0, len(members)))]
    elif anchor not in basket:
        raise ValueError(f"anchor {anchor} is not in the basket")
    others = [item for item in members if item != anchor]
    return anchor, others[int(rng.integers(0, len(others)))], negative


def loss_bi(basket_vectors: Tensor, positive_vectors: Tensor, negative_vectors: Tensor) -> Tensor:
    """-sum log sigmoid(<v_b, v_pos> - <v_b, v_neg>) over the rows of the three matrices."""
    margin = sum_(mul(basket_vectors, positive_vectors) - mul(basket_vectors, negative_vectors), axis=1)
    return scalar_mul(sum_(log_sigmoid(margin)), -1.0)


def loss_ii(similarity: Tensor, samples: Sequence[Sequence[tuple[int, int, int]]]) -> Tensor | None:

    """
    The loss_ii function pushes pi[i, pos] above pi[i, neg] for every sampled anchor.
    Each basket contributes the mean over its anchors; the result is summed over baskets.

    :param similarity: Tensor: |I| x |I| similarity
    :param samples: Sequence of per-basket (anchor, positive, negative) triples
    :return: A scalar loss, or None when no basket has a sample
    """
    anchors, positives, negatives, weights = [], [], [], []
    for triples in samples:
        for anchor, positive, negative in triples:
            anchors.append(anchor)
            positives.append(positive)
            negatives.append(negative)
            weights.append(1.0 / len(triples))
    if not anchors:
        return None
    anchors = np.asarray(anchors)
    margin = similarity[(anchors, np.asarray(positives))] - similarity[(anchors, np.asarray(negatives))]
    return scalar_mul(sum_(mul(Tensor(np.asarray(weights)), log_sigmoid(margin))), -1.0)


def dump_similarity(similarity: Tensor, adjacency: HypergraphAdjacency, catalog: Sequence[str], path: Path) -> None:
    """Write pi and the masked M as TSV rows "item_i item_j pi m" for offline inspection."""
    pi, weights = similarity.data, adjacency.weights.data
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("item_i\titem_j\tpi\tm\n")
        for i, row in enumerate(catalog):
            for j, column in enumerate(catalog):
                fh.write(f"{row}\t{column}\t{pi[i, j]:.6g}\t{weights[i, j]:.6g}\n")
    logger.info("wrote %dx%d similarity dump to %s", len(catalog), len(catalog), path)


def refine_items(item_embeddings: Tensor, experts: ExpertBank, conv: HypergraphConv, k: int,
                 degree_mode: str, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor, HypergraphAdjacency]:

    """
    The refine_items function runs similarity, hypergraph selection and convolution in one go.
    A precomputed mask reuses earlier hyperedges with the current similarity values.

    :return: The refined embeddings, the similarity matrix and the adjacency used
    """
    similarity = moe_similarity(item_embeddings, experts)
    if mask is None:
        adjacency = build_hypergraph(similarity, k, degree_mode)
    else:
        adjacency = HypergraphAdjacency(mask, mul(similarity, Tensor(mask)), degree_mode)
    return conv(adjacency, item_embeddings), similarity, adjacency


def select_hyperedges(item_embeddings: Tensor, experts: ExpertBank, k: int) -> np.ndarray:
    """The top-k mask for the current parameters, computed without recording a graph."""
    with no_grad():
        return build_hypergraph(moe_similarity(item_embeddings, experts), k).mask


