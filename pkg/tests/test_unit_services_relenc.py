import math
import unittest

import numpy as np

from database.models import Basket, BasketDataset
from errors import DegenerateGraphError, EmptyDatasetError
from services.relenc import (BipartiteGCN, BipartiteGraph, ExpertBank, HypergraphAdjacency, HypergraphConv,
                             build_bipartite, build_hypergraph, dump_similarity, gcn_embed, hypergraph_conv,
                             loss_bi, loss_ii, moe_similarity, propagation_operator, refine_items, sample_pos_neg,
                             select_hyperedges)
from services.tensor import Tensor, default_dtype, grad_check, mul, sum_

NEG_LOG_SIGMOID_ONE = -math.log(1.0 / (1.0 + math.exp(-1.0)))


def readout(t: Tensor) -> Tensor:
    return sum_(mul(t, Tensor(np.random.default_rng(3).normal(size=t.shape))))


def random_similarity(rng: np.random.Generator, n: int) -> Tensor:
    upper = rng.uniform(0.0, 1.0, (n, n))
    values = (upper + upper.T) / 2.0
    np.fill_diagonal(values, 1.0)
    return Tensor(values)


def two_stage_oracle(adjacency: HypergraphAdjacency, h: np.ndarray) -> np.ndarray:
    m = adjacency.weights.data
    n = m.shape[0]
    edges = np.zeros_like(h)
    for j in range(n):
        edges[j] = sum(m[i, j] * h[i] for i in range(n)) / m[:, j].sum()
    out = np.zeros_like(h)
    for i in range(n):
        out[i] = sum(m[i, j] * edges[j] for j in range(n)) / m[i, :].sum()
    return out


class TestBipartite(unittest.TestCase):

    def setUp(self):
        self.enterContext(default_dtype(np.float64))

    def test_two_baskets(self):
        graph = BipartiteGraph(3, [frozenset({0, 1}), frozenset({1, 2})], [("u", 0), ("u", 1)])
        self.assertEqual(len(graph.edges), 4)
        self.assertEqual(graph.item_degree[1], 2)
        self.assertEqual(graph.nodes_of, {"u": [0, 1]})

    def test_build_from_dataset(self):
        dataset = BasketDataset(catalog=("a", "b", "c"), sequences={
            "u2": (Basket(timestamp=1, items=frozenset({2})),),
            "u1": (Basket(timestamp=1, items=frozenset({0, 1})), Basket(timestamp=2, items=frozenset({1}))),
        })
        graph = build_bipartite(dataset)
        self.assertEqual(graph.n_baskets, 3)
        self.assertEqual(graph.owners, [("u1", 0), ("u1", 1), ("u2", 0)])

    def test_empty_dataset(self):
        with self.assertRaises(EmptyDatasetError):
            build_bipartite(BasketDataset(catalog=("a",), sequences={}))

    def test_zero_layers_return_initialization(self):
        graph = BipartiteGraph(3, [frozenset({0, 1})], [("u", 0)])
        gcn = BipartiteGCN(3, 1, 4, 0, seed=2)
        items, baskets = gcn(graph)
        np.testing.assert_array_equal(items.data, gcn.item_init.data)
        np.testing.assert_array_equal(baskets.data, gcn.basket_init.data)

    def test_symmetric_items_stay_identical(self):
        graph = BipartiteGraph(3, [frozenset({0, 1})], [("u", 0)])
        gcn = BipartiteGCN(3, 1, 4, 2, seed=2)
        gcn.item_init.data[1] = gcn.item_init.data[0]
        items, _ = gcn(graph)
        np.testing.assert_allclose(items.data[0], items.data[1])

    def test_isolated_item_keeps_initial_embedding(self):
        graph = BipartiteGraph(3, [frozenset({0, 1})], [("u", 0)])
        gcn = BipartiteGCN(3, 1, 4, 2, seed=2)
        items, _ = gcn(graph)
        np.testing.assert_array_equal(items.data[2], gcn.item_init.data[2])

    def test_gcn_embed_is_seeded(self):
        graph = BipartiteGraph(3, [frozenset({0, 1}), frozenset({2})], [("u", 0), ("u", 1)])
        first, _ = gcn_embed(graph, 2, 4, seed=9)
        second, _ = gcn_embed(graph, 2, 4, seed=9)
        np.testing.assert_array_equal(first.data, second.data)
        self.assertTrue(np.isfinite(first.data).all())


class TestSimilarity(unittest.TestCase):

    def setUp(self):
        self.enterContext(default_dtype(np.float64))

    def test_invariants_over_random_banks(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            items = Tensor(rng.normal(size=(6, 4)))
            similarity = moe_similarity(items, ExpertBank(3, 4, 3, seed=trial)).data
            np.testing.assert_allclose(similarity, similarity.T, atol=1e-6)
            np.testing.assert_allclose(np.diag(similarity), np.ones(6), atol=1e-6)
            self.assertTrue(((similarity >= 0.0) & (similarity <= 1.0)).all())

    def test_opposite_vectors(self):
        similarity = moe_similarity(Tensor([[1.0, 0.0], [-1.0, 0.0]]), [Tensor(np.eye(2))])
        self.assertAlmostEqual(float(similarity.data[0, 1]), 0.0)

    def test_zero_projection_is_neutral(self):
        similarity = moe_similarity(Tensor([[0.0, 0.0], [1.0, 0.0]]), [Tensor(np.eye(2))])
        np.testing.assert_allclose(similarity.data, [[1.0, 0.5], [0.5, 1.0]])

    def test_experts_are_averaged(self):
        items = Tensor([[1.0, 0.0], [-0.6, 0.8]])
        shear = Tensor([[1.0, 0.0], [1.5, 1.0]])
        self.assertAlmostEqual(float(moe_similarity(items, [Tensor(np.eye(2))]).data[0, 1]), 0.2)
        self.assertAlmostEqual(float(moe_similarity(items, [shear]).data[0, 1]), 0.8)
        self.assertAlmostEqual(float(moe_similarity(items, [Tensor(np.eye(2)), shear]).data[0, 1]), 0.5)

    def test_requires_experts(self):
        with self.assertRaises(ValueError):
            moe_similarity(Tensor(np.ones((2, 2))), [])


class TestHypergraph(unittest.TestCase):

    def setUp(self):
        self.enterContext(default_dtype(np.float64))
        self.similarity = Tensor([[1.0, 0.9, 0.1, 0.2],
                                  [0.9, 1.0, 0.3, 0.4],
                                  [0.1, 0.3, 1.0, 0.5],
                                  [0.2, 0.4, 0.5, 1.0]])

    def test_top1_column(self):
        adjacency = build_hypergraph(self.similarity, 1)
        np.testing.assert_allclose(adjacency.weights.data[:, 0], [1.0, 0.9, 0.0, 0.0])
        self.assertEqual(adjacency.k, 1)

    def test_ties_keep_smaller_index(self):
        values = np.array([[1.0, 0.3, 0.5, 0.5], [0.3, 1.0, 0.2, 0.2], [0.5, 0.2, 1.0, 0.1], [0.5, 0.2, 0.1, 1.0]])
        adjacency = build_hypergraph(Tensor(values), 1)
        np.testing.assert_array_equal(adjacency.mask[:, 0], [1.0, 0.0, 1.0, 0.0])

    def test_full_k_keeps_everything(self):
        adjacency = build_hypergraph(self.similarity, 3)
        np.testing.assert_array_equal(adjacency.weights.data, self.similarity.data)

    def test_k_out_of_range(self):
        for k in (0, 4):
            with self.assertRaises(ValueError):
                build_hypergraph(self.similarity, k)

    def test_columns_and_degrees(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(3, 9))
            k = int(rng.integers(1, n))
            adjacency = build_hypergraph(random_similarity(rng, n), k)
            weights = adjacency.weights.data
            self.assertTrue((np.diag(weights) > 0).all())
            self.assertTrue(((weights > 0).sum(axis=0) <= k + 1).all())
            np.testing.assert_allclose(adjacency.vertex_degree().data, weights.sum(axis=1))
            np.testing.assert_allclose(adjacency.edge_degree().data, weights.sum(axis=0))

    def test_count_degrees(self):
        adjacency = build_hypergraph(self.similarity, 2, degree_mode="count")
        np.testing.assert_array_equal(adjacency.edge_degree().data, [3.0, 3.0, 3.0, 3.0])
        with self.assertRaises(ValueError):
            HypergraphAdjacency(adjacency.mask, adjacency.weights, degree_mode="median")

    def test_propagation_is_row_stochastic(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            adjacency = build_hypergraph(random_similarity(rng, n), int(rng.integers(1, n)))
            rows = propagation_operator(adjacency).data.sum(axis=1)
            self.assertLess(np.abs(rows - 1.0).max(), 1e-6)

    def test_zero_degree_is_an_error(self):
        adjacency = HypergraphAdjacency(np.eye(2), Tensor(np.zeros((2, 2))))
        with self.assertRaises(DegenerateGraphError) as caught:
            propagation_operator(adjacency)
        self.assertEqual(caught.exception.exit_code, 3)

    def test_matches_two_stage_oracle(self):
        rng = np.random.default_rng(2)
        for n in range(2, 7):
            adjacency = build_hypergraph(random_similarity(rng, n), max(1, n // 2))
            h0 = rng.normal(size=(n, 3))
            out = hypergraph_conv(adjacency, Tensor(h0), 1)
            np.testing.assert_allclose(out.data, two_stage_oracle(adjacency, h0), atol=1e-9)

    def test_zero_layers_and_constant_input(self):
        adjacency = build_hypergraph(self.similarity, 2)
        h0 = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        np.testing.assert_array_equal(hypergraph_conv(adjacency, h0, 0).data, h0.data)
        constant = Tensor(np.full((4, 3), 0.7))
        np.testing.assert_allclose(hypergraph_conv(adjacency, constant, 3).data, constant.data, atol=1e-12)

    def test_conv_needs_enough_layers(self):
        adjacency = build_hypergraph(self.similarity, 2)
        with self.assertRaises(ValueError):
            hypergraph_conv(adjacency, Tensor(np.ones((4, 3))), 2, HypergraphConv(3, 1, seed=0))

    def test_with_similarity_keeps_mask(self):
        adjacency = build_hypergraph(self.similarity, 1)
        scaled = adjacency.with_similarity(Tensor(self.similarity.data * 0.5))
        np.testing.assert_array_equal(scaled.mask, adjacency.mask)
        np.testing.assert_allclose(scaled.weights.data, adjacency.weights.data * 0.5)

    def test_dump_similarity(self):
        import tempfile
        from pathlib import Path
        adjacency = build_hypergraph(self.similarity, 1)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "pi.tsv"
            dump_similarity(self.similarity, adjacency, ["a", "b", "c", "d"], path)
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "item_i\titem_j\tpi\tm")
        self.assertEqual(len(lines), 17)
        self.assertEqual(lines[3], "a\tc\t0.1\t0")


class TestSampling(unittest.TestCase):

    def test_forced_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            anchor, positive, negative = sample_pos_neg(frozenset({0}), 3, rng)
            self.assertIsNone(anchor)
            self.assertEqual(positive, 0)
            self.assertIn(negative, (1, 2))

    def test_item_item_singleton_is_skipped(self):
        self.assertIsNone(sample_pos_neg(frozenset({2}), 5, np.random.default_rng(0), mode="II"))

    def test_item_item_positive_differs_from_anchor(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            anchor, positive, negative = sample_pos_neg(frozenset({1, 2, 3}), 6, rng, mode="II")
            self.assertNotEqual(anchor, positive)
            self.assertIn(positive, (1, 2, 3))
            self.assertNotIn(negative, (1, 2, 3))
        self.assertEqual(sample_pos_neg(frozenset({1, 2}), 6, rng, mode="II", anchor=2)[:2], (2, 1))

    def test_invalid_requests(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(ValueError):
            sample_pos_neg(frozenset(), 3, rng)
        with self.assertRaises(ValueError):
            sample_pos_neg(frozenset({0, 1}), 2, rng)
        with self.assertRaises(ValueError):
            sample_pos_neg(frozenset({0, 1}), 4, rng, mode="XY")
        with self.assertRaises(ValueError):
            sample_pos_neg(frozenset({0, 1}), 4, rng, mode="II", anchor=3)

    def test_uniform_draws(self):
        rng = np.random.default_rng(2024)
        draws = 10_000
        positives, negatives = np.zeros(8), np.zeros(8)
        for _ in range(draws):
            _, positive, negative = sample_pos_neg(frozenset({1, 3, 4}), 8, rng)
            positives[positive] += 1
            negatives[negative] += 1
        for counts, support in ((positives, [1, 3, 4]), (negatives, [0, 2, 5, 6, 7])):
            p = 1.0 / len(support)
            sigma = math.sqrt(draws * p * (1.0 - p))
            self.assertEqual(counts[[i for i in range(8) if i not in support]].sum(), 0)
            for item in support:
                self.assertLess(abs(counts[item] - draws * p), 4 * sigma)


class TestRankingLosses(unittest.TestCase):

    def setUp(self):
        self.enterContext(default_dtype(np.float64))

    def test_loss_bi_values(self):
        same = Tensor(np.ones((2, 3)))
        self.assertAlmostEqual(loss_bi(same, same, same).item(), 2 * math.log(2.0))
        value = loss_bi(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item()
        self.assertAlmostEqual(value, NEG_LOG_SIGMOID_ONE, places=6)
        self.assertAlmostEqual(value, 0.3133, places=4)
        far = loss_bi(Tensor([[50.0]]), Tensor([[50.0]]), Tensor([[-50.0]])).item()
        self.assertLess(far, 1e-12)

    def test_loss_ii_values(self):
        similarity = Tensor([[1.0, 1.0, 0.0], [1.0, 1.0, 0.5], [0.0, 0.5, 1.0]])
        single = loss_ii(similarity, [[(0, 1, 2)]]).item()
        self.assertAlmostEqual(single, NEG_LOG_SIGMOID_ONE, places=6)
        tie = loss_ii(Tensor(np.full((3, 3), 0.5)), [[(0, 1, 2)]]).item()
        self.assertAlmostEqual(tie, math.log(2.0))
        pair = loss_ii(similarity, [[(0, 1, 2), (1, 0, 2)]]).item()
        second = -math.log(1.0 / (1.0 + math.exp(-0.5)))
        self.assertAlmostEqual(pair, (NEG_LOG_SIGMOID_ONE + second) / 2.0)
        self.assertAlmostEqual(loss_ii(similarity, [[(0, 1, 2)], [(0, 1, 2)]]).item(), 2 * single)
        self.assertIsNone(loss_ii(similarity, [[], []]))


class TestRelationGradients(unittest.TestCase):

    def setUp(self):
        self.enterContext(default_dtype(np.float64))
        self.graph = BipartiteGraph(5, [frozenset({0, 1}), frozenset({1, 2, 3}), frozenset({3, 4})],
                                    [("u", 0), ("u", 1), ("v", 0)])
        self.gcn = BipartiteGCN(5, 3, 4, 1, seed=1)
        self.experts = ExpertBank(2, 4, 3, seed=2)
        self.conv = HypergraphConv(4, 1, seed=3)

    def assertGradOk(self, f, x):
        report = grad_check(f, x, tol=1e-4)
        self.assertTrue(report.passed, report.max_rel_error)

    def test_loss_bi_through_gcn(self):
        def f(_):
            items, baskets = self.gcn(self.graph)
            return loss_bi(baskets, items[np.array([1, 2, 4])], items[np.array([3, 0, 1])])
        self.assertGradOk(f, self.gcn.item_init)
        self.assertGradOk(f, self.gcn.layers[0].weight)

    def test_loss_ii_through_experts_and_gcn(self):
        def f(_):
            items, _ = self.gcn(self.graph)
            return loss_ii(moe_similarity(items, self.experts), [[(1, 2, 4), (2, 3, 0)], [(3, 4, 1)]])
        self.assertGradOk(f, self.experts.experts[0])
        self.assertGradOk(f, self.gcn.basket_init)

    def test_conv_readout_through_experts(self):
        items, _ = self.gcn(self.graph)
        mask = select_hyperedges(items, self.experts, 2)

        def f(_):
            refined, _, _ = refine_items(self.gcn(self.graph)[0], self.experts, self.conv, 2, "weighted", mask)
            return readout(refined)
        self.assertGradOk(f, self.experts.experts[1])
        self.assertGradOk(f, self.gcn.item_init)
        self.assertGradOk(f, self.conv.layers[0].weight)


if __name__ == '__main__':
    unittest.main()
