import math
import unittest

import numpy as np

from errors import TrainingDivergenceError
from services.head import GatingParams, fbg_score, joint_loss, rec_loss, recommend_topn
from services.tensor import Tensor, backward, default_dtype, grad_check, mul, sum_


class TestFrequencyGating(unittest.TestCase):

    def setUp(self):
        self.enterContext(default_dtype(np.float64))
        rng = np.random.default_rng(4)
        self.params = GatingParams(d_model=6, d2=4, n_items=5, seed=1)
        self.v_s = Tensor(rng.normal(size=6))
        self.items = Tensor(rng.normal(size=(5, 4)))

    def content(self, params: GatingParams) -> np.ndarray:
        user = self.v_s.data @ params.projection.weight.data
        stacked = np.hstack([np.tile(user, (5, 1)), self.items.data])
        return (stacked @ params.content.data).ravel()

    def test_cold_user_scores_content_only(self):
        scores = fbg_score(self.v_s, self.items, np.zeros(5), self.params)
        np.testing.assert_allclose(scores.data, self.content(self.params) / math.sqrt(8.0))

    def test_gate_can_replace_content(self):
        params = GatingParams(d_model=6, d2=4, n_items=5, seed=1, diagonal=True)
        params.gate_weight.data[:] = 0.0
        params.gate_bias.data[:] = 1.0
        frequency = np.array([0.0, 0.6, 0.0, 0.4, 0.0])
        scores = fbg_score(self.v_s, self.items, frequency, params).data
        content = self.content(params) / math.sqrt(8.0)
        np.testing.assert_allclose(scores[[1, 3]], frequency[[1, 3]] / math.sqrt(8.0))
        np.testing.assert_allclose(scores[[0, 2, 4]], content[[0, 2, 4]] + 0.0)

    def test_scale_for_wide_items(self):
        params = GatingParams(d_model=4, d2=128, n_items=1, seed=0, diagonal=True)
        params.gate_weight.data[:] = 0.0
        params.gate_bias.data[:] = 1.0
        scores = fbg_score(Tensor(np.ones(4)), Tensor(np.ones((1, 128))), np.array([0.5]), params)
        self.assertAlmostEqual(scores.item(), 0.5 / 16.0)

    def test_without_gate(self):
        scores = fbg_score(self.v_s, self.items, np.ones(5) / 5, self.params, use_gate=False)
        user = self.v_s.data @ self.params.projection.weight.data
        np.testing.assert_allclose(scores.data, self.items.data @ user)

    def test_frequency_shape_checked(self):
        with self.assertRaises(ValueError):
            fbg_score(self.v_s, self.items, np.zeros(4), self.params)

    def test_gradients(self):
        frequency = np.array([0.0, 0.5, 0.0, 0.25, 0.25])
        weights = Tensor(np.random.default_rng(0).normal(size=5))

        def readout(_):
            return sum_(mul(fbg_score(self.v_s, self.items, frequency, self.params), weights))

        def loss(_):
            return rec_loss(fbg_score(self.v_s, self.items, frequency, self.params), {1, 2})
        for tensor in (self.params.gate_weight, self.params.gate_bias, self.params.content,
                       self.params.projection.weight):
            self.assertTrue(grad_check(readout, tensor).passed)
            self.assertTrue(grad_check(loss, tensor).passed)
        items = Tensor(self.items.data, requires_grad=True)
        report = grad_check(lambda x: rec_loss(fbg_score(self.v_s, x, frequency, self.params), {0}), items)
        self.assertTrue(report.passed, report.max_rel_error)


class TestRecLoss(unittest.TestCase):

    def setUp(self):
        self.enterContext(default_dtype(np.float64))

    def test_zero_scores(self):
        self.assertAlmostEqual(rec_loss(Tensor(np.zeros(6)), {0, 3}).item(), 2 * math.log(2.0))

    def test_hand_value(self):
        logit = math.log(9.0)
        loss = rec_loss(Tensor([logit, -logit, -logit]), {0}).item()
        self.assertAlmostEqual(loss, -2 * math.log(0.9), places=9)
        self.assertAlmostEqual(loss, 0.2107, places=4)

    def test_perfect_scores_approach_zero(self):
        loss = rec_loss(Tensor([30.0, -30.0, 30.0]), {0, 2}).item()
        self.assertLess(loss, 1e-6)

    def test_clipped_probabilities_stay_finite(self):
        loss = rec_loss(Tensor([-1000.0, 1000.0]), {0}).item()
        self.assertTrue(math.isfinite(loss))

    def test_permutation_invariant(self):
        scores = Tensor(np.random.default_rng(2).normal(size=7))
        self.assertEqual(rec_loss(scores, [4, 1, 6]).item(), rec_loss(scores, [6, 4, 1]).item())

    def test_empty_target(self):
        with self.assertRaises(ValueError):
            rec_loss(Tensor(np.zeros(3)), [])

    def test_whole_catalog_target(self):
        self.assertAlmostEqual(rec_loss(Tensor(np.zeros(2)), {0, 1}).item(), math.log(2.0))


class TestJointLoss(unittest.TestCase):

    def setUp(self):
        self.enterContext(default_dtype(np.float64))
        self.units = {"plm": 1.0, "rec": 1.0, "bi": 1.0, "ii": 1.0}

    def test_unit_components(self):
        components = {name: Tensor(1.0) for name in self.units}
        self.assertEqual(joint_loss(components, self.units).item(), 4.0)

    def test_zero_weight_drops_component(self):
        components = {"plm": Tensor(2.0), "rec": Tensor(3.0), "bi": Tensor(5.0), "ii": None}
        weights = {**self.units, "bi": 0.0}
        self.assertEqual(joint_loss(components, weights).item(), 5.0)

    def test_divergence_names_components(self):
        components = {"plm": Tensor(1.0), "rec": Tensor(float("nan")), "bi": Tensor(float("inf")), "ii": None}
        with self.assertRaises(TrainingDivergenceError) as caught:
            joint_loss(components, self.units, epoch=2, step=7)
        self.assertEqual(caught.exception.components, ["rec", "bi"])
        self.assertIn("epoch 2, step 7", caught.exception.detail)

    def test_everything_skipped(self):
        with self.assertRaises(ValueError):
            joint_loss({"plm": None, "rec": None}, self.units)

    def test_gradient_is_sum_of_parts(self):
        x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)

        def parts():
            return {"plm": sum_(mul(x, x)), "rec": rec_loss(x, {1})}
        backward(joint_loss(parts(), self.units))
        joint = x.grad.copy()
        separate = np.zeros(3)
        for value in parts().values():
            x.grad = None
            backward(value)
            separate += x.grad
        np.testing.assert_allclose(joint, separate, atol=1e-12)
        self.assertTrue(grad_check(lambda t: joint_loss(parts(), self.units), x).passed)


class TestRecommendTopN(unittest.TestCase):

    def test_examples(self):
        self.assertEqual(recommend_topn(np.array([0.1, 0.9, 0.5]), 2), [1, 2])
        self.assertEqual(recommend_topn(np.array([0.3, 0.3, 0.3]), 2), [0, 1])
        self.assertEqual(recommend_topn(np.array([0.1, 0.9, 0.5]), 1, exclude={1}), [2])

    def test_invalid_n(self):
        with self.assertRaises(ValueError):
            recommend_topn(np.array([0.1, 0.9, 0.5]), 0)
        with self.assertRaises(ValueError):
            recommend_topn(np.array([0.1, 0.9, 0.5]), 3, exclude={0})

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            scores = rng.normal(size=12)
            n = int(rng.integers(1, 13))
            probabilities = 1.0 / (1.0 + np.exp(-scores))
            self.assertEqual(recommend_topn(scores, n), recommend_topn(probabilities, n))
            self.assertEqual(recommend_topn(scores, n), recommend_topn(3.0 * scores + 1.0, n))


if __name__ == '__main__':
    unittest.main()
