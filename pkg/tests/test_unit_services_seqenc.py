import unittest

import numpy as np
import pytest

from database.models import Triplet
from errors import PromptBudgetError
from repository.knowledge import build_vocab, ktp_sentence, render_mup, tokenize
from schemas import ModelConfig
from services.optim import AdamW
from services.recommender import target_text
from services.seqenc import (SeqEncoderModel, dropout, encode_prompts, join_prompts, masked_item_loss, plm_loss)
from services.tensor import Tensor, backward, default_dtype, grad_check, no_grad


def small_config(**overrides) -> ModelConfig:
    values = {"d_model": 8, "n_enc_layers": 1, "n_dec_layers": 1, "n_heads": 2, "ffn_mult": 2,
              "max_tokens": 32, "vocab_size": 24, "dropout": 0.0}
    values.update(overrides)
    return ModelConfig(**values)


class TestSeqEncoder(unittest.TestCase):

    def setUp(self):
        self.enterContext(default_dtype(np.float64))
        self.model = SeqEncoderModel(small_config(), seed=5).eval()
        self.mup = [1, 9, 10, 3, 3, 2]
        self.masks = [3, 4]

    def test_encode_shape(self):
        memory = self.model.encode([1, 5, 6, 7])
        self.assertEqual(memory.shape, (4, 8))

    def test_encode_prompts_pools_mask_rows(self):
        rows, pooled, memory = encode_prompts(self.model, self.mup, [11, 12], self.masks)
        self.assertEqual(rows.shape, (2, 8))
        self.assertEqual(pooled.shape, (8,))
        self.assertEqual(memory.shape, (len(self.mup) + 3, 8))
        np.testing.assert_allclose(pooled.data, rows.data.mean(axis=0))

    def test_join_prompts_inserts_separator(self):
        self.assertEqual(join_prompts([1, 2], [7], sep_id=4), [1, 2, 4, 7])
        self.assertEqual(join_prompts([1, 2], [], sep_id=4), [1, 2, 4])

    def test_knowledge_order_changes_sequence_embedding(self):
        _, forward, _ = encode_prompts(self.model, self.mup, [11, 12, 13], self.masks)
        _, reverse, _ = encode_prompts(self.model, self.mup, [13, 12, 11], self.masks)
        self.assertFalse(np.allclose(forward.data, reverse.data))

    def test_prompt_over_budget(self):
        with self.assertRaises(PromptBudgetError):
            encode_prompts(self.model, self.mup, list(range(5, 30)) + [5, 6], self.masks)

    def test_requires_a_mask(self):
        with self.assertRaises(ValueError):
            encode_prompts(self.model, self.mup, [], [])

    def test_vocab_size_must_be_set(self):
        with self.assertRaises(ValueError):
            SeqEncoderModel(small_config(vocab_size=0), seed=0)

    def test_encoder_only_has_no_decoder(self):
        model = SeqEncoderModel(small_config(architecture="encoder_only"), seed=5)
        memory = model.encode(self.mup)
        with self.assertRaises(ValueError):
            model.decode(memory, [1, 2])
        rows, _, _ = encode_prompts(model, self.mup, [], self.masks)
        loss = masked_item_loss(model, rows, [9, 10, 11])
        self.assertGreater(loss.item(), 0.0)

    def test_plm_loss_is_positive_and_ignores_padding(self):
        loss = plm_loss(self.model, self.mup, [11], [1, 9, 2])
        padded = plm_loss(self.model, self.mup, [11], [1, 9, 2, 0])
        self.assertGreater(loss.item(), 0.0)
        self.assertAlmostEqual(loss.item(), padded.item(), places=10)

    def test_plm_loss_gradient(self):
        report = grad_check(lambda _: plm_loss(self.model, self.mup, [11, 12], [1, 9, 10, 2]),
                            self.model.token_embedding, tol=1e-4)
        self.assertTrue(report.passed, report.max_rel_error)

    def test_plm_loss_needs_a_content_token(self):
        for target in ([1, 2], [1, 2, 0, 0], [1]):
            with self.subTest(target=target), self.assertRaises(ValueError):
                plm_loss(self.model, self.mup, [11], target)

    def test_decoder_is_causal(self):
        memory = self.model.encode(join_prompts(self.mup, [11, 12], sep_id=4))
        target = [1, 9, 10, 11, 12]
        base = self.model.decode(memory, target).data
        for position in range(1, len(target)):
            changed = list(target)
            changed[position] = 20
            logits = self.model.decode(memory, changed).data
            np.testing.assert_allclose(logits[:position], base[:position], rtol=0, atol=1e-12)
            self.assertFalse(np.allclose(logits[position], base[position]))

    def test_dropout_is_seeded(self):
        model = SeqEncoderModel(small_config(dropout=0.3), seed=5).train()
        first = model.encode(self.mup, np.random.default_rng(8)).data
        second = model.encode(self.mup, np.random.default_rng(8)).data
        plain = model.encode(self.mup).data
        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.allclose(first, plain))

    def test_dropout_scales_kept_units(self):
        out = dropout(Tensor(np.ones((200, 50))), 0.5, np.random.default_rng(0)).data
        self.assertEqual(set(np.unique(out)), {0.0, 2.0})
        self.assertAlmostEqual(out.mean(), 1.0, delta=0.05)


def prompt_target_pairs(count: int, seed: int):
    rng = np.random.default_rng(seed)
    names = [f"item_{i}" for i in range(12)]
    brands = {name: f"brand_{i % 3}" for i, name in enumerate(names)}
    sentences = [ktp_sentence(Triplet(head=name, relation="brand", tail=brand), {}) for name, brand in brands.items()]
    tokenizer = build_vocab(sentences + [render_mup([{0}, {1}], names, 2).text], item_names=names)
    pairs = []
    for _ in range(count):
        history = [frozenset(int(i) for i in rng.choice(12, size=2, replace=False)) for _ in range(2)]
        target = frozenset(int(i) for i in rng.choice(12, size=2, replace=False))
        mup, _ = tokenize(tokenizer, render_mup(history, names, len(target)))
        ktp = tokenizer.encode(" ".join(sentences[i] for i in sorted(history[-1])))
        target_ids = [tokenizer.bos_id] + tokenizer.encode(target_text(target, names)) + [tokenizer.eos_id]
        pairs.append((mup, ktp, target_ids))
    return tokenizer, pairs


@pytest.mark.slow
def test_backbone_overfits_fixed_pairs():
    tokenizer, pairs = prompt_target_pairs(20, seed=0)
    assert all(len(target) >= 5 for _, _, target in pairs)
    with default_dtype(np.float64):
        model = SeqEncoderModel(small_config(d_model=64, n_heads=4, vocab_size=len(tokenizer), max_tokens=64),
                                seed=1)
        optimizer = AdamW(model.parameters(), lr=3e-3, weight_decay=0.0)
        for _ in range(500):
            total = None
            for mup, ktp, target in pairs:
                loss = plm_loss(model, mup, ktp, target, sep_id=tokenizer.sep_id)
                total = loss if total is None else total + loss
            backward(total)
            optimizer.step()
            with no_grad():
                nll, hits, positions = 0.0, 0, 0
                for mup, ktp, target in pairs:
                    memory = model.encode(join_prompts(mup, ktp, tokenizer.sep_id))
                    logits = model.decode(memory, target[:-1]).data
                    nll += plm_loss(model, mup, ktp, target, sep_id=tokenizer.sep_id, memory=memory).item()
                    hits += int((logits.argmax(axis=1) == np.asarray(target[1:])).sum())
                    positions += len(target) - 1
            if nll / positions < 0.1 and hits / positions >= 0.95:
                break
    assert hits / positions >= 0.95
    assert nll / positions < 0.1
