# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

import unittest

import numpy as np
import numpy.testing as npt
from pydantic import ValidationError

from clyso.plot.core.encoders import (
    CLASS_TOKEN_NORM,
    CLASS_TOKEN_SPREAD,
    CTX_INIT_STD,
    PromptBank,
    SynthConfig,
    TextEncoder,
    class_tokens_for,
    encode_prompts,
    encode_prompts_backward,
    gen_synthetic,
    grid_for,
    init_context,
    subsample_shots,
    synth_prototypes,
)
from clyso.plot.core.numerics import PlotError, ShapeError, ZeroNormError, make_rng


def random_bank(seed: int, k: int = 3, n: int = 2, length: int = 4, d_e: int = 6) -> PromptBank:
    rng = make_rng(seed)
    return PromptBank(
        ctx=rng.standard_normal((n, length, d_e)),
        class_tokens=rng.standard_normal((k, d_e)),
    )


class TestEncodePrompts(unittest.TestCase):
    def test_identity_projection(self) -> None:
        bank = PromptBank(ctx=np.array([[[2.0, 0.0]]]), class_tokens=np.zeros((1, 2)))
        g = encode_prompts(bank, TextEncoder(proj=np.eye(2)))
        npt.assert_allclose(g, [[[1.0, 0.0]]])

    def test_identical_prompts_give_identical_features(self) -> None:
        bank = random_bank(1)
        ctx = bank.ctx.copy()
        ctx[1] = ctx[0]
        g = encode_prompts(bank.with_ctx(ctx), TextEncoder.create(6, 5, seed=0))
        npt.assert_array_equal(g[:, 0], g[:, 1])

    def test_shape_and_norms(self) -> None:
        bank = random_bank(3, k=4, n=3)
        g = encode_prompts(bank, TextEncoder.create(6, 7, seed=3))
        self.assertEqual(g.shape, (4, 3, 7))
        npt.assert_allclose(np.linalg.norm(g, axis=-1), 1.0, atol=1e-12)

    def test_token_order_invariance(self) -> None:
        bank = random_bank(4)
        enc = TextEncoder.create(6, 5, seed=4)
        shuffled = bank.with_ctx(bank.ctx[:, ::-1, :].copy())
        npt.assert_allclose(encode_prompts(shuffled, enc), encode_prompts(bank, enc), atol=1e-12)

    def test_zero_pooled_vector(self) -> None:
        bank = PromptBank(ctx=np.zeros((1, 2, 3)), class_tokens=np.zeros((2, 3)))
        with self.assertRaises(ZeroNormError):
            encode_prompts(bank, TextEncoder(proj=np.eye(3)))

    def test_dims_must_agree(self) -> None:
        with self.assertRaises(ShapeError):
            encode_prompts(random_bank(5), TextEncoder.create(5, 5, seed=0))
        with self.assertRaises(ValidationError):
            PromptBank(ctx=np.zeros((1, 2, 3)), class_tokens=np.zeros((2, 4)))

    def test_encoder_deterministic_per_seed(self) -> None:
        npt.assert_array_equal(
            TextEncoder.create(8, 4, seed=9).proj, TextEncoder.create(8, 4, seed=9).proj
        )


class TestEncodeBackward(unittest.TestCase):
    def test_zero_upstream(self) -> None:
        bank = random_bank(6)
        enc = TextEncoder.create(6, 5, seed=6)
        grad = encode_prompts_backward(np.zeros((3, 2, 5)), bank, enc)
        npt.assert_array_equal(grad, np.zeros_like(bank.ctx))

    def test_unit_input_gives_tangential_projection(self) -> None:
        bank = PromptBank(ctx=np.array([[[2.0, 0.0]]]), class_tokens=np.zeros((1, 2)))
        upstream = np.array([[[0.3, -0.7]]])
        grad = encode_prompts_backward(upstream, bank, TextEncoder(proj=np.eye(2)))
        # g = (1, 0); pooling over L+1 = 2 tokens halves the gradient
        npt.assert_allclose(grad, [[[0.0, -0.35]]])

    def test_matches_finite_differences(self) -> None:
        bank = random_bank(7)
        enc = TextEncoder.create(6, 5, seed=7)
        weights = make_rng(70).standard_normal((3, 2, 5))

        def objective(ctx: np.ndarray) -> float:
            return float(np.sum(weights * encode_prompts(bank.with_ctx(ctx), enc)))

        analytic = encode_prompts_backward(weights, bank, enc)
        numeric = np.zeros_like(bank.ctx)
        eps = 1e-6
        for idx in np.ndindex(bank.ctx.shape):
            plus = bank.ctx.copy()
            minus = bank.ctx.copy()
            plus[idx] += eps
            minus[idx] -= eps
            numeric[idx] = (objective(plus) - objective(minus)) / (2 * eps)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3)
        self.assertLessEqual(float(rel.max()), 1e-6)

    def test_shape_mismatch(self) -> None:
        with self.assertRaises(ShapeError):
            encode_prompts_backward(
                np.zeros((3, 2, 4)), random_bank(8), TextEncoder.create(6, 5, 0)
            )


class TestInitContext(unittest.TestCase):
    def test_random_reproducible(self) -> None:
        a = init_context("random", 4, 16, 64, make_rng(0))
        b = init_context("random", 4, 16, 64, make_rng(0))
        npt.assert_array_equal(a, b)
        self.assertEqual(a.shape, (4, 16, 64))

    def test_random_std(self) -> None:
        ctx = init_context("random", 4, 50, 64, make_rng(1))
        self.assertLess(abs(float(ctx.std()) - CTX_INIT_STD), 0.2 * CTX_INIT_STD)

    def test_presets_distinct_and_stable(self) -> None:
        a = init_context("preset_ensemble", 4, 16, 64, make_rng(0))
        b = init_context("preset_ensemble", 4, 16, 64, make_rng(123))
        npt.assert_array_equal(a, b)
        for i in range(4):
            for j in range(i + 1, 4):
                self.assertGreater(float(np.linalg.norm(a[i] - a[j])), 0.0)

    def test_too_many_presets(self) -> None:
        with self.assertRaises(PlotError):
            init_context("preset_ensemble", 5, 16, 64, make_rng(0))


class TestClassTokens(unittest.TestCase):
    def test_dataset_vocabulary_maps_onto_concepts(self) -> None:
        enc = TextEncoder.create(16, 8, seed=2)
        concepts = make_rng(5).standard_normal((3, 8))
        concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
        tokens = class_tokens_for("dataset", 3, concepts, enc, ctx_len=4)
        bank = PromptBank(ctx=np.zeros((1, 4, 16)), class_tokens=tokens)
        npt.assert_allclose(encode_prompts(bank, enc)[:, 0, :], concepts, atol=1e-9)

    def test_random_vocabulary(self) -> None:
        enc = TextEncoder.create(16, 8, seed=2)
        tokens = class_tokens_for("random", 4, None, enc, ctx_len=4, seed=7)
        self.assertEqual(tokens.shape, (4, 16))
        npt.assert_array_equal(tokens, class_tokens_for("random", 4, None, enc, 4, seed=7))
        other = class_tokens_for("random", 4, None, enc, 4, seed=8)
        self.assertFalse(np.array_equal(tokens, other))
        concepts = make_rng(5).standard_normal((4, 8))
        npt.assert_array_equal(tokens, class_tokens_for("random", 4, concepts, enc, 4, seed=7))

        pooled = tokens / 5 @ enc.proj
        norms = np.linalg.norm(pooled, axis=1)
        lo, hi = CLASS_TOKEN_SPREAD
        self.assertTrue(np.all(norms >= CLASS_TOKEN_NORM * lo - 1e-12))
        self.assertTrue(np.all(norms <= CLASS_TOKEN_NORM * hi + 1e-12))
        self.assertGreater(float(norms.max() - norms.min()), 0.0)

    def test_random_vocabulary_is_not_the_concepts(self) -> None:
        enc = TextEncoder.create(64, 64, seed=0)
        data = gen_synthetic(SynthConfig(n_classes=5, shots=1, test_per_class=1, m_locals=1))
        assert data.concepts is not None
        bank = PromptBank(
            ctx=np.zeros((1, 16, 64)),
            class_tokens=class_tokens_for("random", 5, data.concepts, enc, ctx_len=16),
        )
        similarity = encode_prompts(bank, enc)[:, 0, :] @ data.concepts.T
        self.assertLess(float(np.abs(np.diag(similarity)).max()), 0.9)

    def test_blank_vocabulary(self) -> None:
        enc = TextEncoder.create(16, 8, seed=2)
        tokens = class_tokens_for("blank", 3, None, enc, ctx_len=4)
        npt.assert_array_equal(tokens, np.zeros((3, 16)))

    def test_dataset_vocabulary_needs_concepts(self) -> None:
        with self.assertRaises(PlotError):
            class_tokens_for("dataset", 3, None, TextEncoder.create(16, 8, seed=2), ctx_len=4)


class TestSynthetic(unittest.TestCase):
    def test_noise_free_single_attribute(self) -> None:
        cfg = SynthConfig(
            n_classes=2,
            n_attributes=1,
            shots=1,
            test_per_class=1,
            m_locals=4,
            feat_dim=8,
            noise_sigma=0.0,
            background_prototypes=0,
        )
        d = gen_synthetic(cfg)
        _, prototypes, _ = synth_prototypes(cfg)
        for i in range(d.n_images):
            expected = np.broadcast_to(prototypes[d.labels[i], 0], (4, 8))
            npt.assert_allclose(d.features[i], expected, atol=1e-12)

    def test_independent_prototypes(self) -> None:
        cfg = SynthConfig(n_classes=3, n_attributes=4, feat_dim=16, seed=4)
        self.assertEqual(cfg.prototypes, "independent")
        concepts, prototypes, background = synth_prototypes(cfg)
        self.assertEqual(prototypes.shape, (3, 4, 16))
        self.assertEqual(background.shape, (8, 16))
        npt.assert_allclose(np.linalg.norm(prototypes, axis=-1), 1.0, atol=1e-12)
        mean = prototypes.mean(axis=1)
        npt.assert_allclose(concepts, mean / np.linalg.norm(mean, axis=1, keepdims=True))
        # no direction is shared between classes
        for a in range(4):
            self.assertFalse(np.allclose(prototypes[0, a], prototypes[1, a]))

    def test_view_prototypes(self) -> None:
        cfg = SynthConfig(n_classes=3, n_attributes=4, feat_dim=16, prototypes="views", seed=4)
        concepts, prototypes, _ = synth_prototypes(cfg)
        npt.assert_allclose(np.linalg.norm(prototypes, axis=-1), 1.0, atol=1e-12)
        flat = synth_prototypes(cfg.model_copy(update={"view_strength": 0.0}))[1]
        npt.assert_allclose(flat, np.broadcast_to(concepts[:, None, :], (3, 4, 16)))
        independent = synth_prototypes(cfg.model_copy(update={"prototypes": "independent"}))[1]
        self.assertFalse(np.allclose(prototypes, independent))
        with self.assertRaises(ValidationError):
            SynthConfig(prototypes="grid")  # type: ignore[arg-type]

    def test_default_shapes_and_norms(self) -> None:
        d = gen_synthetic(SynthConfig())
        self.assertEqual(d.features.shape, (5 * 36, 49, 64))
        self.assertEqual(d.global_features.shape, (5 * 36, 64))
        self.assertEqual(d.n_train, 80)
        self.assertEqual(d.grid, (7, 7))
        npt.assert_allclose(np.linalg.norm(d.features, axis=-1), 1.0, atol=1e-9)
        npt.assert_allclose(np.linalg.norm(d.global_features, axis=-1), 1.0, atol=1e-9)
        self.assertTrue(set(d.labels.tolist()) == set(range(5)))

    def test_deterministic(self) -> None:
        a = gen_synthetic(SynthConfig(seed=11))
        b = gen_synthetic(SynthConfig(seed=11))
        self.assertEqual(a.features.tobytes(), b.features.tobytes())
        self.assertEqual(a.labels.tobytes(), b.labels.tobytes())
        c = gen_synthetic(SynthConfig(seed=12))
        self.assertFalse(np.array_equal(a.features, c.features))

    def test_config_validation(self) -> None:
        for bad in ({"m_locals": 0}, {"n_classes": 0}, {"noise_sigma": -0.1}):
            with self.assertRaises(ValidationError):
                SynthConfig(**bad)
        SynthConfig(background_prototypes=0)

    def test_grid(self) -> None:
        self.assertEqual(grid_for(49), (7, 7))
        self.assertEqual(grid_for(12), (3, 4))
        self.assertEqual(grid_for(7), (1, 7))
        self.assertEqual(grid_for(1), (1, 1))

    def test_splits_and_shots(self) -> None:
        d = gen_synthetic(
            SynthConfig(n_classes=3, shots=4, test_per_class=2, m_locals=4, feat_dim=8)
        )
        self.assertEqual(d.train_split().n_images, 12)
        self.assertEqual(d.test_split().n_images, 6)
        two = subsample_shots(d, 2)
        self.assertEqual(two.n_train, 6)
        self.assertEqual(np.bincount(two.labels[: two.n_train]).tolist(), [2, 2, 2])
        npt.assert_array_equal(two.test_split().features, d.test_split().features)
        one = subsample_shots(d, 1)
        # nested: the 1-shot images are among the 2-shot images
        for row in one.train_split().features:
            pool = two.train_split().features
            self.assertTrue(any(np.array_equal(row, other) for other in pool))
        with self.assertRaises(PlotError):
            subsample_shots(d, 5)
