import math
import os
import unittest

import numpy as np
import torch
from pyfakefs.fake_filesystem_unittest import TestCase as FakeFsTestCase

from slide_search_tool.core import MosaicSet, PatchEmbeddingMatrix
from slide_search_tool.encoder import EncoderModel
from slide_search_tool.errors import (
    DataError,
    DimensionError,
    NumericError,
    PreconditionError,
    UsageError,
)
from slide_search_tool.synthetic import synth_dataset
from slide_search_tool.training import (
    Batch,
    EpochRecord,
    TrainConfig,
    diversity_loss,
    gradient_check,
    gradients,
    info_nce_loss,
    split_samples,
    total_loss,
    train,
    tree_sum,
    write_loss_trace,
)

FIXTURES_PATH = os.path.abspath(os.path.join(os.path.dirname(__file__), "../../", "fixtures"))


def small_config(**overrides: object) -> TrainConfig:
    values = {"m": 2, "hidden_dim": 4, "batch_size": 2, "seed": 0}
    values.update(overrides)
    return TrainConfig(**values)  # type: ignore[arg-type]


def small_batch(size: int = 2, dim: int = 8, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    slides = [PatchEmbeddingMatrix(rng.standard_normal((5 + i, dim))) for i in range(size)]
    texts = [rng.standard_normal(dim) for _ in range(size)]
    return Batch(slides, texts)


class TestInfoNce(unittest.TestCase):
    def test_single_pair_is_zero(self) -> None:
        loss = info_nce_loss([[1.0, 0.0]], [[0.0, 1.0]], 2.0)
        self.assertEqual(loss.item(), 0.0)

    def test_equal_similarities_give_log_batch(self) -> None:
        rows = np.tile([1.0, 0.0, 0.0], (4, 1))
        loss = info_nce_loss(rows, rows, math.log(1 / 0.07))
        self.assertAlmostEqual(loss.item(), math.log(4), delta=1e-9)

    def test_closed_form_two_pairs(self) -> None:
        eye = np.eye(2)
        loss = info_nce_loss(eye, eye, 0.0)
        self.assertAlmostEqual(loss.item(), math.log(1 + math.exp(-1)), delta=1e-12)
        self.assertAlmostEqual(loss.item(), 0.313262, delta=1e-6)

    def test_symmetric_in_roles(self) -> None:
        rng = np.random.default_rng(1)
        image = rng.standard_normal((5, 6))
        text = rng.standard_normal((5, 6))
        image /= np.linalg.norm(image, axis=1, keepdims=True)
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        forward = info_nce_loss(image, text, 1.3).item()
        self.assertAlmostEqual(forward, info_nce_loss(text, image, 1.3).item(), delta=1e-12)
        self.assertGreaterEqual(forward, 0.0)

    def test_non_unit_rows_rejected(self) -> None:
        with self.assertRaises(PreconditionError):
            info_nce_loss([[2.0, 0.0]], [[1.0, 0.0]], 0.0)

    def test_shape_mismatch(self) -> None:
        with self.assertRaises(DimensionError):
            info_nce_loss(np.eye(2), np.eye(3), 0.0)


class TestDiversity(unittest.TestCase):
    def test_orthogonal_rows(self) -> None:
        self.assertEqual(diversity_loss(np.eye(4)).item(), 0.0)

    def test_identical_rows(self) -> None:
        self.assertAlmostEqual(diversity_loss(np.array([[0.6, 0.8], [0.6, 0.8]])).item(), 1.0)

    def test_pairwise_cosine_half(self) -> None:
        rows = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
        self.assertAlmostEqual(diversity_loss(MosaicSet(rows)).item(), 0.5, delta=1e-12)

    def test_unnormalized_uses_raw_dot_products(self) -> None:
        rows = np.array([[2.0, 0.0], [2.0, 0.0]])
        self.assertAlmostEqual(diversity_loss(rows, normalize=True).item(), 1.0)
        self.assertAlmostEqual(diversity_loss(rows, normalize=False).item(), 4.0)

    def test_absolute_variant(self) -> None:
        rows = np.array([[1.0, 0.0], [-1.0, 0.0]])
        self.assertAlmostEqual(diversity_loss(rows).item(), -1.0)
        self.assertAlmostEqual(diversity_loss(rows, absolute=True).item(), 1.0)

    def test_bounded_for_random_rows(self) -> None:
        rng = np.random.default_rng(2)
        for _ in range(50):
            value = diversity_loss(rng.standard_normal((4, 5))).item()
            self.assertLessEqual(value, 1.0 + 1e-12)
            self.assertGreaterEqual(value, -1.0 - 1e-12)

    def test_single_mosaic_warns_and_is_zero(self) -> None:
        with self.assertLogs(level="WARNING"):
            self.assertEqual(diversity_loss(np.ones((1, 3))).item(), 0.0)


class TestTotalLoss(unittest.TestCase):
    def test_matches_components(self) -> None:
        config = small_config(alpha=0.7)
        model = EncoderModel(config.encoder_spec(8), seed=1)
        batch = small_batch(3)
        images, diversities, texts = [], [], []
        for patches in batch.slides:
            mosaics, semantic = model(torch.as_tensor(patches.data))
            images.append(semantic)
            diversities.append(diversity_loss(mosaics).item())
        for raw in batch.texts:
            projected = model.text_vector(torch.as_tensor(raw))
            texts.append(projected / torch.linalg.vector_norm(projected))
        expected = info_nce_loss(
            torch.stack(images), torch.stack(texts), model.temperature_logit
        ).item() + 0.7 * float(np.mean(diversities))
        losses = total_loss(batch, model, config)
        self.assertAlmostEqual(losses.total.item(), expected, delta=1e-12)
        self.assertAlmostEqual(losses.diversity.item(), float(np.mean(diversities)), delta=1e-12)

    def test_alpha_zero_is_contrastive_only(self) -> None:
        config = small_config(alpha=0.0)
        model = EncoderModel(config.encoder_spec(8))
        losses = total_loss(small_batch(), model, config)
        self.assertEqual(losses.total.item(), losses.contrastive.item())

    def test_tree_sum(self) -> None:
        values = [torch.tensor(float(i), dtype=torch.float64) for i in range(7)]
        self.assertEqual(tree_sum(values).item(), 21.0)


class TestGradients(unittest.TestCase):
    def test_finite_differences_agree(self) -> None:
        config = small_config()
        model = EncoderModel(config.encoder_spec(8), seed=2)
        errors = gradient_check(small_batch(2, seed=3), model, config, h=1e-5)
        self.assertEqual(set(errors), {name for name, _ in model.named_parameters()})
        for name, error in errors.items():
            self.assertLessEqual(error, 1e-4, name)

    def test_temperature_gradient_sign(self) -> None:
        config = small_config()
        model = EncoderModel(config.encoder_spec(8), seed=2)
        batch = small_batch(2, seed=3)
        analytic = float(gradients(batch, model, config)["temperature_logit"])
        with torch.no_grad():
            model.temperature_logit += 1e-5
            plus = total_loss(batch, model, config).total.item()
            model.temperature_logit -= 2e-5
            minus = total_loss(batch, model, config).total.item()
        self.assertEqual(math.copysign(1.0, analytic), math.copysign(1.0, plus - minus))

    def test_single_pair_without_diversity_has_zero_gradients(self) -> None:
        config = small_config(alpha=0.0)
        model = EncoderModel(config.encoder_spec(8))
        for name, grad in gradients(small_batch(1), model, config).items():
            self.assertTrue(np.all(grad == 0.0), name)

    def test_non_finite_parameter_named(self) -> None:
        config = small_config()
        model = EncoderModel(config.encoder_spec(8))
        with torch.no_grad():
            model.aggregator.w[0] = math.nan
        with self.assertRaises(NumericError) as ctx:
            gradients(small_batch(), model, config)
        self.assertEqual(ctx.exception.parameter, "aggregator.w")


class TestTrainConfig(unittest.TestCase):
    def test_defaults(self) -> None:
        config = TrainConfig()
        self.assertEqual(config.batch_size, 128)
        self.assertEqual(config.lr, 8e-5)
        self.assertEqual(config.weight_decay, 0.05)
        self.assertEqual(config.epochs, 100)
        self.assertEqual(config.m, 16)
        self.assertTrue(config.normalize_mosaics_for_ld)

    def test_from_file(self) -> None:
        config = TrainConfig.from_file(os.path.join(FIXTURES_PATH, "train_config.txt"))
        self.assertEqual(config.batch_size, 16)
        self.assertEqual(config.lr, 0.02)
        self.assertEqual(config.m, 2)
        self.assertEqual(config.val_fraction, 0.25)
        self.assertEqual(config.weight_decay, 0.05)

    def test_invalid_values(self) -> None:
        with self.assertRaises(UsageError):
            TrainConfig.from_dict({"batch_size": "1"})
        with self.assertRaises(UsageError):
            TrainConfig.from_dict({"lr": "fast"})
        with self.assertRaises(UsageError):
            TrainConfig.from_dict({"momentum": "0.9"})

    def test_bool_strings(self) -> None:
        config = TrainConfig.from_dict({"abs_diversity": "yes", "use_projection": "off"})
        self.assertTrue(config.abs_diversity)
        self.assertFalse(config.use_projection)


class TestBatch(unittest.TestCase):
    def test_length_mismatch(self) -> None:
        with self.assertRaises(DimensionError):
            Batch([PatchEmbeddingMatrix(np.ones((1, 2)))], [])

    def test_missing_report(self) -> None:
        dataset = synth_dataset(2, 1, 2, 3, dim=8, seed=0)
        dataset.samples[0].text_vector = None
        with self.assertRaises(DataError):
            Batch.from_samples(dataset.samples)


class TestTrain(unittest.TestCase):
    def setUp(self) -> None:
        self.dataset = synth_dataset(4, 10, 4, 12, dim=16, seed=5)

    def test_split_is_seeded_and_disjoint(self) -> None:
        train_set, val_set = split_samples(self.dataset.samples, 0.1, seed=3)
        self.assertEqual(len(val_set), 4)
        self.assertEqual(len(train_set), 36)
        ids = {s.slide_id for s in train_set} | {s.slide_id for s in val_set}
        self.assertEqual(len(ids), 40)
        again, _ = split_samples(self.dataset.samples, 0.1, seed=3)
        self.assertEqual([s.slide_id for s in again], [s.slide_id for s in train_set])

    def test_zero_learning_rate_keeps_parameters(self) -> None:
        config = small_config(lr=0.0, epochs=2, batch_size=8)
        initial = EncoderModel(config.encoder_spec(16), seed=config.seed)
        result = train(config, self.dataset)
        for (name, before), (_, after) in zip(
            initial.named_parameters(), result.model.named_parameters()
        ):
            self.assertTrue(torch.equal(before, after), name)
        self.assertEqual(len(result.trace), 3)

    def test_same_seed_same_trace(self) -> None:
        config = small_config(lr=0.01, epochs=3, batch_size=8)
        first = train(config, self.dataset).trace
        second = train(config, self.dataset).trace
        self.assertEqual(first, second)

    def test_contrastive_loss_drops_below_uniform_baseline(self) -> None:
        config = small_config(lr=0.02, epochs=40, batch_size=40, alpha=0.0, val_fraction=0.0)
        result = train(config, self.dataset)
        initial, best = result.trace[0], result.trace[result.best_epoch]
        self.assertGreater(result.best_epoch, 0)
        self.assertLess(best.val_loss, initial.val_loss)
        self.assertLess(min(r.l_c for r in result.trace[1:]), math.log(40))

    def test_needs_two_pairs(self) -> None:
        dataset = synth_dataset(2, 1, 2, 3, dim=8, seed=0)
        dataset.samples = dataset.samples[:1]
        with self.assertRaises(DataError):
            train(small_config(), dataset)


class TestLossTrace(FakeFsTestCase):
    def setUp(self) -> None:
        self.setUpPyfakefs()

    def test_write_loss_trace(self) -> None:
        trace = [EpochRecord(0, 1.5, 1.25, 1.0, 0.5), EpochRecord(1, 0.75, 0.5, 0.5, 0.25)]
        write_loss_trace(trace, "trace.csv")
        with open("trace.csv", "r", encoding="utf-8") as trace_file:
            lines = trace_file.read().splitlines()
        self.assertEqual(lines[0], "epoch,train_loss,val_loss,l_c,l_d")
        self.assertEqual(lines[2], "1,0.75,0.5,0.5,0.25")
