import math
import unittest

import numpy as np

from models.dual_branch import ModelPart, replicate_head
from sigcam_core.autograd import Tensor, gradcheck
from sigcam_core.errors import ConfigError, ContractError, DomainError, NonFiniteError
from sigcam_core.synth_data import generate
from sigcam_core.training import (
    OptimizerState, PosWeightMode, TrainConfig, TrainPhase, adam_step, balanced_bce_from_logits,
    balanced_bce_loss, bce_coefficients, cross_entropy, sigmoid_finetune, softmax_pretrain,
)
from tests.helpers import philox, tiny_model, tiny_spec


def snapshot(params):
    return {name: t.data.copy() for name, t in params.items()}


class TestLosses(unittest.TestCase):
    def test_balanced_bce_at_half(self):
        scores = np.full((2, 10), 0.5)
        loss = balanced_bce_loss(scores, np.array([3, 7]))
        self.assertAlmostEqual(loss.item(), 2 * 0.9 * math.log(2), places=6)
        self.assertAlmostEqual(loss.item(), 1.247664, places=5)

    def test_perfect_prediction_limit(self):
        eps = 1e-9
        loss = balanced_bce_loss(np.array([[1 - eps, eps]]), np.array([0]))
        self.assertLess(loss.item(), 1e-6)

    def test_domain(self):
        with self.assertRaises(DomainError):
            balanced_bce_loss(np.array([[1.0, 0.5]]), np.array([0]))
        with self.assertRaises(DomainError):
            balanced_bce_loss(np.array([[0.0, 0.5]]), np.array([0]))

    def test_logit_form_matches_direct_formula(self):
        z = philox(1).standard_normal((4, 5)) * 3
        labels = np.array([0, 4, 2, 2])
        s = 1 / (1 + np.exp(-z))
        for mode in PosWeightMode:
            positive = mode.ratio(5) / 5
            expected = 0.0
            for b, y in enumerate(labels):
                for k in range(5):
                    expected += -positive * math.log(s[b, k]) if k == y else -0.2 * math.log(1 - s[b, k])
            loss = balanced_bce_from_logits(Tensor(z, dtype=np.float64), labels, mode)
            self.assertAlmostEqual(loss.item(), expected / 4, places=9)

    def test_logit_form_matches_naive_formula_over_seeds(self):
        for seed in range(100):
            rng = philox(100 + seed)
            batch, classes = int(rng.integers(1, 6)), int(rng.integers(2, 9))
            z = rng.uniform(-8.0, 8.0, (batch, classes))
            labels = rng.integers(0, classes, batch)
            y = np.zeros((batch, classes))
            y[np.arange(batch), labels] = 1.0
            s = 1.0 / (1.0 + np.exp(-z))
            for mode in PosWeightMode:
                w = mode.ratio(classes)
                naive = -(w * y * np.log(s) + (1 - y) * np.log(1 - s)).sum() / (classes * batch)
                loss = balanced_bce_from_logits(Tensor(z, dtype=np.float64), labels, mode).item()
                with self.subTest(seed=seed, mode=mode.value):
                    self.assertLess(abs(loss - naive), 1e-5)

    def test_bce_gradient_matches_finite_differences(self):
        for seed in range(100):
            rng = philox(200 + seed)
            batch, classes = int(rng.integers(1, 5)), int(rng.integers(2, 7))
            z = Tensor(rng.standard_normal((batch, classes)) * 3, dtype=np.float64)
            labels = rng.integers(0, classes, batch)
            for mode in PosWeightMode:
                with self.subTest(seed=seed, mode=mode.value):
                    error = gradcheck(lambda logits: balanced_bce_from_logits(logits, labels, mode), [z])
                    self.assertLess(error, 1e-5)

    def test_saturated_logits_stay_finite(self):
        labels = np.array([0, 2])
        signs = 2 * np.eye(3)[labels] - 1
        for mode in PosWeightMode:
            positive, negative = bce_coefficients(3, mode)
            for direction, expected in ((1.0, 0.0), (-1.0, 100.0 * (positive + 2 * negative))):
                z = Tensor(direction * 100.0 * signs, requires_grad=True, dtype=np.float64)
                loss = balanced_bce_from_logits(z, labels, mode)
                loss.backward()
                with self.subTest(mode=mode.value, direction=direction):
                    self.assertTrue(math.isfinite(loss.item()))
                    self.assertAlmostEqual(loss.item(), expected, places=9)
                    self.assertTrue(np.all(np.isfinite(z.grad)))
                    self.assertLessEqual(np.abs(z.grad).max(), max(positive, negative) / 2)

    def test_cross_entropy(self):
        z = philox(2).standard_normal((3, 4))
        labels = np.array([1, 0, 3])
        log_y = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        expected = -log_y[np.arange(3), labels].mean()
        self.assertAlmostEqual(cross_entropy(Tensor(z, dtype=np.float64), labels).item(), expected, places=9)

    def test_pos_weight_labels(self):
        self.assertEqual(PosWeightMode.BALANCED.label(4), "3:1")
        self.assertEqual(PosWeightMode.HALF.label(4), "1.5:1")
        self.assertEqual(PosWeightMode.NONE.label(4), "1:1")


class TestAdam(unittest.TestCase):
    def test_zero_gradient_without_decay(self):
        param = Tensor(np.array([1.0, -2.0]), dtype=np.float64)
        adam_step({'p': param}, {'p': np.zeros(2)}, OptimizerState(), lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(param.data, [1.0, -2.0])

    def test_zero_learning_rate(self):
        param = Tensor(np.array([1.0]), dtype=np.float64)
        adam_step({'p': param}, {'p': np.array([5.0])}, OptimizerState(), lr=0.0, weight_decay=0.1)
        np.testing.assert_array_equal(param.data, [1.0])

    def test_first_step_moves_by_lr(self):
        param = Tensor(np.array([1.0, 1.0]), dtype=np.float64)
        state = adam_step({'p': param}, {'p': np.array([0.5, -0.5])}, OptimizerState(), lr=0.1, weight_decay=0.0)
        np.testing.assert_allclose(param.data, [0.9, 1.1], atol=1e-6)
        self.assertEqual(state.step, 1)

    def test_decoupled_weight_decay(self):
        param = Tensor(np.array([1.0]), dtype=np.float64)
        adam_step({'p': param}, {}, OptimizerState(), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(param.data, [0.95])


class TestTrainConfig(unittest.TestCase):
    def test_defaults_per_phase(self):
        config = TrainConfig.default_for(TrainPhase.SIGMOID_FINETUNE)
        self.assertEqual(config.train_phase, TrainPhase.SIGMOID_FINETUNE)
        self.assertEqual(config.pos_weight, PosWeightMode.BALANCED)

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            TrainConfig(pos_weight_mode="most").validate()
        with self.assertRaises(ConfigError):
            TrainConfig(batch_size=0).validate()
        with self.assertRaises(ConfigError):
            TrainConfig(phase="warmup").validate()


class TestTrainingLoops(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.samples = generate(tiny_spec(image_size=8, train_size=12), "train")

    def pretrain_config(self, **overrides):
        values = dict(epochs=1, batch_size=4, seed=3)
        values.update(overrides)
        return TrainConfig.default_for(TrainPhase.SOFTMAX_PRETRAIN, **values)

    def finetune_config(self, **overrides):
        values = dict(epochs=2, batch_size=4, seed=3)
        values.update(overrides)
        return TrainConfig.default_for(TrainPhase.SIGMOID_FINETUNE, **values)

    def test_pretrain_lr_zero_keeps_parameters(self):
        model = tiny_model()
        before = snapshot(model.named_parameters())
        softmax_pretrain(model, self.samples, self.pretrain_config(learning_rate=0.0))
        for name, tensor in model.named_parameters().items():
            np.testing.assert_array_equal(tensor.data, before[name])

    def test_pretrain_is_deterministic(self):
        first = softmax_pretrain(tiny_model(), self.samples, self.pretrain_config(epochs=2))
        second = softmax_pretrain(tiny_model(), self.samples, self.pretrain_config(epochs=2))
        self.assertEqual(first.epoch_losses, second.epoch_losses)
        self.assertEqual(len(first.epoch_losses), 2)

    def test_pretrain_rejects_wrong_phase(self):
        with self.assertRaises(ContractError):
            softmax_pretrain(tiny_model(), self.samples, self.finetune_config())

    def test_non_finite_loss_aborts(self):
        model = tiny_model()
        model.softmax_head.bias.data[0] = np.nan
        with self.assertRaises(NonFiniteError) as ctx:
            softmax_pretrain(model, self.samples, self.pretrain_config())
        self.assertIn("step 1", ctx.exception.message)

    def test_finetune_only_changes_sigmoid_head(self):
        model = replicate_head(tiny_model(), seed=1)
        frozen = model.parameter_hashes([ModelPart.BACKBONE, ModelPart.SOFTMAX_HEAD])
        head_before = snapshot(model.part_parameters(ModelPart.SIGMOID_HEAD))
        sigmoid_finetune(model, self.samples, self.finetune_config())
        self.assertEqual(model.parameter_hashes([ModelPart.BACKBONE, ModelPart.SOFTMAX_HEAD]), frozen)
        changed = [not np.array_equal(t.data, head_before[name])
                   for name, t in model.part_parameters(ModelPart.SIGMOID_HEAD).items()]
        self.assertTrue(any(changed))

    def test_finetune_lr_zero_keeps_head(self):
        model = replicate_head(tiny_model(), seed=1)
        head_before = snapshot(model.part_parameters(ModelPart.SIGMOID_HEAD))
        sigmoid_finetune(model, self.samples, self.finetune_config(learning_rate=0.0))
        for name, tensor in model.part_parameters(ModelPart.SIGMOID_HEAD).items():
            np.testing.assert_array_equal(tensor.data, head_before[name])

    def test_finetune_loss_decreases(self):
        model = replicate_head(tiny_model(), seed=2)
        config = self.finetune_config(epochs=8, batch_size=12, learning_rate=0.01, flip=False, weight_decay=0.0)
        history = sigmoid_finetune(model, self.samples, config)
        self.assertLess(history.epoch_losses[-1], history.epoch_losses[0])

    def test_finetune_needs_replicated_head(self):
        with self.assertRaises(ContractError):
            sigmoid_finetune(tiny_model(), self.samples, self.finetune_config())


if __name__ == '__main__':
    unittest.main()
