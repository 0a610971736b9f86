import unittest
from unittest import mock

import numpy as np

from models.dual_branch import replicate_head
from sigcam_core.distortion import (
    DistortionKind, DistortionSpec, apply_additive_shift, apply_sign_collapse, delta_grid, pick_channel,
    reports_frame, run_distortion_experiment, run_distortion_sweep, split_features, summary_text,
)
from sigcam_core.errors import ConfigError, DomainError, ShapeError
from sigcam_core.synth_data import generate, stack_images
from tests.helpers import tiny_model, tiny_spec


class TestHeadPerturbations(unittest.TestCase):
    def setUp(self):
        self.head = tiny_model().softmax_head

    def test_shift_zero_is_identity(self):
        shifted = apply_additive_shift(self.head, 0, 0.0)
        np.testing.assert_array_equal(shifted.weight.data, self.head.weight.data)
        np.testing.assert_array_equal(shifted.bias.data, self.head.bias.data)

    def test_shift_moves_one_row(self):
        self.head.weight.data[1, :] = 0
        shifted = apply_additive_shift(self.head, 1, 0.5)
        np.testing.assert_array_equal(shifted.weight.data[1], 0.5)
        np.testing.assert_array_equal(np.delete(shifted.weight.data, 1, axis=0),
                                      np.delete(self.head.weight.data, 1, axis=0))

    def test_shift_channel_range(self):
        with self.assertRaises(ShapeError):
            apply_additive_shift(self.head, self.head.channels, 1.0)

    def test_collapse(self):
        delta = float(self.head.weight.data.max()) + 0.1
        self.assertTrue(np.all(apply_sign_collapse(self.head, delta).weight.data < 0))
        np.testing.assert_array_equal(apply_sign_collapse(self.head, 0.0).weight.data, self.head.weight.data)
        with self.assertRaises(DomainError):
            apply_sign_collapse(self.head, -1.0)

    def test_spec_validation(self):
        with self.assertRaises(ConfigError):
            DistortionSpec(kind=DistortionKind.SIGN_COLLAPSE.value, delta=-0.5).validate()
        with self.assertRaises(ConfigError):
            DistortionSpec(kind="rotate").validate()

    def test_delta_grid(self):
        weight = self.head.weight.data.astype(np.float64)
        shifts = delta_grid(self.head, DistortionKind.ADDITIVE_SHIFT, [1.0, 2.0])
        self.assertAlmostEqual(shifts[1], 2 * weight.std())
        collapses = delta_grid(self.head, DistortionKind.SIGN_COLLAPSE)
        self.assertEqual(len(collapses), 3)
        self.assertAlmostEqual(collapses[0], np.abs(weight).max())


class TestExperiments(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.samples = generate(tiny_spec(image_size=8, test_size=6), "test")
        cls.model = replicate_head(tiny_model(seed=4), seed=4)

    def test_additive_shift_moves_map_not_probabilities(self):
        report = run_distortion_experiment(self.model, self.samples, DistortionSpec(delta=1.0))
        self.assertTrue(report.valid)
        self.assertLess(report.max_prob_deviation, 1e-6)
        self.assertEqual(report.argmax_agreement, 1.0)
        self.assertGreater(report.heatmap_l1, 0.0)
        images, _ = stack_images(self.samples)
        self.assertEqual(report.channel, pick_channel(split_features(self.model, images)))

    def test_sign_collapse_empties_softmax_map(self):
        delta = 2.0 * float(np.abs(self.model.softmax_head.weight.data).max())
        spec = DistortionSpec(kind=DistortionKind.SIGN_COLLAPSE.value, delta=delta)
        report = run_distortion_experiment(self.model, self.samples, spec)
        self.assertTrue(report.valid)
        self.assertEqual(report.positive_fraction_after, 0.0)
        self.assertEqual(report.empty_map_rate, 1.0)
        self.assertAlmostEqual(report.flipped_sign_fraction,
                               float((self.model.softmax_head.weight.data > 0).mean()))
        self.assertTrue(report.sigmoid_maps_identical)
        self.assertEqual(report.gt_loc_sigmoid_before, report.gt_loc_sigmoid_after)

    def test_shared_weights_change_sigmoid_maps(self):
        model = replicate_head(tiny_model(seed=4), seed=4)
        model.sigmoid_head.weight = model.softmax_head.weight
        before = model.softmax_head.weight.data.copy()
        delta = 2.0 * float(np.abs(before).max())
        spec = DistortionSpec(kind=DistortionKind.SIGN_COLLAPSE.value, delta=delta)
        report = run_distortion_experiment(model, self.samples, spec)
        self.assertFalse(report.sigmoid_maps_identical)
        np.testing.assert_array_equal(model.softmax_head.weight.data, before)

    def test_separate_heads_keep_sigmoid_maps(self):
        spec = DistortionSpec(delta=3.0)
        before = self.model.sigmoid_head.weight.data.copy()
        report = run_distortion_experiment(self.model, self.samples, spec)
        self.assertTrue(report.sigmoid_maps_identical)
        np.testing.assert_array_equal(self.model.sigmoid_head.weight.data, before)

    def test_broken_invariance_is_reported(self):
        spec = DistortionSpec(kind=DistortionKind.SIGN_COLLAPSE.value, delta=1.0)
        with mock.patch('sigcam_core.distortion._expected_residual',
                        side_effect=lambda spec, features, channel: np.zeros(features[:, 0].shape)):
            report = run_distortion_experiment(self.model, self.samples, spec)
        self.assertFalse(report.valid)
        self.assertIsNotNone(report.offending_index)
        self.assertEqual(report.row()['valid'], 0)

    def test_sweep_and_reports(self):
        reports = run_distortion_sweep(self.model, self.samples, DistortionKind.ADDITIVE_SHIFT)
        self.assertEqual(len(reports), 4)
        frame = reports_frame(reports)
        self.assertEqual(list(frame['kind'].unique()), ['additive_shift'])
        self.assertIn("4 experiment(s), 0 invalid", summary_text(reports))


if __name__ == '__main__':
    unittest.main()
