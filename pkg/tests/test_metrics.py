import unittest

import numpy as np
from sklearn.metrics import average_precision_score

from sigcam_core.errors import DomainError
from sigcam_core.evaluation_result import BBox, EvalRecord, FidelityRecord
from sigcam_core.metrics import (
    average_drop, best_iou_curve, explanation_image, fidelity_record, gt_known_loc, heatmap_to_boxes,
    increase_in_confidence, iou, max_box_acc_v2, pxap, summarize_records, summarize_wsol, threshold_grid, top1_cls,
    top1_loc, wsol_record,
)
from tests.helpers import (
    best_iou_oracle, box_indicator, flood_fill_boxes, iou_oracle, mbav2_oracle, philox, pxap_oracle,
)


def random_box(rng, size=8):
    x0, y0 = (int(v) for v in rng.integers(0, size - 1, 2))
    x1 = int(rng.integers(x0 + 1, size + 1))
    y1 = int(rng.integers(y0 + 1, size + 1))
    return BBox(x0, y0, x1, y1)


def blocky_heatmap(rng, size=8):
    """Coarse random map so that thresholding yields several components."""
    coarse = rng.random((size // 2, size // 2))
    coarse[coarse < 0.4] = 0.0
    return np.kron(coarse, np.ones((2, 2)))


def scaled_heatmap(rng, size=8):
    """Blocky map with a peak below 1; every other map is quantized so grid thresholds land on its values."""
    heatmap = blocky_heatmap(rng, size) * rng.uniform(0.2, 1.0)
    if rng.random() < 0.5:
        heatmap = np.round(heatmap, 2)
    return heatmap


class TestFidelity(unittest.TestCase):
    def test_explanation_image(self):
        x = philox(1).random((3, 4, 4))
        np.testing.assert_array_equal(explanation_image(np.ones((4, 4)), x), x)
        np.testing.assert_array_equal(explanation_image(np.zeros((4, 4)), x), 0)

    def test_average_drop_examples(self):
        self.assertAlmostEqual(average_drop([FidelityRecord(0.8, 0.6)]), 25.0)
        self.assertEqual(average_drop([FidelityRecord(0.5, 0.7), FidelityRecord(0.3, 0.3)]), 0.0)
        self.assertAlmostEqual(average_drop([FidelityRecord(y, y / 2) for y in (0.2, 0.4, 0.9)]), 50.0)

    def test_vanishing_scores_are_excluded(self):
        records = [FidelityRecord(0.0, 0.0), FidelityRecord(0.8, 0.6)]
        self.assertAlmostEqual(average_drop(records), 25.0)
        self.assertTrue(np.isnan(average_drop([FidelityRecord(0.0, 0.1)])))

    def test_increase_in_confidence(self):
        self.assertEqual(increase_in_confidence([FidelityRecord(0.1, 0.2)] * 3), 100.0)
        self.assertEqual(increase_in_confidence([FidelityRecord(0.3, 0.2)] * 3), 0.0)
        records = [FidelityRecord(0.1, 0.2)] + [FidelityRecord(0.3, 0.2)] * 3
        self.assertEqual(increase_in_confidence(records), 25.0)

    def test_average_drop_matches_oracle(self):
        rng = philox(2)
        for _ in range(100):
            full, explained = rng.random(6), rng.random(6)
            records = [FidelityRecord(float(y), float(o)) for y, o in zip(full, explained)]
            expected = 100.0 * np.mean([max(0.0, y - o) / y for y, o in zip(full, explained)])
            self.assertAlmostEqual(average_drop(records), expected, places=9)

    def test_fidelity_record_uses_target_class(self):
        x = philox(3).random((3, 4, 4))
        record = fidelity_record(lambda b: b.sum(axis=(2, 3)), x, np.full((4, 4), 0.5), target_class=1)
        self.assertAlmostEqual(record.full_score, x[1].sum())
        self.assertAlmostEqual(record.explanation_score, x[1].sum() / 2)


class TestBoxes(unittest.TestCase):
    def test_filled_rectangle(self):
        heatmap = box_indicator(BBox(2, 1, 6, 4), 8, 8)
        for threshold in (0.001, 0.5, 1.0):
            self.assertEqual(heatmap_to_boxes(heatmap, threshold), [BBox(2, 1, 6, 4)])

    def test_two_blobs(self):
        heatmap = box_indicator(BBox(0, 0, 2, 2), 8, 8) + box_indicator(BBox(4, 4, 8, 8), 8, 8)
        self.assertEqual(heatmap_to_boxes(heatmap, 0.5), [BBox(4, 4, 8, 8), BBox(0, 0, 2, 2)])

    def test_diagonal_pixels_are_separate(self):
        heatmap = np.eye(3)
        self.assertEqual(len(heatmap_to_boxes(heatmap, 0.5)), 3)

    def test_zero_map_has_no_boxes_at_threshold_zero(self):
        self.assertEqual(heatmap_to_boxes(np.zeros((4, 4)), 0.0), [])

    def test_zero_map_has_no_boxes(self):
        for threshold in (0.0, 0.2, 1.0):
            with self.subTest(threshold=threshold):
                self.assertEqual(heatmap_to_boxes(np.zeros((8, 8)), threshold), [])
        with self.assertRaises(DomainError):
            heatmap_to_boxes(np.zeros((4, 4)), 1.5)

    def test_iou_examples(self):
        a = BBox(0, 0, 10, 10)
        self.assertEqual(iou(a, a), 1.0)
        self.assertEqual(iou(a, BBox(10, 10, 12, 12)), 0.0)
        self.assertAlmostEqual(iou(a, BBox(5, 5, 15, 15)), 25 / 175)

    def test_boxes_and_iou_match_oracles(self):
        rng = philox(4)
        for trial in range(100):
            heatmap = blocky_heatmap(rng)
            threshold = float(rng.random())
            binary = (heatmap >= threshold) & (heatmap > 0)
            a, b = random_box(rng), random_box(rng)
            with self.subTest(trial=trial):
                self.assertEqual(sorted(box.as_tuple() for box in heatmap_to_boxes(heatmap, threshold)),
                                 sorted(box.as_tuple() for box in flood_fill_boxes(binary)))
                self.assertAlmostEqual(iou(a, b), iou_oracle(a, b), places=12)


class TestLocalization(unittest.TestCase):
    def test_gt_known_examples(self):
        boxes = [BBox(0, 0, 4, 4), BBox(2, 2, 8, 8)]
        perfect = [box_indicator(b, 8, 8) for b in boxes]
        self.assertEqual(gt_known_loc(boxes, perfect), 100.0)
        self.assertEqual(gt_known_loc(boxes, [np.zeros((8, 8))] * 2), 0.0)

    def test_gt_known_hand_counted(self):
        gt = BBox(0, 0, 4, 4)
        heatmaps = [
            box_indicator(gt, 8, 8),                      # IoU 1
            box_indicator(BBox(0, 0, 4, 2), 8, 8),        # IoU 0.5
            box_indicator(BBox(0, 0, 2, 4), 8, 8) * 0.1,  # below threshold 0.2
            box_indicator(BBox(4, 4, 8, 8), 8, 8),        # disjoint
        ]
        self.assertEqual(gt_known_loc([gt] * 4, heatmaps), 50.0)

    def test_top1(self):
        boxes = [BBox(0, 0, 4, 4)] * 4
        maps = [box_indicator(boxes[0], 8, 8)] * 4
        self.assertEqual(top1_loc(boxes, [0, 1, 2, 3], [1, 2, 3, 0], maps), 0.0)
        self.assertEqual(top1_loc(boxes, [0, 1, 2, 3], [0, 1, 2, 3], maps), 100.0)
        self.assertEqual(top1_cls([0, 1, 2, 3], [0, 1, 0, 0]), 50.0)

    def test_top1_loc_matches_oracle(self):
        for seed in range(100):
            rng = philox(seed)
            boxes = [random_box(rng) for _ in range(8)]
            maps = [scaled_heatmap(rng) for _ in range(8)]
            labels = list(rng.integers(0, 3, 8))
            predictions = list(rng.integers(0, 3, 8))
            hits = [l == p and best_iou_oracle(h, b, 0.2) >= 0.5
                    for b, h, l, p in zip(boxes, maps, labels, predictions)]
            with self.subTest(seed=seed):
                self.assertEqual(top1_loc(boxes, labels, predictions, maps), 100.0 * np.mean(hits))

    def test_threshold_grid(self):
        grid = threshold_grid()
        self.assertEqual(len(grid), 1001)
        self.assertEqual(grid[0], 0.0)
        self.assertEqual(grid[-1], 1.0)

    def test_mbav2_extremes(self):
        boxes = [BBox(1, 1, 5, 6), BBox(0, 3, 8, 8)]
        self.assertEqual(max_box_acc_v2(boxes, [box_indicator(b, 8, 8) for b in boxes]), 100.0)
        self.assertEqual(max_box_acc_v2(boxes, [np.zeros((8, 8))] * 2), 0.0)

    def test_mbav2_matches_brute_force(self):
        for seed in range(100):
            rng = philox(1000 + seed)
            boxes = [random_box(rng) for _ in range(6)]
            maps = [scaled_heatmap(rng) for _ in range(6)]
            with self.subTest(seed=seed):
                self.assertAlmostEqual(max_box_acc_v2(boxes, maps, step=0.02),
                                       mbav2_oracle(boxes, maps, steps=50), places=9)

    def test_best_iou_curve_groups_level_sets(self):
        thresholds = threshold_grid(0.05)
        for seed in range(100):
            rng = philox(2000 + seed)
            heatmap, box = scaled_heatmap(rng), random_box(rng)
            expected = [best_iou_oracle(heatmap, box, t) for t in thresholds]
            with self.subTest(seed=seed, peak=float(heatmap.max())):
                np.testing.assert_allclose(best_iou_curve(heatmap, box, thresholds), expected)

    def test_curve_is_zero_above_the_peak(self):
        heatmap = 0.3 * box_indicator(BBox(1, 1, 5, 5), 8, 8)
        curve = best_iou_curve(heatmap, BBox(1, 1, 5, 5), np.array([0.0, 0.3, 0.31, 0.9, 1.0]))
        np.testing.assert_array_equal(curve, [1.0, 1.0, 0.0, 0.0, 0.0])


class TestPxAP(unittest.TestCase):
    def setUp(self):
        rng = philox(8)
        self.masks = [box_indicator(random_box(rng), 8, 8).astype(bool) for _ in range(4)]

    def test_perfect_ranking(self):
        self.assertAlmostEqual(pxap(self.masks, [m.astype(float) for m in self.masks]), 100.0)

    def test_worst_ranking_is_prevalence(self):
        prevalence = np.mean(np.concatenate([m.ravel() for m in self.masks]))
        self.assertAlmostEqual(pxap(self.masks, [1.0 - m for m in self.masks]), 100.0 * prevalence)

    def test_matches_oracles(self):
        rng = philox(9)
        truth = np.concatenate([m.ravel() for m in self.masks])
        for trial in range(100):
            maps = [np.round(rng.random((8, 8)), 2) for _ in self.masks]
            value = pxap(self.masks, maps)
            scores = np.concatenate([h.ravel() for h in maps])
            with self.subTest(trial=trial):
                self.assertAlmostEqual(value, pxap_oracle(self.masks, maps), places=9)
                self.assertAlmostEqual(value, 100.0 * average_precision_score(truth, scores), places=9)

    def test_undefined_cases(self):
        with self.assertRaises(DomainError):
            pxap([np.zeros((4, 4), dtype=bool)], [np.ones((4, 4))])
        with self.assertRaises(DomainError):
            pxap([], [])


class TestSummary(unittest.TestCase):
    def test_summary_columns(self):
        boxes = [BBox(0, 0, 4, 4), BBox(2, 2, 6, 6)]
        maps = [box_indicator(b, 8, 8) for b in boxes]
        masks = [m.astype(bool) for m in maps]
        summary = summarize_wsol(boxes, masks, [0, 1], [0, 0], maps)
        self.assertEqual(summary, {"top1_cls": 50.0, "top1_loc": 50.0, "gt_loc": 100.0,
                                   "mbav2": 100.0, "pxap": 100.0})

    def test_records_carry_per_image_terms(self):
        rng = philox(12)
        boxes = [random_box(rng) for _ in range(5)]
        maps = [scaled_heatmap(rng) for _ in range(5)]
        records = [EvalRecord(index=i, label=i % 2, predicted=0, heatmap=h, gt_box=b,
                              gt_mask=box_indicator(b, 8, 8).astype(bool))
                   for i, (b, h) in enumerate(zip(boxes, maps))]
        summary = summarize_records(records)
        for record in records:
            loc_iou = best_iou_oracle(record.heatmap, record.gt_box, 0.2)
            self.assertEqual(record.wsol.correct, record.label == 0)
            self.assertAlmostEqual(record.wsol.loc_iou, loc_iou, places=12)
            self.assertEqual(record.wsol.located, loc_iou >= 0.5)
            self.assertEqual(len(record.wsol.iou_curve), 1001)
        self.assertEqual(summary, summarize_wsol(boxes, [r.gt_mask for r in records], [r.label for r in records],
                                                 [0] * 5, maps))
        self.assertAlmostEqual(summary["mbav2"], max_box_acc_v2(boxes, maps), places=12)

    def test_wsol_record_curve(self):
        box = BBox(2, 2, 6, 6)
        record = wsol_record(0.5 * box_indicator(box, 8, 8), box, True, thresholds=np.array([0.0, 0.5, 0.6]))
        self.assertTrue(record.located)
        np.testing.assert_array_equal(record.iou_curve, [1.0, 1.0, 0.0])

    def test_empty_records(self):
        with self.assertRaises(DomainError):
            summarize_records([])


if __name__ == '__main__':
    unittest.main()
