"""Shared fixtures and brute-force oracles for the test suite."""

import os
from collections import deque
from typing import List

import numpy as np

from models.backbone import Backbone, Head
from models.dual_branch import DualBranchModel
from sigcam_core.evaluation_result import BBox
from sigcam_core.synth_data import DatasetSpec

SLOW_TESTS = os.environ.get("SIGCAM_SLOW", "") not in ("", "0")


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def tiny_model(seed: int = 0, num_classes: int = 3, channels=(4, 6)) -> DualBranchModel:
    """Two conv blocks: 8x8 inputs end at 2x2 features."""
    rng = philox(seed)
    backbone = Backbone.create(rng, in_channels=3, channels=channels)
    head = Head.create(rng, backbone.out_channels, num_classes)
    return DualBranchModel(backbone, head)


def tiny_spec(**overrides) -> DatasetSpec:
    values = dict(num_classes=3, image_size=16, train_size=24, val_size=4, test_size=6, seed=5)
    values.update(overrides)
    return DatasetSpec(**values)


def conv_oracle(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    batch, cin, height, width = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.zeros((batch, cin, height + 2 * padding, width + 2 * padding))
    xp[:, :, padding:padding + height, padding:padding + width] = x
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((batch, cout, out_h, out_w))
    for b in range(batch):
        for o in range(cout):
            for r in range(out_h):
                for c in range(out_w):
                    total = 0.0
                    for i in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                total += xp[b, i, r * stride + u, c * stride + v] * kernel[o, i, u, v]
                    out[b, o, r, c] = total
    return out


def flood_fill_boxes(binary: np.ndarray) -> List[BBox]:
    """4-connected components by breadth-first search, largest box first."""
    height, width = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    boxes = []
    for y in range(height):
        for x in range(width):
            if not binary[y, x] or seen[y, x]:
                continue
            queue = deque([(y, x)])
            seen[y, x] = True
            ys, xs = [], []
            while queue:
                cy, cx = queue.popleft()
                ys.append(cy)
                xs.append(cx)
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < height and 0 <= nx < width and binary[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            boxes.append(BBox(min(xs), min(ys), max(xs) + 1, max(ys) + 1))
    return sorted(boxes, key=lambda b: -b.area)


def iou_oracle(a: BBox, b: BBox) -> float:
    inter = 0
    for y in range(min(a.y0, b.y0), max(a.y1, b.y1)):
        for x in range(min(a.x0, b.x0), max(a.x1, b.x1)):
            inter += (a.x0 <= x < a.x1 and a.y0 <= y < a.y1) and (b.x0 <= x < b.x1 and b.y0 <= y < b.y1)
    return inter / float(a.area + b.area - inter)


def best_iou_oracle(heatmap: np.ndarray, gt_box: BBox, threshold: float) -> float:
    boxes = flood_fill_boxes((heatmap >= threshold) & (heatmap > 0))
    return max((iou_oracle(box, gt_box) for box in boxes), default=0.0)


def mbav2_oracle(gt_boxes, heatmaps, iou_thresholds=(0.3, 0.5, 0.7), steps: int = 1000) -> float:
    thresholds = [i / steps for i in range(steps + 1)]
    curves = np.array([[best_iou_oracle(h, box, t) for t in thresholds] for box, h in zip(gt_boxes, heatmaps)])
    return 100.0 * float(np.mean([(curves >= delta).mean(axis=0).max() for delta in iou_thresholds]))


def pxap_oracle(gt_masks, heatmaps) -> float:
    scores = np.concatenate([np.ravel(h) for h in heatmaps]).astype(np.float64)
    truth = np.concatenate([np.ravel(m) for m in gt_masks]).astype(bool)
    positives = truth.sum()
    ap, previous_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        selected = scores >= t
        tp = float((selected & truth).sum())
        precision = tp / selected.sum()
        recall = tp / positives
        ap += (recall - previous_recall) * precision
        previous_recall = recall
    return 100.0 * ap


def box_indicator(box: BBox, height: int, width: int) -> np.ndarray:
    return box.to_mask(height, width).astype(np.float64)
