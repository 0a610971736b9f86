"""
Fidelity and weakly supervised localization metrics.

All percentage metrics are in [0, 100]. Localization scores an image by the
best IoU over every connected component box of the thresholded heatmap.
Components use 4-connectivity.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from skimage import measure

from config.constants import GT_LOC_IOU, GT_LOC_THRESHOLD, MBA_IOU_THRESHOLDS, MBA_THRESHOLD_STEP
from .errors import DomainError, ShapeError
from .evaluation_result import BBox, EvalRecord, FidelityRecord, WsolRecord

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Fidelity
# ---------------------------------------------------------------------------

def explanation_image(heatmap: np.ndarray, image: np.ndarray) -> np.ndarray:
    """E = M o x, the heatmap applied to every channel."""
    heatmap = np.asarray(heatmap)
    image = np.asarray(image)
    if heatmap.shape != image.shape[-2:]:
        raise ShapeError(f"heatmap {heatmap.shape} does not match image extent {image.shape[-2:]}")
    return (heatmap[None] * image).astype(image.dtype)


def fidelity_record(score_fn: Callable[[np.ndarray], np.ndarray], image: np.ndarray,
                    heatmap: np.ndarray, target_class: int) -> FidelityRecord:
    """Y and O for one image; ``score_fn`` maps a batch to class scores."""
    batch = np.stack([image, explanation_image(heatmap, image)])
    scores = score_fn(batch)
    return FidelityRecord(full_score=float(scores[0, target_class]),
                          explanation_score=float(scores[1, target_class]))


def average_drop(records: Sequence[FidelityRecord]) -> float:
    """100 * mean(max(0, Y - O) / Y); images with Y <= 1e-12 are skipped."""
    drops = [r.drop for r in records]
    kept = [d for d in drops if d is not None]
    excluded = len(drops) - len(kept)
    if excluded:
        logger.warning(f"average drop: excluded {excluded} image(s) with vanishing full-image score")
    if not kept:
        return float("nan")
    return 100.0 * float(np.mean(kept))


def excluded_count(records: Sequence[FidelityRecord]) -> int:
    return sum(r.drop is None for r in records)


def increase_in_confidence(records: Sequence[FidelityRecord]) -> float:
    if not records:
        return float("nan")
    return 100.0 * sum(r.increased for r in records) / len(records)


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------

def heatmap_to_boxes(heatmap: np.ndarray, threshold: float) -> List[BBox]:
    """Tight boxes of the 4-connected components of {heatmap >= threshold}.

    Zero-valued pixels are never foreground, so an all-zero map has no boxes
    even at threshold 0. Boxes are ordered by descending area; ties keep
    raster-scan label order.
    """
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold {threshold} outside [0, 1]")
    heatmap = np.asarray(heatmap)
    binary = (heatmap >= threshold) & (heatmap > 0)
    if not binary.any():
        return []
    labels = measure.label(binary, connectivity=1)
    boxes = []
    for region in measure.regionprops(labels):
        min_row, min_col, max_row, max_col = region.bbox
        boxes.append(BBox(int(min_col), int(min_row), int(max_col), int(max_row)))
    return sorted(boxes, key=lambda b: -b.area)


def iou(a: BBox, b: BBox) -> float:
    width = min(a.x1, b.x1) - max(a.x0, b.x0)
    height = min(a.y1, b.y1) - max(a.y0, b.y0)
    if width <= 0 or height <= 0:
        return 0.0
    intersection = width * height
    return intersection / float(a.area + b.area - intersection)


def best_iou(boxes: Sequence[BBox], gt_box: BBox) -> float:
    return max((iou(box, gt_box) for box in boxes), default=0.0)


# ---------------------------------------------------------------------------
# Split-level localization
# ---------------------------------------------------------------------------

def _check_lengths(*sequences) -> int:
    lengths = {len(s) for s in sequences}
    if len(lengths) > 1:
        raise ShapeError(f"mismatched split lengths {sorted(lengths)}")
    return lengths.pop() if lengths else 0


def gt_known_flags(gt_boxes: Sequence[BBox], heatmaps: Sequence[np.ndarray],
                   threshold: float = GT_LOC_THRESHOLD, iou_threshold: float = GT_LOC_IOU) -> np.ndarray:
    _check_lengths(gt_boxes, heatmaps)
    return np.array([best_iou(heatmap_to_boxes(h, threshold), box) >= iou_threshold
                     for box, h in zip(gt_boxes, heatmaps)], dtype=bool)


def gt_known_loc(gt_boxes: Sequence[BBox], heatmaps: Sequence[np.ndarray],
                 threshold: float = GT_LOC_THRESHOLD, iou_threshold: float = GT_LOC_IOU) -> float:
    flags = gt_known_flags(gt_boxes, heatmaps, threshold, iou_threshold)
    return 100.0 * float(flags.mean()) if len(flags) else float("nan")


def top1_cls(labels: Sequence[int], predictions: Sequence[int]) -> float:
    n = _check_lengths(labels, predictions)
    if not n:
        return float("nan")
    return 100.0 * float(np.mean(np.asarray(labels) == np.asarray(predictions)))


def top1_loc(gt_boxes: Sequence[BBox], labels: Sequence[int], predictions: Sequence[int],
             heatmaps: Sequence[np.ndarray], threshold: float = GT_LOC_THRESHOLD,
             iou_threshold: float = GT_LOC_IOU) -> float:
    """Correct class and GT-known localization success on the same image."""
    n = _check_lengths(gt_boxes, labels, predictions, heatmaps)
    if not n:
        return float("nan")
    correct = np.asarray(labels) == np.asarray(predictions)
    located = gt_known_flags(gt_boxes, heatmaps, threshold, iou_threshold)
    return 100.0 * float(np.mean(correct & located))


def threshold_grid(step: float = MBA_THRESHOLD_STEP) -> np.ndarray:
    """{0, step, 2*step, ..., 1}."""
    count = int(round(1.0 / step))
    return np.arange(count + 1) / count


def best_iou_curve(heatmap: np.ndarray, gt_box: BBox, thresholds: np.ndarray) -> np.ndarray:
    """Best IoU at every threshold.

    Thresholds falling between the same pair of distinct heatmap values give
    the same binary map, so each distinct map is labelled once.
    """
    values = np.unique(np.asarray(heatmap))
    level = np.searchsorted(values, thresholds, side="left")
    curve = np.zeros(len(thresholds))
    for idx in np.unique(level):
        if idx >= len(values):
            continue
        boxes = heatmap_to_boxes(heatmap, float(min(values[idx], 1.0)))
        curve[level == idx] = best_iou(boxes, gt_box)
    return curve


def max_box_acc_v2(gt_boxes: Sequence[BBox], heatmaps: Sequence[np.ndarray],
                   iou_thresholds: Sequence[float] = MBA_IOU_THRESHOLDS,
                   step: float = MBA_THRESHOLD_STEP) -> float:
    """Mean over IoU thresholds of the best box accuracy across the threshold sweep."""
    n = _check_lengths(gt_boxes, heatmaps)
    if not n:
        return float("nan")
    thresholds = threshold_grid(step)
    curves = np.stack([best_iou_curve(h, box, thresholds) for box, h in zip(gt_boxes, heatmaps)])
    return _box_accuracy(curves, iou_thresholds)


def _box_accuracy(curves: np.ndarray, iou_thresholds: Sequence[float]) -> float:
    """[images, thresholds] IoU curves -> mean over deltas of the best per-threshold accuracy."""
    maxima = [float((curves >= delta).mean(axis=0).max()) for delta in iou_thresholds]
    return 100.0 * float(np.mean(maxima))


def pxap(gt_masks: Sequence[np.ndarray], heatmaps: Sequence[np.ndarray]) -> float:
    """Pixel average precision over the pooled split, step rule.

    AP = sum_j (R_j - R_{j-1}) P_j over distinct score thresholds, highest first.
    """
    _check_lengths(gt_masks, heatmaps)
    if not len(heatmaps):
        raise DomainError("PxAP of an empty split")
    scores = np.concatenate([np.asarray(h, dtype=np.float64).ravel() for h in heatmaps])
    truth = np.concatenate([np.asarray(m, dtype=bool).ravel() for m in gt_masks])
    if scores.shape != truth.shape:
        raise ShapeError("heatmaps and masks cover different pixel counts")
    positives = int(truth.sum())
    if positives == 0:
        raise DomainError("PxAP is undefined without positive pixels")

    order = np.argsort(-scores, kind="stable")
    scores, truth = scores[order], truth[order]
    tp = np.cumsum(truth)
    fp = np.cumsum(~truth)
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    precision = tp[ends] / (tp[ends] + fp[ends])
    recall = tp[ends] / positives
    increments = np.diff(np.r_[0.0, recall])
    return 100.0 * float((increments * precision).sum())


def wsol_record(heatmap: np.ndarray, gt_box: BBox, correct: bool, thresholds: Optional[np.ndarray] = None,
                threshold: float = GT_LOC_THRESHOLD, iou_threshold: float = GT_LOC_IOU) -> WsolRecord:
    thresholds = threshold_grid() if thresholds is None else thresholds
    loc_iou = best_iou(heatmap_to_boxes(heatmap, threshold), gt_box)
    return WsolRecord(correct=bool(correct), loc_iou=loc_iou, located=loc_iou >= iou_threshold,
                      iou_curve=best_iou_curve(heatmap, gt_box, thresholds))


def summarize_records(records: Sequence[EvalRecord],
                      iou_thresholds: Sequence[float] = MBA_IOU_THRESHOLDS) -> Dict[str, float]:
    """All localization columns of one report row; fills ``record.wsol`` on the way.

    Heatmaps explain the ground-truth class. Top-1 Loc only counts images
    with k* == label, where the k* map and the label map coincide.
    """
    if not records:
        raise DomainError("localization summary of an empty split")
    thresholds = threshold_grid()
    for record in records:
        record.wsol = wsol_record(record.heatmap, record.gt_box, record.correct, thresholds)
    correct = np.array([r.wsol.correct for r in records])
    located = np.array([r.wsol.located for r in records])
    return {
        "top1_cls": 100.0 * float(correct.mean()),
        "top1_loc": 100.0 * float((correct & located).mean()),
        "gt_loc": 100.0 * float(located.mean()),
        "mbav2": _box_accuracy(np.stack([r.wsol.iou_curve for r in records]), iou_thresholds),
        "pxap": pxap([r.gt_mask for r in records], [r.heatmap for r in records]),
    }


def summarize_wsol(gt_boxes: Sequence[BBox], gt_masks: Sequence[np.ndarray], labels: Sequence[int],
                   predictions: Sequence[int], heatmaps: Sequence[np.ndarray]) -> Dict[str, float]:
    _check_lengths(gt_boxes, gt_masks, labels, predictions, heatmaps)
    records = [EvalRecord(index=i, label=int(label), predicted=int(predicted), heatmap=heatmap,
                          gt_box=box, gt_mask=mask)
               for i, (box, mask, label, predicted, heatmap)
               in enumerate(zip(gt_boxes, gt_masks, labels, predictions, heatmaps))]
    return summarize_records(records)
