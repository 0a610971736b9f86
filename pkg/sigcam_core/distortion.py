"""
Softmax distortion lab.

Two head perturbations leave every softmax output unchanged but move the
class activation map:

* additive shift: w'_ik = w_ik + delta for one channel i and every class k.
  Logits move by delta * mean(F_i) for all classes, so M'_k - M_k = delta * F_i.
* sign collapse: w'_ik = w_ik - delta for every weight. Logits move by
  -delta * sum_i mean(F_i); with delta > max w every weight is negative.

The lab applies a perturbation to the softmax head, checks the invariances
image by image and measures the effect on heatmaps and localization. Head
arithmetic runs in float64 on captured features.
"""

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from config.constants import COLLAPSE_DELTA_MULTIPLIERS, GT_LOC_THRESHOLD, SHIFT_DELTA_MULTIPLIERS
from models.backbone import Head
from models.dual_branch import Branch, DualBranchModel
from .autograd import Tensor, no_grad
from .cam_engine import CamConfig, ChannelWeights, compose_heatmap
from .errors import ConfigError, DomainError, ShapeError
from .metrics import gt_known_flags
from .synth_data import SynthSample, stack_images

logger = logging.getLogger(__name__)

PROB_TOLERANCE = 1e-6
RESIDUAL_TOLERANCE = 1e-5
EMPTY_MAP_FRACTION = 0.01


class DistortionKind(Enum):
    ADDITIVE_SHIFT = "additive_shift"
    SIGN_COLLAPSE = "sign_collapse"


@dataclass
class DistortionSpec:
    """One perturbation. ``channel = -1`` picks the channel with the largest mean activation."""
    kind: str = DistortionKind.ADDITIVE_SHIFT.value
    channel: int = -1
    delta: float = 1.0
    nwc: bool = False

    def validate(self) -> None:
        try:
            kind = DistortionKind(self.kind)
        except ValueError:
            raise ConfigError(f"unknown distortion kind '{self.kind}'", key="kind")
        if not math.isfinite(self.delta):
            raise ConfigError("delta must be finite", key="delta")
        if kind is DistortionKind.SIGN_COLLAPSE and self.delta < 0:
            raise ConfigError("sign collapse needs delta >= 0", key="delta")
        if self.channel < -1:
            raise ConfigError("channel must be -1 (auto) or a channel index", key="channel")

    @property
    def distortion_kind(self) -> DistortionKind:
        return DistortionKind(self.kind)


@dataclass
class DistortionReport:
    """Invariance checks and effect sizes of one perturbation over a split."""
    kind: str
    delta: float
    channel: int
    images: int
    max_prob_deviation: float
    argmax_agreement: float
    max_residual_error: float
    heatmap_linf: float
    heatmap_l1: float
    flipped_sign_fraction: float
    positive_fraction_before: float
    positive_fraction_after: float
    empty_map_rate: float
    gt_loc_softmax_before: float
    gt_loc_softmax_after: float
    gt_loc_sigmoid_before: float
    gt_loc_sigmoid_after: float
    sigmoid_maps_identical: bool
    valid: bool
    offending_index: Optional[int] = None

    def row(self) -> dict:
        row = asdict(self)
        row["offending_index"] = -1 if self.offending_index is None else self.offending_index
        row["sigmoid_maps_identical"] = int(self.sigmoid_maps_identical)
        row["valid"] = int(self.valid)
        return row

    def __str__(self) -> str:
        status = "valid" if self.valid else f"INVALID at image {self.offending_index}"
        return (f"{self.kind} delta={self.delta:.4g} channel={self.channel}: {status}; "
                f"max |dp|={self.max_prob_deviation:.2e}, agreement={self.argmax_agreement:.3f}, "
                f"L1 change={self.heatmap_l1:.4f}, GT-Loc softmax {self.gt_loc_softmax_before:.1f}"
                f"->{self.gt_loc_softmax_after:.1f}, sigmoid {self.gt_loc_sigmoid_before:.1f}"
                f"->{self.gt_loc_sigmoid_after:.1f}")


# ---------------------------------------------------------------------------
# Head perturbations
# ---------------------------------------------------------------------------

def _head_with_weight(head: Head, weight: np.ndarray) -> Head:
    return Head(weight=Tensor(weight, dtype=weight.dtype),
                bias=Tensor(head.bias.data.copy(), dtype=head.bias.dtype), kind=head.kind)


def apply_additive_shift(head: Head, channel: int, delta: float) -> Head:
    """w'_{i,.} = w_{i,.} + delta; every other weight and the bias are copied."""
    if not 0 <= channel < head.channels:
        raise ShapeError(f"channel {channel} outside [0, {head.channels})")
    weight = head.weight.data.copy()
    weight[channel, :] += weight.dtype.type(delta)
    return _head_with_weight(head, weight)


def apply_sign_collapse(head: Head, delta: float) -> Head:
    """w' = w - delta for every weight."""
    if delta < 0:
        raise DomainError("sign collapse needs delta >= 0")
    weight = head.weight.data - head.weight.data.dtype.type(delta)
    return _head_with_weight(head, weight)


def perturb(head: Head, spec: DistortionSpec, channel: int) -> Head:
    if spec.distortion_kind is DistortionKind.ADDITIVE_SHIFT:
        return apply_additive_shift(head, channel, spec.delta)
    return apply_sign_collapse(head, spec.delta)


def head_as_float64(head: Head) -> Head:
    return Head(weight=Tensor(head.weight.data, dtype=np.float64),
                bias=Tensor(head.bias.data, dtype=np.float64), kind=head.kind)


def delta_grid(head: Head, kind: DistortionKind, multipliers: Optional[Sequence[float]] = None) -> List[float]:
    """Shift: multiples of std(w). Collapse: multiples of max|w|."""
    weight = head.weight.data.astype(np.float64)
    if kind is DistortionKind.ADDITIVE_SHIFT:
        base, multipliers = float(weight.std()), multipliers or SHIFT_DELTA_MULTIPLIERS
    else:
        base, multipliers = float(np.abs(weight).max()), multipliers or COLLAPSE_DELTA_MULTIPLIERS
    return [float(m) * base for m in multipliers]


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------

def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def split_features(model: DualBranchModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Backbone features of a whole split as float64 [B, N, P, Q]."""
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(model.backbone.forward(Tensor(images[start:start + batch_size])).data)
    return np.concatenate(chunks).astype(np.float64)


def _cam_maps(weight: np.ndarray, features: np.ndarray, classes: np.ndarray, nwc: bool,
              size, branch: Branch):
    """Linear and normalized CAM maps for class ``classes[n]`` of every image."""
    config = CamConfig(method="cam", branch=branch.value, nwc=nwc)
    linear, normalized = [], []
    for activations, k in zip(features, classes):
        heatmap = compose_heatmap(ChannelWeights(weight[:, k], branch, "cam", int(k)), activations, config, size)
        linear.append(np.tensordot(weight[:, k], activations, axes=1))
        normalized.append(heatmap.upsampled)
    return np.stack(linear), np.stack(normalized)


def _expected_residual(spec: DistortionSpec, features: np.ndarray, channel: int) -> np.ndarray:
    if spec.distortion_kind is DistortionKind.ADDITIVE_SHIFT:
        return spec.delta * features[:, channel]
    return -spec.delta * features.sum(axis=1)


def _sigmoid_head_under(model: DualBranchModel, perturbed: Head) -> Head:
    """Copy of the sigmoid head while ``perturbed`` is written into the model's softmax head."""
    weight = model.softmax_head.weight.data
    saved = weight.copy()
    try:
        np.copyto(weight, perturbed.weight.data, casting="unsafe")
        return model.sigmoid_head.copy()
    finally:
        np.copyto(weight, saved)


def pick_channel(features: np.ndarray) -> int:
    """Channel with the largest mean activation over the split."""
    return int(np.argmax(features.mean(axis=(0, 2, 3))))


def run_distortion_experiment(model: DualBranchModel, samples: Sequence[SynthSample],
                              spec: DistortionSpec, features: Optional[np.ndarray] = None) -> DistortionReport:
    """Perturb the softmax head and compare every image before and after."""
    spec.validate()
    images, labels = stack_images(list(samples))
    if not len(images):
        raise ShapeError("distortion experiment needs at least one image")
    if features is None:
        features = split_features(model, images)
    channel = pick_channel(features) if spec.channel == -1 else spec.channel
    size = images.shape[-2:]

    head = head_as_float64(model.softmax_head)
    perturbed = perturb(head, spec, channel)
    pooled = features.mean(axis=(2, 3))
    w, w_new, bias = head.weight.data, perturbed.weight.data, head.bias.data
    probs = _softmax_rows(pooled @ w + bias)
    probs_new = _softmax_rows(pooled @ w_new + bias)
    deviation = np.abs(probs_new - probs).max(axis=1)
    agree = probs.argmax(axis=1) == probs_new.argmax(axis=1)

    linear, maps = _cam_maps(w, features, labels, spec.nwc, size, Branch.SOFTMAX)
    linear_new, maps_new = _cam_maps(w_new, features, labels, spec.nwc, size, Branch.SOFTMAX)
    residual = np.abs((linear_new - linear) - _expected_residual(spec, features, channel)).reshape(len(images), -1)
    residual_error = residual.max(axis=1)

    bad = np.nonzero((deviation >= PROB_TOLERANCE) | ~agree | (residual_error >= RESIDUAL_TOLERANCE))[0]
    offending = int(bad[0]) if len(bad) else None
    if offending is not None:
        logger.warning(f"{spec.kind} delta={spec.delta:.4g}: invariance broken at image {offending}")

    positive_before = (linear > 0).reshape(len(images), -1).mean(axis=1)
    positive_after = (linear_new > 0).reshape(len(images), -1).mean(axis=1)
    boxes = [s.gt_box for s in samples]
    report_fields = dict(
        gt_loc_softmax_before=100.0 * gt_known_flags(boxes, list(maps), GT_LOC_THRESHOLD).mean(),
        gt_loc_softmax_after=100.0 * gt_known_flags(boxes, list(maps_new), GT_LOC_THRESHOLD).mean(),
        gt_loc_sigmoid_before=float("nan"),
        gt_loc_sigmoid_after=float("nan"),
        sigmoid_maps_identical=True,
    )
    if model.sigmoid_head is not None:
        snapshot = model.sigmoid_head.copy()
        after_head = _sigmoid_head_under(model, perturbed)
        _, sig_maps = _cam_maps(snapshot.weight.data.astype(np.float64), features, labels, True, size,
                                Branch.SIGMOID)
        _, sig_maps_new = _cam_maps(after_head.weight.data.astype(np.float64), features, labels, True, size,
                                    Branch.SIGMOID)
        report_fields.update(
            gt_loc_sigmoid_before=100.0 * gt_known_flags(boxes, list(sig_maps)).mean(),
            gt_loc_sigmoid_after=100.0 * gt_known_flags(boxes, list(sig_maps_new)).mean(),
            sigmoid_maps_identical=bool(np.array_equal(sig_maps, sig_maps_new)),
        )

    report = DistortionReport(
        kind=spec.kind,
        delta=float(spec.delta),
        channel=channel if spec.distortion_kind is DistortionKind.ADDITIVE_SHIFT else -1,
        images=len(images),
        max_prob_deviation=float(deviation.max()),
        argmax_agreement=float(agree.mean()),
        max_residual_error=float(residual_error.max()),
        heatmap_linf=float(np.abs(maps_new - maps).max()),
        heatmap_l1=float(np.abs(maps_new - maps).reshape(len(images), -1).sum(axis=1).mean()),
        flipped_sign_fraction=float((np.sign(w_new) != np.sign(w)).mean()),
        positive_fraction_before=float(positive_before.mean()),
        positive_fraction_after=float(positive_after.mean()),
        empty_map_rate=float((positive_after < EMPTY_MAP_FRACTION).mean()),
        valid=offending is None,
        offending_index=offending,
        **report_fields,
    )
    logger.info(str(report))
    return report


def run_distortion_sweep(model: DualBranchModel, samples: Sequence[SynthSample], kind: DistortionKind,
                         channel: int = -1, multipliers: Optional[Sequence[float]] = None,
                         nwc: bool = False) -> List[DistortionReport]:
    """One report per delta of the default (or given) grid."""
    images, _ = stack_images(list(samples))
    features = split_features(model, images)
    reports = []
    for delta in delta_grid(model.softmax_head, kind, multipliers):
        spec = DistortionSpec(kind=kind.value, channel=channel, delta=delta, nwc=nwc)
        reports.append(run_distortion_experiment(model, samples, spec, features=features))
    return reports


def reports_frame(reports: Sequence[DistortionReport]) -> pd.DataFrame:
    return pd.DataFrame([r.row() for r in reports])


def summary_text(reports: Sequence[DistortionReport]) -> str:
    lines = ["Distortion lab summary", "=" * 60]
    lines.extend(str(r) for r in reports)
    invalid = sum(not r.valid for r in reports)
    lines.append("=" * 60)
    lines.append(f"{len(reports)} experiment(s), {invalid} invalid")
    return "\n".join(lines) + "\n"
