"""
CAM engine: channel weights on either branch, negative-weight clamping and
heatmap composition.

Composition order for a weight vector w and features F:

    w <- max(0, w)            (only when clamping is on)
    M = sum_i w_i F_i         (linear map, P x Q)
    M <- max(0, M)
    upsample to H x W (corner-aligned bilinear), then min-max normalize

Recognition always comes from the softmax branch; ``CamConfig.branch`` only
selects which head supplies the evidence.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from config.constants import BRANCHES, CAM_METHODS
from models.backbone import HeadKind
from models.dual_branch import Branch, DualBranchModel, FeatureStack, InferenceResult, infer
from .autograd import Tensor, no_grad, sigmoid, softmax, take
from .cam_methods import GradCam, GradCamPlusPlus, LayerCam, ScoreCam, VanillaCam, XGradCam
from .errors import ConfigError, ContractError, ShapeError
from .utils import bilinear_upsample, minmax_normalize

logger = logging.getLogger(__name__)

UPSAMPLE_MODES = ["bilinear", "nearest"]
BACKWARD_TARGETS = ["logit", "score"]


class NormState(Enum):
    RAW = "raw"
    MINMAX = "minmax"


@dataclass
class ChannelWeights:
    """Per-channel weights for one target class."""
    values: np.ndarray
    branch: Branch
    method: str
    target_class: int

    def __len__(self) -> int:
        return len(self.values)

    def clamped(self) -> "ChannelWeights":
        return ChannelWeights(np.maximum(self.values, 0.0), self.branch, self.method, self.target_class)


@dataclass
class Heatmap:
    """Linear map, its rectified version and the normalized image-size map."""
    raw: np.ndarray                        # pre-ReLU, P x Q
    rectified: Optional[np.ndarray] = None
    upsampled: Optional[np.ndarray] = None
    state: NormState = NormState.RAW
    method: str = ""
    branch: str = ""

    @property
    def normalized(self) -> np.ndarray:
        if self.state is not NormState.MINMAX:
            raise ContractError(f"heatmap is {self.state.value}, not min-max normalized")
        return self.upsampled

    @property
    def positive_fraction(self) -> float:
        """Share of linear-map cells that are strictly positive."""
        return float((self.raw > 0).mean())


@dataclass
class CamConfig:
    """Which method, which branch and how to post-process."""
    method: str = "gradcam"
    branch: str = "sigmoid"
    nwc: bool = True
    upsample: str = "bilinear"
    target: str = "logit"

    def validate(self) -> None:
        if self.method not in CAM_METHODS:
            raise ConfigError(f"unknown CAM method '{self.method}'", key="method")
        if self.branch not in BRANCHES:
            raise ConfigError(f"unknown branch '{self.branch}'", key="branch")
        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigError(f"unknown upsample mode '{self.upsample}'", key="upsample")
        if self.target not in BACKWARD_TARGETS:
            raise ConfigError(f"unknown backward target '{self.target}'", key="target")

    @property
    def clamp_negative_weights(self) -> bool:
        # Layer-CAM gates gradients itself.
        return self.nwc and self.method != "layercam"

    @property
    def branch_kind(self) -> Branch:
        return Branch(self.branch)

    def label(self) -> str:
        return f"{self.method}/{self.branch}/nwc={'on' if self.clamp_negative_weights else 'off'}"


# ---------------------------------------------------------------------------
# Gradient capture
# ---------------------------------------------------------------------------

def capture_gradient(model: DualBranchModel, image: np.ndarray, branch: Branch, target_class: int,
                     target: str = "logit") -> FeatureStack:
    """Backward from one class of ``branch`` into the feature tensor F.

    The backbone runs without the tape; F becomes a leaf so frozen parameters
    never receive gradients. ``target='score'`` differentiates s (sigmoid) or
    y (softmax) instead of the logit.
    """
    batch = np.asarray(image)[None] if np.ndim(image) == 3 else np.asarray(image)
    with no_grad():
        activations = model.backbone.forward(Tensor(batch, dtype=batch.dtype)).data
    features = Tensor(activations, requires_grad=True, dtype=activations.dtype)
    head = model.head(branch)
    logits = head.logits(features)
    if not 0 <= target_class < logits.shape[1]:
        raise ContractError(f"class {target_class} outside [0, {logits.shape[1]})")
    if target == "score":
        outputs = sigmoid(logits) if branch is Branch.SIGMOID else softmax(logits)
    else:
        outputs = logits
    take(outputs, (0, target_class)).backward()
    head.weight.zero_grad()
    head.bias.zero_grad()
    return FeatureStack(features)


def branch_logits(model: DualBranchModel, branch: Branch):
    """Batch logit function of one branch, used by Score-CAM."""
    head = model.head(branch)

    def logit_fn(images: np.ndarray) -> np.ndarray:
        with no_grad():
            return head.logits(model.backbone.forward(Tensor(images, dtype=images.dtype))).data
    return logit_fn


# ---------------------------------------------------------------------------
# Channel weights per method
# ---------------------------------------------------------------------------

def cam_weights(model: DualBranchModel, target_class: int, branch: Branch) -> ChannelWeights:
    """w_{.k} of the branch head; M_k = sum_i w_ik F_i once composed."""
    head = model.head(branch)
    if head.kind is not HeadKind.GAP_FC:
        raise ContractError(f"vanilla CAM needs a gap_fc head, got {head.kind.value}")
    return ChannelWeights(VanillaCam(head.weight.data).weights(target_class), branch, "cam", target_class)


def gradcam_weights(features: FeatureStack, branch: Branch, target_class: int, index: int = 0) -> ChannelWeights:
    values = GradCam(features.activations(index), features.gradient(index)).weights()
    return ChannelWeights(values, branch, "gradcam", target_class)


def gradcampp_weights(features: FeatureStack, branch: Branch, target_class: int, index: int = 0) -> ChannelWeights:
    values = GradCamPlusPlus(features.activations(index), features.gradient(index)).weights()
    return ChannelWeights(values, branch, "gradcampp", target_class)


def xgradcam_weights(features: FeatureStack, branch: Branch, target_class: int, index: int = 0) -> ChannelWeights:
    values = XGradCam(features.activations(index), features.gradient(index)).weights()
    return ChannelWeights(values, branch, "xgradcam", target_class)


def layercam_map(features: FeatureStack, index: int = 0) -> np.ndarray:
    """Linear Layer-CAM map; no clamping is applied on top."""
    return LayerCam(features.activations(index), features.gradient(index)).linear_map()


def scorecam_weights(model: DualBranchModel, image: np.ndarray, features: FeatureStack,
                     target_class: int, branch: Branch, index: int = 0) -> ChannelWeights:
    method = ScoreCam(branch_logits(model, branch), np.asarray(image), features.activations(index), target_class)
    return ChannelWeights(method.weights(), branch, "scorecam", target_class)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def linear_map(weights: np.ndarray, activations: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (activations.shape[0],):
        raise ShapeError(f"{weights.shape[0] if weights.ndim else 0} weights for {activations.shape[0]} channels")
    return np.tensordot(weights, activations.astype(np.float64), axes=1)


def upsample(values: np.ndarray, height: int, width: int, mode: str = "bilinear") -> np.ndarray:
    if mode == "nearest":
        rows = (np.arange(height) * values.shape[0]) // height
        cols = (np.arange(width) * values.shape[1]) // width
        return np.asarray(values, dtype=np.float64)[rows][:, cols]
    return bilinear_upsample(values, height, width)


def finalize_map(raw: np.ndarray, size: Tuple[int, int], mode: str = "bilinear",
                 method: str = "", branch: str = "") -> Heatmap:
    """ReLU, upsample and min-max normalize a linear map."""
    rectified = np.maximum(raw, 0.0)
    normalized = minmax_normalize(upsample(rectified, size[0], size[1], mode))
    if not normalized.any():
        logger.debug(f"{method}/{branch}: heatmap is empty after ReLU")
    return Heatmap(raw=raw, rectified=rectified, upsampled=normalized, state=NormState.MINMAX,
                   method=method, branch=branch)


def compose_heatmap(weights: ChannelWeights, activations: np.ndarray, config: CamConfig,
                    size: Optional[Tuple[int, int]] = None) -> Heatmap:
    """Clamp (optional), combine, rectify, upsample and normalize."""
    if len(weights) != activations.shape[0]:
        raise ShapeError(f"{len(weights)} weights for {activations.shape[0]} channels")
    if config.clamp_negative_weights:
        weights = weights.clamped()
    size = size or activations.shape[1:]
    raw = linear_map(weights.values, activations)
    return finalize_map(raw, size, config.upsample, weights.method, weights.branch.value)


def explain(model: DualBranchModel, image: np.ndarray, config: CamConfig,
            target_class: Optional[int] = None) -> Tuple[InferenceResult, Heatmap]:
    """Predict with the softmax branch and explain with the configured branch.

    ``target_class`` defaults to k*; pass the ground-truth label for
    GT-known localization.
    """
    config.validate()
    image = np.asarray(image)
    result = infer(model, image)
    k = result.predicted if target_class is None else int(target_class)
    branch = config.branch_kind
    size = image.shape[-2:]

    if not METHOD_CLASSES[config.method].needs_gradient:
        if config.method == "cam":
            weights = cam_weights(model, k, branch)
        else:
            weights = scorecam_weights(model, image, result.features, k, branch)
        heatmap = compose_heatmap(weights, result.features.activations(0), config, size)
    else:
        features = capture_gradient(model, image, branch, k, config.target)
        if config.method == "layercam":
            heatmap = finalize_map(layercam_map(features), size, config.upsample, "layercam", branch.value)
        else:
            weights = METHOD_WEIGHTS[config.method](features, branch, k)
            heatmap = compose_heatmap(weights, features.activations(0), config, size)
    return result, heatmap


METHOD_WEIGHTS = {
    "gradcam": gradcam_weights,
    "gradcampp": gradcampp_weights,
    "xgradcam": xgradcam_weights,
}

METHOD_CLASSES = {
    "cam": VanillaCam,
    "gradcam": GradCam,
    "gradcampp": GradCamPlusPlus,
    "xgradcam": XGradCam,
    "layercam": LayerCam,
    "scorecam": ScoreCam,
}
