"""
Dual-branch model: shared backbone, frozen softmax head h and a replicated
sigmoid head h~ trained independently for explanation.

Recognition always uses the softmax branch (k* = argmax y, ties to the
lowest index). The sigmoid branch only supplies evidence for heatmaps.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from sigcam_core.autograd import Tensor, no_grad, sigmoid, softmax
from sigcam_core.errors import ContractError, FrozenParameterError, ShapeError
from sigcam_core.utils import array_hash

from .backbone import Backbone, Head, kaiming_uniform

logger = logging.getLogger(__name__)


class ModelPart(Enum):
    """Parameter groups that can be frozen or trained."""
    BACKBONE = "backbone"
    SOFTMAX_HEAD = "softmax_head"
    SIGMOID_HEAD = "sigmoid_head"


class Branch(Enum):
    """Head used to derive channel weights."""
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


class FeatureStack:
    """Final-conv activations F (batched) with the captured gradient, if any."""

    def __init__(self, tensor: Tensor):
        self.tensor = tensor

    @property
    def batch(self) -> int:
        return self.tensor.shape[0]

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]

    def activations(self, index: int = 0) -> np.ndarray:
        """[N, P, Q] activations of image ``index``."""
        return self.tensor.data[index]

    @property
    def has_gradient(self) -> bool:
        return self.tensor.grad is not None

    def gradient(self, index: int = 0) -> np.ndarray:
        if self.tensor.grad is None:
            raise ContractError("missing gradient capture: run backward on a target that depends on F")
        return self.tensor.grad[index]

    def clear_gradient(self) -> None:
        self.tensor.zero_grad()


@dataclass
class InferenceResult:
    """Softmax recognition plus sigmoid scores for one image."""
    predicted: int
    probs: np.ndarray
    scores: np.ndarray
    features: FeatureStack


class DualBranchModel:
    """Backbone + softmax head h + optional sigmoid head h~."""

    def __init__(self, backbone: Backbone, softmax_head: Head, sigmoid_head: Optional[Head] = None):
        if softmax_head.channels != backbone.out_channels:
            raise ShapeError(f"head expects {softmax_head.channels} channels, backbone yields {backbone.out_channels}")
        if sigmoid_head is not None and sigmoid_head.shapes() != softmax_head.shapes():
            raise ShapeError("sigmoid head must mirror the softmax head shapes")
        self.backbone = backbone
        self.softmax_head = softmax_head
        self.sigmoid_head = sigmoid_head
        self.frozen_snapshot: Dict[str, str] = {}

    @classmethod
    def create(cls, seed: int, num_classes: int, in_channels: int = 3) -> "DualBranchModel":
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        backbone = Backbone.create(rng, in_channels=in_channels)
        head = Head.create(rng, backbone.out_channels, num_classes)
        return cls(backbone, head)

    @property
    def num_classes(self) -> int:
        return self.softmax_head.num_classes

    # -- parameters -------------------------------------------------------
    def part_parameters(self, part: ModelPart) -> Dict[str, Tensor]:
        if part is ModelPart.BACKBONE:
            return self.backbone.named_parameters()
        if part is ModelPart.SOFTMAX_HEAD:
            return self.softmax_head.named_parameters("softmax_head")
        if self.sigmoid_head is None:
            raise ContractError("sigmoid head has not been replicated")
        return self.sigmoid_head.named_parameters("sigmoid_head")

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {**self.backbone.named_parameters(), **self.softmax_head.named_parameters("softmax_head")}
        if self.sigmoid_head is not None:
            named.update(self.sigmoid_head.named_parameters("sigmoid_head"))
        return named

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters().items() if p.requires_grad}

    def parameter_hashes(self, parts: Optional[List[ModelPart]] = None) -> Dict[str, str]:
        named: Dict[str, Tensor] = {}
        if parts is None:
            parts = [p for p in ModelPart if p is not ModelPart.SIGMOID_HEAD or self.sigmoid_head is not None]
        for part in parts:
            named.update(self.part_parameters(part))
        return {name: array_hash(t.data) for name, t in named.items()}

    def parameter_count(self, include_sigmoid: bool = True) -> int:
        named = self.named_parameters()
        return sum(t.size for name, t in named.items()
                   if include_sigmoid or not name.startswith("sigmoid_head"))

    def verify_frozen(self) -> None:
        """Raise if any frozen parameter differs from its snapshot."""
        current = {}
        for part in ModelPart:
            if part is ModelPart.SIGMOID_HEAD and self.sigmoid_head is None:
                continue
            current.update(self.parameter_hashes([part]))
        drifted = [name for name, digest in self.frozen_snapshot.items() if current.get(name) != digest]
        if drifted:
            raise FrozenParameterError(f"frozen parameters changed: {', '.join(drifted)}")

    # -- forward passes ---------------------------------------------------
    def features(self, images: Tensor) -> Tensor:
        """Backbone output with gradient capture enabled."""
        return self.backbone.forward(images).retain_grad()

    def head(self, branch: Branch) -> Head:
        if branch is Branch.SOFTMAX:
            return self.softmax_head
        if self.sigmoid_head is None:
            raise ContractError("sigmoid head has not been replicated")
        return self.sigmoid_head


def _as_batch(images) -> Tensor:
    if isinstance(images, Tensor):
        tensor = images
    else:
        tensor = Tensor(np.asarray(images, dtype=np.float32))
    if tensor.ndim == 3:
        tensor = Tensor(tensor.data[None], dtype=tensor.dtype)
    return tensor


def forward_softmax(model: DualBranchModel, images) -> Tuple[Tensor, Tensor, FeatureStack]:
    """(logits l, probs y, FeatureStack) on the softmax branch."""
    features = model.features(_as_batch(images))
    logits = model.softmax_head.logits(features)
    return logits, softmax(logits), FeatureStack(features)


def forward_sigmoid(model: DualBranchModel, images) -> Tuple[Tensor, Tensor, FeatureStack]:
    """(logits l~, scores s, FeatureStack) on the sigmoid branch."""
    features = model.features(_as_batch(images))
    logits = model.head(Branch.SIGMOID).logits(features)
    return logits, sigmoid(logits), FeatureStack(features)


def infer(model: DualBranchModel, image) -> InferenceResult:
    """k* from the softmax branch, sigmoid scores when h~ exists."""
    with no_grad():
        features = FeatureStack(model.backbone.forward(_as_batch(image)))
        probs = softmax(model.softmax_head.logits(features.tensor)).data[0]
        if model.sigmoid_head is not None:
            scores = sigmoid(model.sigmoid_head.logits(features.tensor)).data[0]
        else:
            scores = np.full(model.num_classes, np.nan, dtype=np.float32)
    return InferenceResult(predicted=int(np.argmax(probs)), probs=probs, scores=scores, features=features)


def predict_batch(model: DualBranchModel, images: np.ndarray, batch_size: int = 128) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax probabilities and argmax predictions for an image array."""
    probs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = Tensor(images[start:start + batch_size])
            probs.append(softmax(model.softmax_head.logits(model.backbone.forward(batch))).data)
    if not probs:
        return np.zeros((0, model.num_classes), dtype=np.float32), np.zeros(0, dtype=np.int64)
    stacked = np.concatenate(probs)
    return stacked, stacked.argmax(axis=1)


def replicate_head(model: DualBranchModel, seed: int, force: bool = False) -> DualBranchModel:
    """Allocate h~ with h's shapes and fresh Kaiming-uniform weights, zero bias."""
    if model.sigmoid_head is not None and not force:
        raise ContractError("sigmoid head already present; pass force=True to re-initialize")
    rng = np.random.Generator(np.random.Philox(key=int(seed) + 1))
    channels, classes = model.softmax_head.weight.shape
    model.sigmoid_head = Head(
        weight=Tensor(kaiming_uniform(rng, (channels, classes), channels), requires_grad=True),
        bias=Tensor(np.zeros(classes, dtype=np.float32), requires_grad=True),
        kind=model.softmax_head.kind,
    )
    logger.info(f"replicated head: {channels}x{classes} sigmoid branch (seed {seed})")
    return model


def freeze(model: DualBranchModel, part: ModelPart) -> None:
    """Stop gradient updates for ``part`` and record its hash snapshot."""
    for tensor in model.part_parameters(part).values():
        tensor.requires_grad = False
        tensor.zero_grad()
    model.frozen_snapshot.update(model.parameter_hashes([part]))
    logger.debug(f"froze {part.value}")


def set_trainable(model: DualBranchModel, part: ModelPart) -> None:
    params = model.part_parameters(part)
    for tensor in params.values():
        tensor.requires_grad = True
    for name in params:
        model.frozen_snapshot.pop(name, None)
