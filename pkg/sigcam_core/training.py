"""
Two-phase training for the dual-branch model.

1. ``softmax_pretrain`` trains backbone + softmax head with cross-entropy.
2. ``sigmoid_finetune`` trains only the replicated sigmoid head with the
   class-balanced binary cross-entropy; backbone and softmax head are frozen
   and checked against their hash snapshot after every epoch.

Both loops are sequential and fully determined by ``TrainConfig.seed``.
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from config.constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
from models.dual_branch import DualBranchModel, ModelPart, freeze, predict_batch, set_trainable
from .autograd import Tensor, log_softmax, mul, no_grad, scale, softplus, take, tensor_sum
from .errors import ConfigError, ContractError, DomainError, NonFiniteError
from .synth_data import SynthSample, stack_images

logger = logging.getLogger(__name__)


class TrainPhase(Enum):
    SOFTMAX_PRETRAIN = "softmax_pretrain"
    SIGMOID_FINETUNE = "sigmoid_finetune"


class PosWeightMode(Enum):
    """Positive:negative coefficient ratio of the balanced BCE."""
    BALANCED = "balanced"   # C - 1
    HALF = "half"           # (C - 1) / 2
    NONE = "none"           # 1

    def ratio(self, num_classes: int) -> float:
        if self is PosWeightMode.BALANCED:
            return float(num_classes - 1)
        if self is PosWeightMode.HALF:
            return (num_classes - 1) / 2.0
        return 1.0

    def label(self, num_classes: int) -> str:
        """Report label such as '3:1'."""
        return f"{self.ratio(num_classes):g}:1"


@dataclass
class TrainConfig:
    """Settings for one training phase; see config/experiments/*.cfg."""

    phase: str = TrainPhase.SOFTMAX_PRETRAIN.value
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    pos_weight_mode: str = PosWeightMode.BALANCED.value
    flip: bool = True

    @classmethod
    def default_for(cls, phase: TrainPhase, **overrides) -> "TrainConfig":
        if phase is TrainPhase.SIGMOID_FINETUNE:
            values = dict(phase=phase.value, epochs=10, learning_rate=3e-3)
        else:
            values = dict(phase=phase.value)
        values.update(overrides)
        return cls(**values)

    def validate(self) -> None:
        try:
            TrainPhase(self.phase)
        except ValueError:
            raise ConfigError(f"unknown phase '{self.phase}'", key="phase")
        try:
            PosWeightMode(self.pos_weight_mode)
        except ValueError:
            raise ConfigError(f"unknown pos_weight_mode '{self.pos_weight_mode}'", key="pos_weight_mode")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="batch_size")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", key="epochs")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0", key="learning_rate")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", key="weight_decay")

    @property
    def train_phase(self) -> TrainPhase:
        return TrainPhase(self.phase)

    @property
    def pos_weight(self) -> PosWeightMode:
        return PosWeightMode(self.pos_weight_mode)


@dataclass
class OptimizerState:
    """Adam moment buffers keyed by parameter name."""

    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


@dataclass
class TrainingHistory:
    """Per-epoch averages for one phase."""

    phase: str
    epoch_losses: List[float] = field(default_factory=list)
    epoch_accuracies: List[float] = field(default_factory=list)
    final_accuracy: float = float("nan")
    wall_seconds: float = 0.0


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimizerState,
              lr: float, weight_decay: float) -> OptimizerState:
    """Adam with bias correction; decoupled weight decay shrinks params first."""
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ContractError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        grad = grad.astype(np.float64)
        m = state.first_moment.get(name, np.zeros(param.shape))
        v = state.second_moment.get(name, np.zeros(param.shape))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name], state.second_moment[name] = m, v
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        shrunk = param.data.astype(np.float64) * (1.0 - lr * weight_decay)
        param.data = (shrunk - lr * update).astype(param.dtype)
    return state


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -log y_label over the batch."""
    picked = take(log_softmax(logits), (np.arange(len(labels)), np.asarray(labels)))
    return scale(tensor_sum(picked), -1.0 / len(labels))


def bce_coefficients(num_classes: int, mode: PosWeightMode = PosWeightMode.BALANCED):
    """(positive, negative) coefficients; negative is fixed at 1/C."""
    negative = 1.0 / num_classes
    return mode.ratio(num_classes) * negative, negative


def balanced_bce_from_logits(logits: Tensor, labels: np.ndarray,
                             mode: PosWeightMode = PosWeightMode.BALANCED) -> Tensor:
    """Class-balanced BCE on pre-sigmoid logits.

    -log s = softplus(-z) and -log(1 - s) = softplus(z), so no log of a
    saturated probability is ever taken.
    """
    batch, num_classes = logits.shape
    positive, negative = bce_coefficients(num_classes, mode)
    onehot = np.zeros((batch, num_classes), dtype=logits.dtype)
    onehot[np.arange(batch), np.asarray(labels)] = 1
    pos_weights = Tensor(onehot * positive, dtype=logits.dtype)
    neg_weights = Tensor((1 - onehot) * negative, dtype=logits.dtype)
    per_entry = mul(pos_weights, softplus(-logits)) + mul(neg_weights, softplus(logits))
    return scale(tensor_sum(per_entry), 1.0 / batch)


def balanced_bce_loss(scores, labels: np.ndarray, mode: PosWeightMode = PosWeightMode.BALANCED) -> Tensor:
    """Class-balanced BCE on sigmoid scores s in (0, 1)."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if np.any(s <= 0) or np.any(s >= 1) or not np.all(np.isfinite(s)):
        raise DomainError("sigmoid scores must lie strictly inside (0, 1)")
    logits = Tensor(np.log(s) - np.log1p(-s), dtype=np.float64)
    return balanced_bce_from_logits(logits, labels, mode)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _epoch_batches(rng: np.random.Generator, count: int, batch_size: int) -> List[np.ndarray]:
    order = rng.permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def _flip_mask(rng: np.random.Generator, size: int, enabled: bool) -> np.ndarray:
    draws = rng.random(size)
    return draws < 0.5 if enabled else np.zeros(size, dtype=bool)


def _apply_grads(params: Dict[str, Tensor], state: OptimizerState, config: TrainConfig) -> None:
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    adam_step(params, grads, state, config.learning_rate, config.weight_decay)
    for p in params.values():
        p.zero_grad()


def _check_finite(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {step}")
    return value


def softmax_pretrain(model: DualBranchModel, samples: Sequence[SynthSample],
                     config: TrainConfig) -> TrainingHistory:
    """Cross-entropy training of backbone + softmax head."""
    config.validate()
    if config.train_phase is not TrainPhase.SOFTMAX_PRETRAIN:
        raise ContractError(f"softmax_pretrain called with phase '{config.phase}'")
    images, labels = stack_images(list(samples))
    set_trainable(model, ModelPart.BACKBONE)
    set_trainable(model, ModelPart.SOFTMAX_HEAD)
    params = {**model.part_parameters(ModelPart.BACKBONE), **model.part_parameters(ModelPart.SOFTMAX_HEAD)}

    rng = np.random.Generator(np.random.Philox(key=int(config.seed)))
    state = OptimizerState()
    history = TrainingHistory(phase=config.phase)
    started = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        total_loss, correct = 0.0, 0
        for batch_idx in _epoch_batches(rng, len(images), config.batch_size):
            batch = images[batch_idx]
            flips = _flip_mask(rng, len(batch_idx), config.flip)
            batch = np.where(flips[:, None, None, None], batch[..., ::-1], batch)
            logits = model.softmax_head.logits(model.backbone.forward(Tensor(batch)))
            loss = cross_entropy(logits, labels[batch_idx])
            step += 1
            total_loss += _check_finite(loss, step) * len(batch_idx)
            correct += int((logits.data.argmax(axis=1) == labels[batch_idx]).sum())
            loss.backward()
            _apply_grads(params, state, config)
        history.epoch_losses.append(total_loss / max(len(images), 1))
        history.epoch_accuracies.append(correct / max(len(images), 1))
        logger.info(f"[softmax_pretrain] epoch {epoch + 1}/{config.epochs} "
                    f"loss {history.epoch_losses[-1]:.4f} acc {history.epoch_accuracies[-1]:.3f}")

    _, predictions = predict_batch(model, images)
    history.final_accuracy = float((predictions == labels).mean()) if len(labels) else float("nan")
    history.wall_seconds = time.perf_counter() - started
    logger.info(f"[softmax_pretrain] final train accuracy {history.final_accuracy:.4f}")
    return history


def sigmoid_finetune(model: DualBranchModel, samples: Sequence[SynthSample],
                     config: TrainConfig) -> TrainingHistory:
    """Train only the sigmoid head with the class-balanced BCE."""
    config.validate()
    if config.train_phase is not TrainPhase.SIGMOID_FINETUNE:
        raise ContractError(f"sigmoid_finetune called with phase '{config.phase}'")
    if model.sigmoid_head is None:
        raise ContractError("sigmoid_finetune needs a replicated sigmoid head")
    freeze(model, ModelPart.BACKBONE)
    freeze(model, ModelPart.SOFTMAX_HEAD)
    set_trainable(model, ModelPart.SIGMOID_HEAD)
    params = model.part_parameters(ModelPart.SIGMOID_HEAD)
    mode = config.pos_weight

    images, labels = stack_images(list(samples))
    # Frozen backbone: features of both orientations are computed once.
    with no_grad():
        plain = _batched_features(model, images)
        flipped = _batched_features(model, images[..., ::-1]) if config.flip else plain

    rng = np.random.Generator(np.random.Philox(key=int(config.seed)))
    state = OptimizerState()
    history = TrainingHistory(phase=config.phase)
    started = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        total_loss, correct = 0.0, 0
        for batch_idx in _epoch_batches(rng, len(images), config.batch_size):
            flips = _flip_mask(rng, len(batch_idx), config.flip)
            features = np.where(flips[:, None, None, None], flipped[batch_idx], plain[batch_idx])
            logits = model.sigmoid_head.logits(Tensor(features))
            loss = balanced_bce_from_logits(logits, labels[batch_idx], mode)
            step += 1
            total_loss += _check_finite(loss, step) * len(batch_idx)
            correct += int((logits.data.argmax(axis=1) == labels[batch_idx]).sum())
            loss.backward()
            _apply_grads(params, state, config)
        history.epoch_losses.append(total_loss / max(len(images), 1))
        history.epoch_accuracies.append(correct / max(len(images), 1))
        model.verify_frozen()
        logger.info(f"[sigmoid_finetune:{mode.value}] epoch {epoch + 1}/{config.epochs} "
                    f"loss {history.epoch_losses[-1]:.4f} acc {history.epoch_accuracies[-1]:.3f}")

    model.verify_frozen()
    history.final_accuracy = history.epoch_accuracies[-1] if history.epoch_accuracies else float("nan")
    history.wall_seconds = time.perf_counter() - started
    return history


def _batched_features(model: DualBranchModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    chunks = [model.backbone.forward(Tensor(images[i:i + batch_size])).data
              for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0, model.backbone.out_channels, 1, 1), dtype=np.float32)
    return np.concatenate(chunks)
