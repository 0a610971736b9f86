"""
Convolutional backbone and GAP+FC head for SigCAM Lab.

The backbone is a stack of conv(3x3, pad 1) -> bias -> ReLU -> 2x2 max-pool
blocks. With the default channels (16, 32, 64) a 32x32 input ends at a
64x4x4 feature tensor.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config.constants import BACKBONE_CHANNELS, BACKBONE_KERNEL
from sigcam_core.autograd import (
    Tensor, add_bias, conv2d, fully_connected, global_avg_pool, max_pool2d, relu,
)
from sigcam_core.errors import ShapeError


class HeadKind(Enum):
    """Supported head architectures."""
    GAP_FC = "gap_fc"


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """He-style uniform init with bound sqrt(6 / fan_in)."""
    bound = np.float32(np.sqrt(6.0 / fan_in))
    return ((rng.random(shape, dtype=np.float32) * 2 - 1) * bound).astype(np.float32)


class Backbone:
    """Ordered conv/ReLU/pool blocks producing the feature tensor F."""

    def __init__(self, kernels: Sequence[Tensor], biases: Sequence[Tensor]):
        if len(kernels) != len(biases) or not kernels:
            raise ShapeError("backbone needs one bias per conv kernel")
        for i, (kernel, bias) in enumerate(zip(kernels, biases)):
            if bias.shape != (kernel.shape[0],):
                raise ShapeError(f"conv{i}: bias {bias.shape} does not match kernel {kernel.shape}")
            if i and kernel.shape[1] != kernels[i - 1].shape[0]:
                raise ShapeError(f"conv{i}: input channels {kernel.shape[1]} != previous output "
                                 f"{kernels[i - 1].shape[0]}")
        self.kernels: List[Tensor] = list(kernels)
        self.biases: List[Tensor] = list(biases)

    @classmethod
    def create(cls, rng: np.random.Generator, in_channels: int = 3,
               channels: Sequence[int] = BACKBONE_CHANNELS, kernel_size: int = BACKBONE_KERNEL) -> "Backbone":
        kernels, biases = [], []
        previous = in_channels
        for width in channels:
            fan_in = previous * kernel_size * kernel_size
            kernels.append(Tensor(kaiming_uniform(rng, (width, previous, kernel_size, kernel_size), fan_in),
                                  requires_grad=True))
            biases.append(Tensor(np.zeros(width, dtype=np.float32), requires_grad=True))
            previous = width
        return cls(kernels, biases)

    @property
    def out_channels(self) -> int:
        return self.kernels[-1].shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels[0].shape[1]

    def output_extent(self, height: int, width: int) -> Tuple[int, int]:
        factor = 2 ** len(self.kernels)
        return height // factor, width // factor

    def forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != self.in_channels:
            raise ShapeError(f"backbone expects [B,{self.in_channels},H,W], got {images.shape}")
        x = images
        for kernel, bias in zip(self.kernels, self.biases):
            padding = kernel.shape[2] // 2
            x = max_pool2d(relu(add_bias(conv2d(x, kernel, stride=1, padding=padding), bias)), 2)
        return x

    def named_parameters(self) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {}
        for i, (kernel, bias) in enumerate(zip(self.kernels, self.biases)):
            named[f"backbone.conv{i}.weight"] = kernel
            named[f"backbone.conv{i}.bias"] = bias
        return named


@dataclass
class Head:
    """GAP followed by a fully-connected layer: l_k = sum_i w_ik mean(F_i) + b_k."""
    weight: Tensor          # [N, C]
    bias: Tensor            # [C]
    kind: HeadKind = HeadKind.GAP_FC

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, num_classes: int) -> "Head":
        weight = Tensor(kaiming_uniform(rng, (channels, num_classes), channels), requires_grad=True)
        bias = Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)
        return cls(weight=weight, bias=bias)

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def shapes(self) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        return self.weight.shape, self.bias.shape

    def logits(self, features: Tensor) -> Tensor:
        if features.ndim != 4 or features.shape[1] != self.channels:
            raise ShapeError(f"head expects [B,{self.channels},P,Q] features, got {features.shape}")
        return fully_connected(global_avg_pool(features), self.weight, self.bias)

    def copy(self) -> "Head":
        return Head(weight=Tensor(self.weight.data.copy(), requires_grad=self.weight.requires_grad),
                    bias=Tensor(self.bias.data.copy(), requires_grad=self.bias.requires_grad),
                    kind=self.kind)

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}
