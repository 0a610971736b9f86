import numpy as np


class LayerCam:
    """Single-layer Layer-CAM: M = sum_i relu(g_i) * F_i.

    The gradient gating already discards negative evidence, so this method
    produces a map directly and never has channel weights to clamp.
    """

    name = "layercam"
    needs_gradient = True

    def __init__(self, activations: np.ndarray, gradient: np.ndarray):
        self.activations = np.asarray(activations, dtype=np.float64)
        self.gradient = np.asarray(gradient, dtype=np.float64)

    def linear_map(self) -> np.ndarray:
        return (np.maximum(self.gradient, 0.0) * self.activations).sum(axis=0)
