import numpy as np

from config.constants import DENOMINATOR_EPS


class XGradCam:
    """Activation-weighted gradient sum normalized by the channel's total activation."""

    name = "xgradcam"
    needs_gradient = True

    def __init__(self, activations: np.ndarray, gradient: np.ndarray, eps: float = DENOMINATOR_EPS):
        self.activations = np.asarray(activations, dtype=np.float64)
        self.gradient = np.asarray(gradient, dtype=np.float64)
        self.eps = eps

    def weights(self) -> np.ndarray:
        total = self.activations.sum(axis=(1, 2))
        return (self.activations * self.gradient).sum(axis=(1, 2)) / (total + self.eps)
