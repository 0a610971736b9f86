import numpy as np

from config.constants import DENOMINATOR_EPS


class GradCamPlusPlus:
    """Grad-CAM++ weights in the exponential-score closed form.

    With g = dS/dF per cell:
        a = g^2 / (2 g^2 + sum_pq(F) g^3)
        w = sum_pq a * relu(g)
    """

    name = "gradcampp"
    needs_gradient = True

    def __init__(self, activations: np.ndarray, gradient: np.ndarray, eps: float = DENOMINATOR_EPS):
        self.activations = np.asarray(activations, dtype=np.float64)
        self.gradient = np.asarray(gradient, dtype=np.float64)
        self.eps = eps

    def alphas(self) -> np.ndarray:
        g = self.gradient
        g2 = g * g
        total = self.activations.sum(axis=(1, 2), keepdims=True)
        denom = 2.0 * g2 + total * g2 * g
        denom = np.where(np.abs(denom) > self.eps, denom, self.eps)
        return g2 / denom

    def weights(self) -> np.ndarray:
        return (self.alphas() * np.maximum(self.gradient, 0.0)).sum(axis=(1, 2))
