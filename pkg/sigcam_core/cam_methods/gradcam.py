import numpy as np


class GradCam:
    """Spatially averaged gradients of the target w.r.t. F."""

    name = "gradcam"
    needs_gradient = True

    def __init__(self, activations: np.ndarray, gradient: np.ndarray):
        self.activations = np.asarray(activations, dtype=np.float64)
        self.gradient = np.asarray(gradient, dtype=np.float64)

    def weights(self) -> np.ndarray:
        return self.gradient.mean(axis=(1, 2))
