import logging
from typing import Callable

import numpy as np

from ..utils import bilinear_upsample, minmax_normalize

logger = logging.getLogger(__name__)


class ScoreCam:
    """Gradient-free channel scores from masked forward passes.

    Each channel F_i is upsampled to the image extent and min-max normalized
    into a soft mask; the channel score is the change of the target logit
    when the image is multiplied by that mask. Scores are softmax-normalized.
    """

    name = "scorecam"
    needs_gradient = False

    def __init__(self, logit_fn: Callable[[np.ndarray], np.ndarray], image: np.ndarray,
                 activations: np.ndarray, target_class: int, batch_size: int = 64):
        """
        Args:
            logit_fn: maps an image batch [B, 3, H, W] to branch logits [B, C]
            image: single image [3, H, W] in training normalization
            activations: F of that image, [N, P, Q]
            target_class: class whose logit is scored
        """
        self.logit_fn = logit_fn
        self.image = np.asarray(image)
        self.activations = np.asarray(activations)
        self.target_class = target_class
        self.batch_size = batch_size

    def masks(self) -> np.ndarray:
        _, height, width = self.image.shape
        return np.stack([minmax_normalize(bilinear_upsample(channel, height, width))
                         for channel in self.activations])

    def channel_scores(self) -> np.ndarray:
        """alpha_i = l_k(x * mask_i) - l_k(x)."""
        masks = self.masks()
        baseline = float(self.logit_fn(self.image[None])[0, self.target_class])
        scores = []
        for start in range(0, len(masks), self.batch_size):
            chunk = masks[start:start + self.batch_size]
            masked = (self.image[None] * chunk[:, None]).astype(self.image.dtype)
            scores.append(self.logit_fn(masked)[:, self.target_class].astype(np.float64))
        logger.debug(f"score-cam: {len(masks)} masked passes for class {self.target_class}")
        return np.concatenate(scores) - baseline

    def weights(self) -> np.ndarray:
        scores = self.channel_scores()
        shifted = np.exp(scores - scores.max())
        return shifted / shifted.sum()
