import numpy as np

from ..errors import ContractError


class VanillaCam:
    """Class activation map from the head's own FC weights."""

    name = "cam"
    needs_gradient = False

    def __init__(self, head_weight: np.ndarray):
        """
        Args:
            head_weight: FC weight matrix W of shape [N, C]
        """
        self.head_weight = np.asarray(head_weight)

    def weights(self, target_class: int) -> np.ndarray:
        if not 0 <= target_class < self.head_weight.shape[1]:
            raise ContractError(f"class {target_class} outside [0, {self.head_weight.shape[1]})")
        return self.head_weight[:, target_class].astype(np.float64)
