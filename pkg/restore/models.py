from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class RestorationRecord:
    """Inputs of the Cm/Cu metric for one restored sample"""
    restorer_name: str
    masked_fraction: float
    predicted: np.ndarray
    truth_foreground: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.predicted), np.shape(self.truth_foreground), np.shape(self.mask)}
        if len(shapes) != 1:
            raise ValueError(f"record arrays must be congruent, got shapes {sorted(shapes)}")
        if not 0 <= self.masked_fraction <= 1:
            raise ValueError(f"masked_fraction must lie in [0, 1], got {self.masked_fraction}")
