from abc import ABC, abstractmethod
from typing import Any, Dict, Tuple

import numpy as np


class RadianceField(ABC):
    """Base class for anything the volume renderer can march through."""

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64)

    @abstractmethod
    def query(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Evaluate the field at world-space points.

        Args:
            points: (N, 3) array of positions.

        Returns:
            colors (N, 3) in [0, 1] and densities (N,) >= 0.
        """
        pass


class DifferentiableField(RadianceField):
    """A radiance field with trainable parameters and a reverse-mode pass."""

    @abstractmethod
    def parameters(self) -> Dict[str, np.ndarray]:
        """Named parameter arrays; optimizers update them in place."""
        pass

    @abstractmethod
    def forward(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Any]:
        """Like `query`, also returning the intermediates `backward` needs."""
        pass

    @abstractmethod
    def backward(
        self,
        cache: Any,
        d_colors: np.ndarray,
        d_densities: np.ndarray,
        grads: Dict[str, np.ndarray],
    ):
        """
        Accumulate dL/dparams into `grads` given dL/dcolors and dL/ddensities.

        Accumulation into one `grads` buffer must not run concurrently.
        """
        pass

    def zero_gradients(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(p) for name, p in self.parameters().items()}
