import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from ..core.renderer import inverse_sphere_param
from ..errors import ContractViolation
from .base import RadianceField

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
DEFAULT_BACKGROUND_HIDDEN = 64


def leaky_relu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


@dataclass
class BackgroundField(RadianceField):
    """
    Coordinate MLP for everything outside the foreground shell.

    Queried with points in shell units (norm > 1); each point is mapped to
    (x / |x|, 1 / |x|) and passed through two blocks of two linear layers.
    The field is never trained, so it only implements the forward pass.
    """

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != 4 or len(self.biases) != 4:
            raise ContractViolation("background MLP needs exactly four linear layers")
        if self.weights[0].shape[0] != 4 or self.weights[-1].shape[1] != 4:
            raise ContractViolation("background MLP maps 4 inputs to 4 outputs")

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    @classmethod
    def initialize(
        cls,
        hidden: int = DEFAULT_BACKGROUND_HIDDEN,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ) -> "BackgroundField":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [4, hidden, hidden, hidden, 4]
        weights = tuple(
            (rng.standard_normal((a, b)) * np.sqrt(2.0 / a)).astype(dtype)
            for a, b in zip(dims[:-1], dims[1:])
        )
        biases = tuple(np.zeros(b, dtype=dtype) for b in dims[1:])
        return cls(weights=weights, biases=biases)

    @classmethod
    def constant(cls, color, density: float = 1.0, hidden: int = 4) -> "BackgroundField":
        """A background that returns the same color and density everywhere."""
        color = np.clip(np.asarray(color, dtype=np.float64), 1e-6, 1 - 1e-6)
        raw = np.concatenate([np.log(color / (1 - color)), [np.log(np.expm1(density))]])
        dims = [4, hidden, hidden, hidden, 4]
        weights = tuple(np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:]))
        biases = tuple(np.zeros(b) for b in dims[1:-1]) + (raw,)
        return cls(weights=weights, biases=biases)

    def encode(self, points: np.ndarray) -> np.ndarray:
        return inverse_sphere_param(points)

    def query(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        h = self.encode(np.asarray(points, dtype=self.dtype).reshape(-1, 3))
        # block 1
        h = leaky_relu(h @ self.weights[0] + self.biases[0])
        h = leaky_relu(h @ self.weights[1] + self.biases[1])
        # block 2
        h = leaky_relu(h @ self.weights[2] + self.biases[2])
        raw = h @ self.weights[3] + self.biases[3]
        return expit(raw[:, :3]), np.logaddexp(0, raw[:, 3])
