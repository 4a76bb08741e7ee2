"""
Tri-plane scene representation and its decoder MLP.

A point x in [-1, 1]^3 is projected onto the three axis-aligned planes
P_xy, P_yz, P_xz; each plane is bilinearly interpolated (grid nodes span the
cube edge to edge) and the three feature vectors are summed. A
2-hidden-layer softplus MLP maps the summed features to 4 raw outputs:
sigmoid(raw[:3]) is the color, softplus(raw[3]) the density. No view
direction enters the decoder.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from ..errors import ContractViolation
from .base import DifferentiableField

logger = logging.getLogger(__name__)

# Plane k is indexed by the coordinate pair PLANE_AXES[k].
PLANE_AXES = ((0, 1), (1, 2), (0, 2))
PLANE_NAMES = ("xy", "yz", "xz")
MLP_TENSORS = ("w1", "b1", "w2", "b2", "w3", "b3")
# Serialization order of every tensor in a checkpoint.
CHECKPOINT_TENSORS = tuple(f"planes.{n}" for n in PLANE_NAMES) + tuple(
    f"mlp.{n}" for n in MLP_TENSORS
)

DEFAULT_PLANE_RES = 64
DEFAULT_FEATURES = 32
DEFAULT_HIDDEN = 64
PLANE_INIT_STD = 0.1


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, z)


@dataclass
class MlpParams:
    """Decoder weights: features -> hidden -> hidden -> 4 (RGB + raw density)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        f, h = self.w1.shape
        expected = {
            "b1": (h,),
            "w2": (h, h),
            "b2": (h,),
            "w3": (h, 4),
            "b3": (4,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractViolation(
                    f"mlp.{name} has shape {getattr(self, name).shape}, expected {shape}"
                )

    @property
    def features(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def initialize(cls, features: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        def he(fan_in, fan_out):
            return (rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)).astype(dtype)

        return cls(
            w1=he(features, hidden),
            b1=np.zeros(hidden, dtype=dtype),
            w2=he(hidden, hidden),
            b2=np.zeros(hidden, dtype=dtype),
            w3=he(hidden, 4),
            b3=np.zeros(4, dtype=dtype),
        )

    @classmethod
    def zeros(cls, features: int, hidden: int, dtype=np.float64):
        return cls(
            w1=np.zeros((features, hidden), dtype=dtype),
            b1=np.zeros(hidden, dtype=dtype),
            w2=np.zeros((hidden, hidden), dtype=dtype),
            b2=np.zeros(hidden, dtype=dtype),
            w3=np.zeros((hidden, 4), dtype=dtype),
            b3=np.zeros(4, dtype=dtype),
        )


@dataclass
class FieldSample:
    color: np.ndarray
    density: np.ndarray


@dataclass
class DecodeCache:
    """Forward intermediates for the points that fall inside the scene cube."""

    inside: np.ndarray
    corners: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    fracs: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    features: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    raw: np.ndarray
    color: np.ndarray


def _grid_coords(coord: np.ndarray, res: int) -> Tuple[np.ndarray, np.ndarray]:
    """Lower grid node and fractional offset for coordinates in [-1, 1]."""
    g = np.clip((coord + 1.0) * 0.5 * (res - 1), 0.0, res - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
    return i0, g - i0


@dataclass
class TriPlaneScene(DifferentiableField):
    """Three Rp x Rp x F feature planes stacked as planes[k] plus the decoder."""

    planes: np.ndarray
    mlp: MlpParams

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ContractViolation(f"planes must be (3, Rp, Rp, F), got {self.planes.shape}")
        if self.planes.shape[1] != self.planes.shape[2] or self.planes.shape[1] < 2:
            raise ContractViolation("planes must be square with Rp >= 2")
        if self.planes.shape[3] != self.mlp.features:
            raise ContractViolation(
                f"plane channels {self.planes.shape[3]} != mlp input {self.mlp.features}"
            )

    @property
    def plane_res(self) -> int:
        return self.planes.shape[1]

    @property
    def features(self) -> int:
        return self.planes.shape[3]

    @property
    def hidden(self) -> int:
        return self.mlp.hidden

    @property
    def dtype(self) -> np.dtype:
        return self.planes.dtype

    @classmethod
    def initialize(
        cls,
        plane_res: int = DEFAULT_PLANE_RES,
        features: int = DEFAULT_FEATURES,
        hidden: int = DEFAULT_HIDDEN,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ) -> "TriPlaneScene":
        rng = rng if rng is not None else np.random.default_rng(0)
        planes = rng.normal(0.0, PLANE_INIT_STD, (3, plane_res, plane_res, features)).astype(dtype)
        return cls(planes=planes, mlp=MlpParams.initialize(features, hidden, rng, dtype))

    @classmethod
    def zeros(
        cls,
        plane_res: int = DEFAULT_PLANE_RES,
        features: int = DEFAULT_FEATURES,
        hidden: int = DEFAULT_HIDDEN,
        dtype=np.float64,
    ) -> "TriPlaneScene":
        planes = np.zeros((3, plane_res, plane_res, features), dtype=dtype)
        return cls(planes=planes, mlp=MlpParams.zeros(features, hidden, dtype))

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {"planes": self.planes}
        params.update({f"mlp.{n}": getattr(self.mlp, n) for n in MLP_TENSORS})
        return params

    def tensors(self) -> Dict[str, np.ndarray]:
        """Every tensor keyed by its CHECKPOINT_TENSORS name."""
        out = {f"planes.{n}": self.planes[k] for k, n in enumerate(PLANE_NAMES)}
        out.update({f"mlp.{n}": getattr(self.mlp, n) for n in MLP_TENSORS})
        return out

    # RadianceField interface

    def query(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        colors, densities, _ = self.forward(points)
        return colors, densities

    def forward(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, DecodeCache]:
        points = np.asarray(points, dtype=self.dtype).reshape(-1, 3)
        n = points.shape[0]
        inside = np.all(np.abs(points) <= 1.0, axis=-1)
        pts = points[inside]

        corners, fracs = [], []
        for axes in PLANE_AXES:
            ia, fa = _grid_coords(pts[:, axes[0]], self.plane_res)
            ib, fb = _grid_coords(pts[:, axes[1]], self.plane_res)
            corners.append((ia, ib))
            fracs.append((fa, fb))
        features = _interpolate(self.planes, corners, fracs)

        mlp = self.mlp
        z1 = features @ mlp.w1 + mlp.b1
        a1 = softplus(z1)
        z2 = a1 @ mlp.w2 + mlp.b2
        a2 = softplus(z2)
        raw = a2 @ mlp.w3 + mlp.b3
        color = expit(raw[:, :3])

        colors = np.zeros((n, 3), dtype=self.dtype)
        densities = np.zeros(n, dtype=self.dtype)
        colors[inside] = color
        densities[inside] = softplus(raw[:, 3])

        cache = DecodeCache(
            inside=inside,
            corners=tuple(corners),
            fracs=tuple(fracs),
            features=features,
            z1=z1,
            a1=a1,
            z2=z2,
            a2=a2,
            raw=raw,
            color=color,
        )
        return colors, densities, cache

    def backward(
        self,
        cache: DecodeCache,
        d_colors: np.ndarray,
        d_densities: np.ndarray,
        grads: Dict[str, np.ndarray],
    ):
        inside = cache.inside
        d_color = np.asarray(d_colors).reshape(-1, 3)[inside]
        d_density = np.asarray(d_densities).reshape(-1)[inside]
        mlp = self.mlp

        d_raw = np.empty_like(cache.raw)
        d_raw[:, :3] = d_color * cache.color * (1.0 - cache.color)
        d_raw[:, 3] = d_density * expit(cache.raw[:, 3])

        grads["mlp.w3"] += cache.a2.T @ d_raw
        grads["mlp.b3"] += d_raw.sum(axis=0)
        d_z2 = (d_raw @ mlp.w3.T) * expit(cache.z2)
        grads["mlp.w2"] += cache.a1.T @ d_z2
        grads["mlp.b2"] += d_z2.sum(axis=0)
        d_z1 = (d_z2 @ mlp.w2.T) * expit(cache.z1)
        grads["mlp.w1"] += cache.features.T @ d_z1
        grads["mlp.b1"] += d_z1.sum(axis=0)
        d_features = d_z1 @ mlp.w1.T

        grad_planes = grads["planes"]
        for k in range(3):
            (ia, ib), (fa, fb) = cache.corners[k], cache.fracs[k]
            for da, db, w in _stencil(fa, fb):
                np.add.at(
                    grad_planes[k],
                    (ia + da, ib + db),
                    (w[:, None] * d_features).astype(grad_planes.dtype),
                )


def _stencil(fa: np.ndarray, fb: np.ndarray):
    yield 0, 0, (1.0 - fa) * (1.0 - fb)
    yield 1, 0, fa * (1.0 - fb)
    yield 0, 1, (1.0 - fa) * fb
    yield 1, 1, fa * fb


def _interpolate(planes: np.ndarray, corners, fracs) -> np.ndarray:
    n = corners[0][0].shape[0]
    out = np.zeros((n, planes.shape[3]), dtype=planes.dtype)
    for k in range(3):
        (ia, ib), (fa, fb) = corners[k], fracs[k]
        for da, db, w in _stencil(fa, fb):
            out += w[:, None] * planes[k][ia + da, ib + db]
    return out


def plane_features(scene: TriPlaneScene, x: np.ndarray) -> np.ndarray:
    """Summed bilinear plane features at x (..., 3); coordinates are clamped to the cube."""
    x = np.asarray(x, dtype=scene.dtype)
    pts = x.reshape(-1, 3)
    corners, fracs = [], []
    for axes in PLANE_AXES:
        ia, fa = _grid_coords(pts[:, axes[0]], scene.plane_res)
        ib, fb = _grid_coords(pts[:, axes[1]], scene.plane_res)
        corners.append((ia, ib))
        fracs.append((fa, fb))
    return _interpolate(scene.planes, corners, fracs).reshape(x.shape[:-1] + (scene.features,))


def decode(scene: TriPlaneScene, x: np.ndarray) -> FieldSample:
    """Color and density at x (..., 3). Points outside [-1, 1]^3 get zero density."""
    x = np.asarray(x, dtype=scene.dtype)
    colors, densities = scene.query(x.reshape(-1, 3))
    return FieldSample(
        color=colors.reshape(x.shape[:-1] + (3,)),
        density=densities.reshape(x.shape[:-1]),
    )


def decode_backward(
    scene: TriPlaneScene,
    x: np.ndarray,
    d_color: np.ndarray,
    d_density: np.ndarray,
    grads: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, np.ndarray]:
    """
    Reverse-mode gradients of sum(d_color * color + d_density * density) at x
    with respect to every scene parameter. Plane gradients are supported only
    on the bilinear stencils of x.
    """
    grads = grads if grads is not None else scene.zero_gradients()
    _, _, cache = scene.forward(np.asarray(x).reshape(-1, 3))
    scene.backward(cache, d_color, d_density, grads)
    return grads


def lattice_centers(resolution: int) -> np.ndarray:
    """Cell-center coordinates of an N-cell partition of [-1, 1]."""
    return -1.0 + (2.0 * np.arange(resolution) + 1.0) / resolution


def export_density_grid(
    scene: TriPlaneScene,
    resolution: int,
    slab: int = 8,
) -> np.ndarray:
    """
    Density sampled at the N^3 cell centers of [-1, 1]^3 as float32,
    indexed [z, y, x] so that row-major order has x fastest.
    """
    if resolution < 2:
        raise ContractViolation(f"grid resolution must be >= 2, got {resolution}")
    c = lattice_centers(resolution)
    grid = np.empty((resolution, resolution, resolution), dtype=np.float32)
    ys, xs = np.meshgrid(c, c, indexing="ij")
    for z0 in range(0, resolution, slab):
        zs = c[z0 : z0 + slab]
        pts = np.stack(
            [
                np.broadcast_to(xs, (len(zs),) + xs.shape),
                np.broadcast_to(ys, (len(zs),) + ys.shape),
                np.broadcast_to(zs[:, None, None], (len(zs),) + xs.shape),
            ],
            axis=-1,
        )
        _, densities = scene.query(pts.reshape(-1, 3))
        grid[z0 : z0 + slab] = densities.reshape(len(zs), resolution, resolution)
    logger.debug("Exported %d^3 density grid", resolution)
    return grid
