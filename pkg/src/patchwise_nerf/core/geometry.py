"""
Camera model, normalized patch coordinates and ray generation.

Conventions (fixed here, used everywhere):
    * world up is +z, pitch is the colatitude measured from +z, yaw is the
      azimuth measured from +x towards +y;
    * the camera looks at the world origin; its frame is right-handed with
      `right = forward x up`;
    * image u grows to the right, image v grows downward;
    * pixel (i, j) is column i, row j, sampled at its center.
"""

import math
from dataclasses import dataclass, replace
from typing import Tuple, Union

import numpy as np

from ..errors import ContractViolation

ArrayLike = Union[float, int, np.ndarray]

# Scene content lives in [-SCENE_BOUND, SCENE_BOUND]^3.
SCENE_BOUND = 1.0
CUBE_CORNER_DISTANCE = math.sqrt(3.0) * SCENE_BOUND

DEFAULT_RADIUS = 3.5
DEFAULT_FOV = math.pi / 4

_WORLD_UP = np.array([0.0, 0.0, 1.0])
_FALLBACK_UP = np.array([0.0, 1.0, 0.0])
_SPEC_TOL = 1e-9


def spherical_to_cartesian(yaw: float, pitch: float, radius: float) -> np.ndarray:
    return np.array(
        [
            radius * math.sin(pitch) * math.cos(yaw),
            radius * math.sin(pitch) * math.sin(yaw),
            radius * math.cos(pitch),
        ]
    )


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / math.sqrt(float(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))


@dataclass(frozen=True)
class CameraPose:
    """Spherical camera looking at the world origin. Angles in radians."""

    yaw: float
    pitch: float
    radius: float = DEFAULT_RADIUS
    fov: float = DEFAULT_FOV

    def __post_init__(self):
        if not self.radius > 0:
            raise ContractViolation(f"camera radius must be > 0, got {self.radius}")
        if not 0 < self.fov < math.pi:
            raise ContractViolation(f"fov must lie in (0, pi), got {self.fov}")
        if not 0 <= self.pitch <= math.pi:
            raise ContractViolation(f"pitch must lie in [0, pi], got {self.pitch}")

    @property
    def origin(self) -> np.ndarray:
        return spherical_to_cartesian(self.yaw, self.pitch, self.radius)

    @property
    def t_near(self) -> float:
        return max(self.radius - CUBE_CORNER_DISTANCE, 0.0)

    @property
    def t_far(self) -> float:
        return self.radius + CUBE_CORNER_DISTANCE

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Returns (right, up, forward) unit vectors of the camera frame.

        At the poles (forward parallel to +z) the frame is built against +y
        instead of +z.
        """
        forward = _normalize(-self.origin)
        right = np.cross(forward, _WORLD_UP)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, _FALLBACK_UP)
        right = _normalize(right)
        up = np.cross(right, forward)
        return right, up, forward


@dataclass(frozen=True)
class PatchSpec:
    """An r x r crop of scale s at offset (offset_x, offset_y) of an R x R frame."""

    scale: float
    offset_x: float
    offset_y: float
    patch_res: int
    full_res: int

    def __post_init__(self):
        r, R, s = self.patch_res, self.full_res, self.scale
        if r < 1 or R < 1 or r > R:
            raise ContractViolation(f"need 1 <= r <= R, got r={r}, R={R}")
        if s < r / R - _SPEC_TOL or s > 1.0 + _SPEC_TOL:
            raise ContractViolation(f"scale {s} outside [{r / R}, 1]")
        for name, offset in (("offset_x", self.offset_x), ("offset_y", self.offset_y)):
            if offset < -_SPEC_TOL or offset + s > 1.0 + _SPEC_TOL:
                raise ContractViolation(f"{name}={offset} outside [0, 1 - s] for s={s}")

    @classmethod
    def full_frame(cls, res: int) -> "PatchSpec":
        return cls(scale=1.0, offset_x=0.0, offset_y=0.0, patch_res=res, full_res=res)

    @property
    def min_scale(self) -> float:
        return self.patch_res / self.full_res

    def mirrored(self) -> "PatchSpec":
        """The same crop of the horizontally flipped frame."""
        return replace(self, offset_x=max(1.0 - self.scale - self.offset_x, 0.0))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-6:
            raise ContractViolation("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ContractViolation(f"t_near={self.t_near} must be < t_far={self.t_far}")

    def at(self, q: ArrayLike) -> np.ndarray:
        return self.origin + np.multiply.outer(q, self.direction)


@dataclass
class RayBundle:
    """A grid or batch of rays stored as arrays; `shape` excludes the xyz axis."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.directions.shape[:-1]

    def __len__(self) -> int:
        return int(np.prod(self.shape))

    def flatten(self) -> "RayBundle":
        return RayBundle(
            origins=self.origins.reshape(-1, 3),
            directions=self.directions.reshape(-1, 3),
            t_near=self.t_near.reshape(-1),
            t_far=self.t_far.reshape(-1),
        )

    def subset(self, index) -> "RayBundle":
        return RayBundle(
            origins=self.origins[index],
            directions=self.directions[index],
            t_near=self.t_near[index],
            t_far=self.t_far[index],
        )

    def ray(self, *index) -> Ray:
        return Ray(
            origin=self.origins[index],
            direction=self.directions[index],
            t_near=float(self.t_near[index]),
            t_far=float(self.t_far[index]),
        )


def patch_pixel_to_ndc(spec: PatchSpec, i: ArrayLike, j: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    """Pixel-center coordinates of patch pixel (i, j) in the full frame's [0, 1]^2."""
    r = spec.patch_res
    if np.any(np.asarray(i) < 0) or np.any(np.asarray(i) >= r):
        raise ContractViolation(f"column index {i} outside [0, {r})")
    if np.any(np.asarray(j) < 0) or np.any(np.asarray(j) >= r):
        raise ContractViolation(f"row index {j} outside [0, {r})")
    u = spec.offset_x + spec.scale * (i + 0.5) / r
    v = spec.offset_y + spec.scale * (j + 0.5) / r
    return u, v


def _pinhole_directions(pose: CameraPose, u: ArrayLike, v: ArrayLike, aspect: float) -> np.ndarray:
    # Written element-wise so that scalar and grid evaluation agree bit for bit.
    right, up, forward = pose.basis()
    half = math.tan(pose.fov / 2)
    x = ((2.0 * np.asarray(u, dtype=np.float64) - 1.0) * half)[..., None]
    y = ((2.0 * np.asarray(v, dtype=np.float64) - 1.0) * half / aspect)[..., None]
    d = forward + x * right - y * up
    norm = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])
    return d / norm[..., None]


def camera_ray(pose: CameraPose, u: float, v: float, aspect: float = 1.0) -> Ray:
    return Ray(
        origin=pose.origin,
        direction=_pinhole_directions(pose, u, v, aspect),
        t_near=pose.t_near,
        t_far=pose.t_far,
    )


def _bundle(pose: CameraPose, u: np.ndarray, v: np.ndarray, aspect: float) -> RayBundle:
    u, v = np.broadcast_arrays(u, v)
    directions = _pinhole_directions(pose, u, v, aspect)
    shape = directions.shape[:-1]
    return RayBundle(
        origins=np.broadcast_to(pose.origin, directions.shape).copy(),
        directions=directions,
        t_near=np.full(shape, pose.t_near),
        t_far=np.full(shape, pose.t_far),
    )


def patch_rays(pose: CameraPose, spec: PatchSpec, aspect: float = 1.0) -> RayBundle:
    """Rays of an r x r patch; entry [j, i] is pixel column i, row j."""
    r = spec.patch_res
    u, v = patch_pixel_to_ndc(spec, np.arange(r)[None, :], np.arange(r)[:, None])
    return _bundle(pose, u, v, aspect)


def full_frame_rays(pose: CameraPose, res: int, aspect: float = 1.0) -> RayBundle:
    u = (np.arange(res)[None, :] + 0.5) / res
    v = (np.arange(res)[:, None] + 0.5) / res
    return _bundle(pose, u, v, aspect)


@dataclass(frozen=True)
class CameraDistribution:
    """
    Distribution over camera poses on a sphere of fixed radius.

    kind:
        spherical_uniform -- uniform on the sphere (restricted to the
                             yaw/pitch spreads), the default;
        uniform           -- uniform box in (yaw, pitch);
        normal            -- Gaussian in (yaw, pitch) with the spreads as std.
    """

    kind: str = "spherical_uniform"
    radius: float = DEFAULT_RADIUS
    fov: float = DEFAULT_FOV
    yaw_mean: float = 0.0
    yaw_spread: float = math.pi
    pitch_mean: float = math.pi / 2
    pitch_spread: float = math.pi / 2

    def __post_init__(self):
        if self.kind not in ("spherical_uniform", "uniform", "normal"):
            raise ContractViolation(f"unknown camera distribution: {self.kind}")

    def sample(self, rng: np.random.Generator) -> CameraPose:
        a, b = rng.random(2)
        if self.kind == "spherical_uniform":
            yaw = (a - 0.5) * 2 * self.yaw_spread + self.yaw_mean
            v = (b - 0.5) * 2 * (self.pitch_spread / math.pi) + self.pitch_mean / math.pi
            pitch = math.acos(1 - 2 * min(max(v, 1e-5), 1 - 1e-5))
        elif self.kind == "uniform":
            yaw = (a - 0.5) * 2 * self.yaw_spread + self.yaw_mean
            pitch = (b - 0.5) * 2 * self.pitch_spread + self.pitch_mean
        else:
            yaw, pitch = rng.normal(size=2) * (self.yaw_spread, self.pitch_spread)
            yaw, pitch = yaw + self.yaw_mean, pitch + self.pitch_mean
        pitch = min(max(float(pitch), 1e-5), math.pi - 1e-5)
        return CameraPose(yaw=float(yaw), pitch=pitch, radius=self.radius, fov=self.fov)


def orbit_poses(
    count: int,
    pitch: float = math.pi / 2,
    radius: float = DEFAULT_RADIUS,
    fov: float = DEFAULT_FOV,
) -> Tuple[CameraPose, ...]:
    """`count` cameras evenly spaced in yaw at a fixed pitch (turntable / held-out set)."""
    return tuple(
        CameraPose(yaw=2 * math.pi * k / count, pitch=pitch, radius=radius, fov=fov)
        for k in range(count)
    )
