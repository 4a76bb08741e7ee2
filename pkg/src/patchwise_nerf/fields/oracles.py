import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from ..core.geometry import CameraPose, PatchSpec, RayBundle, patch_rays
from ..core.renderer import RenderConfig, render_rays
from ..errors import ConfigError, ContractViolation
from .base import RadianceField

logger = logging.getLogger(__name__)

SCENES = ("sphere", "boxes")


class AnalyticSphere(RadianceField):
    """Hand-set sphere: constant density inside `radius`, empty outside."""

    def __init__(
        self,
        radius: float = 0.5,
        density: float = 50.0,
        color: Sequence[float] = (0.9, 0.35, 0.2),
        position_colored: bool = False,
    ):
        self.radius = radius
        self.density = density
        self.color = np.asarray(color, dtype=np.float64)
        self.position_colored = position_colored

    def query(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        inside = np.linalg.norm(points, axis=-1) < self.radius
        if self.position_colored:
            colors = np.clip(0.5 + 0.5 * points / self.radius, 0.0, 1.0)
        else:
            colors = np.broadcast_to(self.color, points.shape).copy()
        return colors, np.where(inside, self.density, 0.0)


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    half_size: Tuple[float, float, float]
    color: Tuple[float, float, float]


DEFAULT_BOXES = (
    Box(center=(-0.3, -0.2, 0.0), half_size=(0.35, 0.25, 0.4), color=(0.2, 0.5, 0.9)),
    Box(center=(0.35, 0.3, -0.1), half_size=(0.2, 0.35, 0.3), color=(0.95, 0.8, 0.2)),
)


class BoxUnion(RadianceField):
    """Union of axis-aligned boxes; where boxes overlap the first one wins the color."""

    def __init__(self, boxes: Sequence[Box] = DEFAULT_BOXES, density: float = 50.0):
        self.boxes = tuple(boxes)
        self.density = density

    def query(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        colors = np.zeros_like(points)
        hit = np.zeros(points.shape[0], dtype=bool)
        for box in reversed(self.boxes):
            inside = np.all(np.abs(points - box.center) <= box.half_size, axis=-1)
            colors[inside] = box.color
            hit |= inside
        return colors, np.where(hit, self.density, 0.0)


class ConstantField(RadianceField):
    """Homogeneous medium; with `bounded` it is cut off outside [-1, 1]^3."""

    def __init__(self, color: Sequence[float] = (1.0, 1.0, 1.0), density: float = 1.0, bounded: bool = False):
        self.color = np.asarray(color, dtype=np.float64)
        self.density = density
        self.bounded = bounded

    def query(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        densities = np.full(points.shape[0], float(self.density))
        if self.bounded:
            densities[np.any(np.abs(points) > 1.0, axis=-1)] = 0.0
        return np.broadcast_to(self.color, points.shape).copy(), densities


@dataclass
class GroundTruthScene:
    """
    A procedural field rendered by the same volume renderer as the scene
    being fitted. Rendering is jitter-free so targets are deterministic.
    """

    field: RadianceField
    render: RenderConfig
    full_res: int
    background: Optional[RadianceField] = None

    def __post_init__(self):
        if self.render.stratified_jitter:
            self.render = replace(self.render, stratified_jitter=False)

    def render_rays(self, rays: RayBundle, workers: int = 1) -> np.ndarray:
        return render_rays(self.field, rays, self.render, self.background, None, workers).rgb

    def render_patch(self, pose: CameraPose, spec: PatchSpec, workers: int = 1) -> np.ndarray:
        if spec.full_res != self.full_res:
            raise ContractViolation(f"patch spec full_res {spec.full_res} != scene full_res {self.full_res}")
        return self.render_rays(patch_rays(pose, spec), workers)

    def render_view(self, pose: CameraPose, workers: int = 1) -> np.ndarray:
        return self.render_patch(pose, PatchSpec.full_frame(self.full_res), workers)


def make_scene(
    name: str,
    full_res: int,
    render: RenderConfig,
    background: Optional[RadianceField] = None,
) -> GroundTruthScene:
    if name == "sphere":
        field = AnalyticSphere(position_colored=True)
    elif name == "boxes":
        field = BoxUnion()
    else:
        raise ConfigError(f"unknown scene '{name}', expected one of {SCENES}")
    logger.debug("Ground-truth scene '%s' at %dx%d", name, full_res, full_res)
    return GroundTruthScene(field=field, render=render, full_res=full_res, background=background)
