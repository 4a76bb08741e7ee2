"""
Hierarchical emission-absorption ray marching.

Every pixel is marched in two passes: `n_coarse` stratified depths are
composited to get weights, `n_fine` more depths are drawn from those
weights, and the field is evaluated once more at the merged, sorted depths
for the final composite. Transmittance uses the exponential form

    T_i = exp(-sum_{j<i} sigma_j * delta_j),    w_i = T_i * (1 - exp(-sigma_i * delta_i))

so that sum(w) + T_final == 1 up to rounding.

Randomness is drawn per pixel from a substream keyed by (render seed,
flat pixel index), and rays are processed in fixed-size chunks, so the
output does not depend on the number of workers.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..errors import ContractViolation
from ..fields.base import DifferentiableField, RadianceField
from .geometry import (
    CUBE_CORNER_DISTANCE,
    CameraPose,
    PatchSpec,
    Ray,
    RayBundle,
    patch_rays,
)

logger = logging.getLogger(__name__)

WHITE = "white"
BLACK = "black"
NERFPP = "nerfpp"
BACKGROUNDS = (WHITE, BLACK, NERFPP)

WEIGHT_EPS = 1e-5
BACKGROUND_LAST_DELTA = 1e10
_INV_DEPTH_CLAMP = 1e-6


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 48
    n_fine: int = 48
    stratified_jitter: bool = True
    background: str = WHITE
    n_background: int = 16
    # Fixed chunking keeps results independent of the worker count.
    chunk_rays: int = 512

    def __post_init__(self):
        if self.n_coarse < 1:
            raise ContractViolation("n_coarse must be >= 1")
        if self.n_fine < 0:
            raise ContractViolation("n_fine must be >= 0")
        if self.background not in BACKGROUNDS:
            raise ContractViolation(f"background must be one of {BACKGROUNDS}, got {self.background}")
        if self.background == NERFPP and self.n_background < 1:
            raise ContractViolation("n_background must be >= 1 with the nerfpp background")
        if self.chunk_rays < 1:
            raise ContractViolation("chunk_rays must be >= 1")

    @property
    def uniforms_per_ray(self) -> int:
        extra = self.n_background if self.background == NERFPP else 0
        return self.n_coarse + self.n_fine + extra


@dataclass
class Composite:
    rgb: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    deltas: np.ndarray


@dataclass
class RenderResult:
    """Rendered colors and expected depths plus the samples needed for backprop."""

    rgb: np.ndarray
    depth: np.ndarray
    depths: np.ndarray
    background: np.ndarray


# Sampling


def _stratify(t_near: np.ndarray, t_far: np.ndarray, n: int, u: Optional[np.ndarray]) -> np.ndarray:
    offset = 0.5 if u is None else u
    width = (t_far - t_near)[:, None] / n
    return t_near[:, None] + (np.arange(n) + offset) * width


def stratify(ray: Ray, n: int, jitter: bool, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One depth per equal-width bin of [t_near, t_far]; bin centers without jitter."""
    if n < 1:
        raise ContractViolation("need at least one sample per ray")
    u = None
    if jitter:
        if rng is None:
            raise ContractViolation("jittered stratification needs a random stream")
        u = rng.random((1, n))
    return _stratify(np.array([ray.t_near]), np.array([ray.t_far]), n, u)[0]


def _deterministic_quantiles(rows: int, n: int) -> np.ndarray:
    return np.broadcast_to((np.arange(n) + 1.0) / (n + 1.0), (rows, n))


def _sample_fine(
    depths: np.ndarray,
    weights: np.ndarray,
    t_near: np.ndarray,
    t_far: np.ndarray,
    u: np.ndarray,
) -> np.ndarray:
    # Bin k of the piecewise-constant pdf surrounds coarse depth k.
    edges = np.concatenate(
        [t_near[:, None], 0.5 * (depths[:, 1:] + depths[:, :-1]), t_far[:, None]], axis=-1
    )
    pdf = weights + WEIGHT_EPS
    pdf = pdf / pdf.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((pdf.shape[0], 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0

    idx = (u[:, :, None] >= cdf[:, None, 1:-1]).sum(axis=-1)
    cdf_lo = np.take_along_axis(cdf, idx, axis=1)
    cdf_hi = np.take_along_axis(cdf, idx + 1, axis=1)
    edge_lo = np.take_along_axis(edges, idx, axis=1)
    edge_hi = np.take_along_axis(edges, idx + 1, axis=1)
    frac = np.clip((u - cdf_lo) / (cdf_hi - cdf_lo), 0.0, 1.0)
    return edge_lo + frac * (edge_hi - edge_lo)


def importance_resample(
    coarse_depths: np.ndarray,
    coarse_weights: np.ndarray,
    n_fine: int,
    rng: Optional[np.random.Generator] = None,
    t_near: Optional[float] = None,
    t_far: Optional[float] = None,
) -> np.ndarray:
    """
    Draw `n_fine` depths by inverse transform of the coarse weight histogram
    and merge them with the coarse depths.

    Bin edges are [t_near, midpoints, t_far]; t_near/t_far default to the
    first and last coarse depth. Weights get a 1e-5 floor so all-zero weights
    fall back to a pdf that is uniform over the bins. Without `rng` the fine
    depths sit at the quantiles k / (n_fine + 1).
    """
    depths = np.asarray(coarse_depths, dtype=np.float64)
    weights = np.asarray(coarse_weights, dtype=np.float64)
    if depths.ndim != 1 or depths.shape != weights.shape:
        raise ContractViolation("coarse depths and weights must be matching 1-D arrays")
    if np.any(weights < 0):
        raise ContractViolation("coarse weights must be non-negative")
    if np.any(np.diff(depths) < 0):
        raise ContractViolation("coarse depths must be sorted")
    lo = depths[0] if t_near is None else t_near
    hi = depths[-1] if t_far is None else t_far
    u = rng.random((1, n_fine)) if rng is not None else _deterministic_quantiles(1, n_fine)
    fine = _sample_fine(depths[None], weights[None], np.array([lo]), np.array([hi]), u)[0]
    return np.sort(np.concatenate([depths, fine]))


# Compositing


def _deltas(depths: np.ndarray, t_far: np.ndarray, last_delta: Optional[float] = None) -> np.ndarray:
    diffs = np.diff(depths, axis=-1)
    if np.any(diffs < 0):
        raise ContractViolation("sample depths must be non-decreasing along each ray")
    if last_delta is None:
        last = np.maximum(t_far[:, None] - depths[:, -1:], 0.0)
    else:
        last = np.full((depths.shape[0], 1), last_delta)
    return np.concatenate([diffs, last], axis=-1)


def _composite(
    colors: np.ndarray,
    sigmas: np.ndarray,
    deltas: np.ndarray,
    background: np.ndarray,
) -> Composite:
    tau = sigmas * deltas
    optical = np.concatenate([np.zeros((tau.shape[0], 1)), np.cumsum(tau, axis=-1)], axis=-1)
    transmittance = np.exp(-optical)
    weights = transmittance[:, :-1] * -np.expm1(-tau)
    rgb = np.einsum("ni,nic->nc", weights, colors) + transmittance[:, -1:] * background
    return Composite(rgb=rgb, weights=weights, transmittance=transmittance, deltas=deltas)


def _composite_backward(
    colors: np.ndarray,
    comp: Composite,
    d_rgb: np.ndarray,
    background: np.ndarray,
):
    """dL/dcolors and dL/dsigmas of one composite given dL/drgb; depths are held fixed."""
    weighted = comp.weights[..., None] * colors
    after = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1] - weighted
    d_tau = np.einsum("nc,nic->ni", d_rgb, comp.transmittance[:, 1:, None] * colors - after)
    d_tau -= comp.transmittance[:, -1:] * (d_rgb * background).sum(axis=-1, keepdims=True)
    d_colors = comp.weights[..., None] * d_rgb[:, None, :]
    return d_colors, d_tau * comp.deltas


def compositing_weights(densities: np.ndarray, depths: np.ndarray, t_far: float):
    """Per-sample weights and the final transmittance along a single ray."""
    densities = np.asarray(densities, dtype=np.float64)[None]
    deltas = _deltas(np.asarray(depths, dtype=np.float64)[None], np.array([t_far]))
    comp = _composite(np.zeros(densities.shape + (3,)), densities, deltas, np.zeros((1, 3)))
    return comp.weights[0], float(comp.transmittance[0, -1])


def composite(
    colors: np.ndarray,
    densities: np.ndarray,
    depths: np.ndarray,
    t_far: float,
    background_color=(0.0, 0.0, 0.0),
) -> np.ndarray:
    """
    Emission-absorption composite of samples ordered by depth along one ray.
    The last interval is closed at t_far. Equal neighbouring depths are allowed
    (they form a zero-length interval); decreasing depths are not.
    """
    colors = np.asarray(colors, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if colors.shape != depths.shape + (3,) or densities.shape != depths.shape:
        raise ContractViolation("colors, densities and depths must describe the same samples")
    deltas = _deltas(depths[None], np.array([t_far]))
    bg = np.asarray(background_color, dtype=np.float64).reshape(1, 3)
    return _composite(colors[None], densities[None], deltas, bg).rgb[0]


# Background


def inverse_sphere_param(x: np.ndarray) -> np.ndarray:
    """Map points with |x| > 1 to (x / |x|, 1 / |x|)."""
    x = np.asarray(x)
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norm <= 1.0):
        raise ContractViolation("inverse sphere parametrization needs |x| > 1")
    return np.concatenate([x / norm, 1.0 / norm], axis=-1)


def background_samples(rays: RayBundle, n: int, u: Optional[np.ndarray] = None):
    """
    Depths and shell-unit points of `n` background samples per ray, spaced
    uniformly in inverse radius over (0, 1). The shell starts at the camera
    radius (never inside the scene cube's bounding sphere).
    """
    origins = rays.origins.reshape(-1, 3)
    directions = rays.directions.reshape(-1, 3)
    start = np.maximum(np.linalg.norm(origins, axis=-1, keepdims=True), CUBE_CORNER_DISTANCE)

    offset = 0.5 if u is None else 1.0 - u
    inv = np.clip(1.0 - (np.arange(n) + offset) / n, _INV_DEPTH_CLAMP, 1.0 - _INV_DEPTH_CLAMP)
    inv = np.broadcast_to(inv, (origins.shape[0], n))
    radius = start / inv

    # Distance along the ray to the sphere of the given radius.
    b = np.sum(origins * directions, axis=-1, keepdims=True)
    c = np.sum(origins * origins, axis=-1, keepdims=True) - radius**2
    t = -b + np.sqrt(np.maximum(b * b - c, 0.0))
    points = origins[:, None, :] + t[..., None] * directions[:, None, :]
    return t, points / start[..., None]


def render_background(
    field: RadianceField,
    rays: RayBundle,
    n: int,
    u: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Composite the background field alone along each ray, over black."""
    t, points = background_samples(rays, n, u)
    colors, sigmas = field.query(points.reshape(-1, 3))
    colors = colors.reshape(t.shape + (3,))
    sigmas = sigmas.reshape(t.shape)
    deltas = _deltas(t, t[:, -1], last_delta=BACKGROUND_LAST_DELTA)
    rgb = _composite(colors, sigmas, deltas, np.zeros((t.shape[0], 3))).rgb
    return rgb.reshape(rays.shape + (3,))


# Marching


def _query(field: RadianceField, rays: RayBundle, depths: np.ndarray):
    points = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    colors, sigmas = field.query(points.reshape(-1, 3))
    return colors.reshape(depths.shape + (3,)), sigmas.reshape(depths.shape)


def _pixel_uniforms(base: int, start: int, stop: int, count: int) -> np.ndarray:
    out = np.empty((stop - start, count))
    for row, pixel in enumerate(range(start, stop)):
        out[row] = np.random.default_rng([base, pixel]).random(count)
    return out


def _march_chunk(
    field: RadianceField,
    rays: RayBundle,
    cfg: RenderConfig,
    u: Optional[np.ndarray],
    background: Optional[RadianceField],
) -> RenderResult:
    nc, nf = cfg.n_coarse, cfg.n_fine
    rows = len(rays)
    coarse = _stratify(rays.t_near, rays.t_far, nc, None if u is None else u[:, :nc])

    if nf > 0:
        colors, sigmas = _query(field, rays, coarse)
        weights = _composite(colors, sigmas, _deltas(coarse, rays.t_far), np.zeros((rows, 3))).weights
        uf = _deterministic_quantiles(rows, nf) if u is None else u[:, nc : nc + nf]
        fine = _sample_fine(coarse, weights, rays.t_near, rays.t_far, uf)
        depths = np.sort(np.concatenate([coarse, fine], axis=-1), axis=-1)
    else:
        depths = coarse

    if cfg.background == WHITE:
        bg = np.ones((rows, 3))
    elif cfg.background == BLACK:
        bg = np.zeros((rows, 3))
    else:
        bg = render_background(
            background, rays, cfg.n_background, None if u is None else u[:, nc + nf :]
        )

    colors, sigmas = _query(field, rays, depths)
    comp = _composite(colors, sigmas, _deltas(depths, rays.t_far), bg)
    return RenderResult(
        rgb=comp.rgb,
        depth=np.sum(comp.weights * depths, axis=-1),
        depths=depths,
        background=bg,
    )


def _chunks(total: int, size: int) -> List[slice]:
    return [slice(a, min(a + size, total)) for a in range(0, total, size)]


def _map_chunks(job: Callable, chunks: Sequence[slice], workers: int) -> list:
    if workers <= 1 or len(chunks) <= 1:
        return [job(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, chunks))


def render_rays(
    field: RadianceField,
    rays: RayBundle,
    cfg: RenderConfig,
    background: Optional[RadianceField] = None,
    rng: Optional[np.random.Generator] = None,
    workers: int = 1,
) -> RenderResult:
    """
    Render every ray of a bundle. `rgb` and `depth` keep the bundle's shape;
    `depths` and `background` are flat per-ray arrays for `backprop_rays`.
    """
    if cfg.background == NERFPP and background is None:
        raise ContractViolation("the nerfpp background needs a background field")
    base = None
    if cfg.stratified_jitter:
        if rng is None:
            raise ContractViolation("jittered rendering needs a random stream")
        base = int(rng.integers(0, 2**62))

    flat = rays.flatten()

    def job(chunk: slice) -> RenderResult:
        u = None
        if base is not None:
            u = _pixel_uniforms(base, chunk.start, chunk.stop, cfg.uniforms_per_ray)
        return _march_chunk(field, flat.subset(chunk), cfg, u, background)

    parts = _map_chunks(job, _chunks(len(flat), cfg.chunk_rays), workers)
    return RenderResult(
        rgb=np.concatenate([p.rgb for p in parts]).reshape(rays.shape + (3,)),
        depth=np.concatenate([p.depth for p in parts]).reshape(rays.shape),
        depths=np.concatenate([p.depths for p in parts]),
        background=np.concatenate([p.background for p in parts]),
    )


def shade(
    field: RadianceField,
    rays: RayBundle,
    depths: np.ndarray,
    background: np.ndarray,
) -> np.ndarray:
    """Composite a flat ray bundle at fixed sample depths (no resampling)."""
    colors, sigmas = _query(field, rays, depths)
    return _composite(colors, sigmas, _deltas(depths, rays.t_far), background).rgb


def backprop_rays(
    field: DifferentiableField,
    rays: RayBundle,
    result: RenderResult,
    d_rgb: np.ndarray,
    chunk_rays: int = 512,
    workers: int = 1,
) -> Dict[str, np.ndarray]:
    """
    Gradients of a loss with respect to the field parameters, given
    dL/drgb for a previous `render_rays` result. Sample depths are treated
    as constants. Each chunk accumulates into its own buffer and the buffers
    are summed in chunk order.
    """
    flat = rays.flatten()
    d_flat = np.asarray(d_rgb).reshape(-1, 3)

    def job(chunk: slice) -> Dict[str, np.ndarray]:
        grads = field.zero_gradients()
        sub = flat.subset(chunk)
        depths, bg = result.depths[chunk], result.background[chunk]
        points = sub.origins[:, None, :] + depths[..., None] * sub.directions[:, None, :]
        colors, sigmas, cache = field.forward(points.reshape(-1, 3))
        colors = colors.reshape(depths.shape + (3,))
        sigmas = sigmas.reshape(depths.shape)
        comp = _composite(colors, sigmas, _deltas(depths, sub.t_far), bg)
        d_colors, d_sigmas = _composite_backward(colors, comp, d_flat[chunk], bg)
        field.backward(cache, d_colors.reshape(-1, 3), d_sigmas.reshape(-1), grads)
        return grads

    total = field.zero_gradients()
    for grads in _map_chunks(job, _chunks(len(flat), chunk_rays), workers):
        for name in total:
            total[name] += grads[name]
    return total


def render_patch(
    field: RadianceField,
    pose: CameraPose,
    spec: PatchSpec,
    cfg: RenderConfig,
    background: Optional[RadianceField] = None,
    rng: Optional[np.random.Generator] = None,
    workers: int = 1,
) -> np.ndarray:
    """r x r x 3 raster of the patch `spec` seen from `pose`."""
    return render_rays(field, patch_rays(pose, spec), cfg, background, rng, workers).rgb


def render_full_frame(
    field: RadianceField,
    pose: CameraPose,
    res: int,
    cfg: RenderConfig,
    background: Optional[RadianceField] = None,
    rng: Optional[np.random.Generator] = None,
    workers: int = 1,
) -> np.ndarray:
    return render_patch(field, pose, PatchSpec.full_frame(res), cfg, background, rng, workers)
