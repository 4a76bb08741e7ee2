"""
Patch scale/offset distributions and their annealing schedules.

Two families of scale distributions over iterations t:

    uniform_annealed:  s ~ U[s_min(t), 1],
                       s_min(t) = lerp(s_min(0), r/R, min(t/T, 1))
    beta_annealed:     s ~ Beta(1, beta(t)) * (1 - r/R) + r/R,
                       beta(t) = lerp(beta(0), beta(T), min(t/T, 1))

Offsets are drawn independently given s: offset_x, offset_y ~ U[0, 1 - s].
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
from lmfit import Parameters, minimize

from ..errors import ContractViolation, InputError
from .geometry import PatchSpec, patch_pixel_to_ndc

logger = logging.getLogger(__name__)

BETA_ANNEALED = "beta_annealed"
UNIFORM_ANNEALED = "uniform_annealed"

ArrayLike = Union[float, np.ndarray]


def lerp(x: float, y: float, alpha: float) -> float:
    return (1 - alpha) * x + alpha * y


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = BETA_ANNEALED
    total_iters: int = 10000
    beta_start: float = 0.05
    beta_end: float = 0.8
    patch_res: int = 64
    full_res: int = 256
    # s_min(0) of the uniform schedule; 1.0 gives the pure lerp from full frames.
    uniform_start: float = 1.0

    def __post_init__(self):
        if self.kind not in (BETA_ANNEALED, UNIFORM_ANNEALED):
            raise ContractViolation(f"unknown schedule kind: {self.kind}")
        if self.total_iters <= 0:
            raise ContractViolation("total_iters must be positive")
        if not 0 < self.beta_start <= self.beta_end <= 1:
            raise ContractViolation(
                f"need 0 < beta_start <= beta_end <= 1, got {self.beta_start}, {self.beta_end}"
            )
        if not 0 < self.patch_res <= self.full_res:
            raise ContractViolation("need 0 < patch_res <= full_res")
        if not self.min_scale <= self.uniform_start <= 1:
            raise ContractViolation(f"uniform_start must lie in [r/R, 1], got {self.uniform_start}")

    @property
    def min_scale(self) -> float:
        return self.patch_res / self.full_res

    def progress(self, t: float) -> float:
        if t < 0:
            raise ContractViolation(f"iteration must be >= 0, got {t}")
        return min(t / self.total_iters, 1.0)


@dataclass(frozen=True)
class ScaleSample:
    spec: PatchSpec
    iter: int


def beta_param_at(cfg: ScheduleConfig, t: float) -> float:
    return lerp(cfg.beta_start, cfg.beta_end, cfg.progress(t))


def s_min_at(cfg: ScheduleConfig, t: float) -> float:
    return lerp(cfg.uniform_start, cfg.min_scale, cfg.progress(t))


def sample_scale(
    cfg: ScheduleConfig,
    t: float,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> ArrayLike:
    u = rng.random(size)
    m = cfg.min_scale
    if cfg.kind == BETA_ANNEALED:
        beta = beta_param_at(cfg, t)
        x = 1.0 - (1.0 - u) ** (1.0 / beta)
        s = x * (1.0 - m) + m
    else:
        lo = s_min_at(cfg, t)
        s = lo + (1.0 - lo) * u
    return np.clip(s, m, 1.0) if size is not None else float(min(max(s, m), 1.0))


def scale_cdf(cfg: ScheduleConfig, t: float, s: ArrayLike) -> ArrayLike:
    s = np.asarray(s, dtype=np.float64)
    m = cfg.min_scale
    if cfg.kind == BETA_ANNEALED:
        if m >= 1.0:
            return (s >= 1.0).astype(np.float64)
        x = np.clip((s - m) / (1.0 - m), 0.0, 1.0)
        return 1.0 - (1.0 - x) ** beta_param_at(cfg, t)
    lo = s_min_at(cfg, t)
    if lo >= 1.0:
        return (s >= 1.0).astype(np.float64)
    return np.clip((s - lo) / (1.0 - lo), 0.0, 1.0)


def scale_pdf(cfg: ScheduleConfig, t: float, s: ArrayLike) -> ArrayLike:
    """
    Density of the scale distribution at iteration t; zero outside the support.
    A degenerate support (r = R, or s_min = 1) is a point mass: inf at s = 1.
    """
    s = np.asarray(s, dtype=np.float64)
    m = cfg.min_scale
    if cfg.kind == BETA_ANNEALED:
        if m >= 1.0:
            return np.where(s >= 1.0, np.inf, 0.0)
        beta = beta_param_at(cfg, t)
        inside = (s >= m) & (s <= 1.0)
        x = np.clip((s - m) / (1.0 - m), 0.0, 1.0)
        with np.errstate(divide="ignore"):
            density = beta * (1.0 - x) ** (beta - 1.0) / (1.0 - m)
        return np.where(inside, density, 0.0)
    lo = s_min_at(cfg, t)
    inside = (s >= lo) & (s <= 1.0)
    width = 1.0 - lo
    return np.where(inside, 1.0 / width if width > 0 else np.inf, 0.0)


def sample_offsets(s: float, rng: np.random.Generator) -> tuple:
    if not 0 < s <= 1:
        raise ContractViolation(f"scale must lie in (0, 1], got {s}")
    dx, dy = rng.random(2) * (1.0 - s)
    return float(dx), float(dy)


def sample_patch(cfg: ScheduleConfig, t: int, rng: np.random.Generator) -> ScaleSample:
    s = sample_scale(cfg, t, rng)
    dx, dy = sample_offsets(s, rng)
    spec = PatchSpec(
        scale=s, offset_x=dx, offset_y=dy, patch_res=cfg.patch_res, full_res=cfg.full_res
    )
    return ScaleSample(spec=spec, iter=t)


def _box_weights(offset: float, spec: PatchSpec, res: int) -> np.ndarray:
    """(r, R) matrix of source-pixel coverage fractions for each patch pixel."""
    r = spec.patch_res
    lo = (offset + spec.scale * np.arange(r) / r) * res
    hi = (offset + spec.scale * (np.arange(r) + 1) / r) * res
    src = np.arange(res)
    overlap = np.clip(
        np.minimum(hi[:, None], src[None, :] + 1) - np.maximum(lo[:, None], src[None, :]),
        0.0,
        None,
    )
    return overlap / overlap.sum(axis=1, keepdims=True)


def extract_patch(image: np.ndarray, spec: PatchSpec, filter: str = "nearest") -> np.ndarray:
    """
    Crop an r x r patch from an R x R (x C) raster.

    nearest: aliased extraction, source index clamp(floor(u * R), 0, R - 1).
             Commutes with a horizontal flip except where u * R is an integer,
             where the flipped crop lands one source column to the left;
    box:     area-weighted average over each pixel's footprint.
    """
    if image.ndim not in (2, 3) or image.size == 0:
        raise InputError(f"expected a non-empty H x W (x C) raster, got shape {image.shape}")
    if image.shape[0] != image.shape[1]:
        raise InputError(f"image must be square, got {image.shape[:2]}")
    res = image.shape[0]
    if res != spec.full_res:
        raise InputError(f"image resolution {res} does not match spec full_res {spec.full_res}")

    r = spec.patch_res
    if filter == "nearest":
        u, v = patch_pixel_to_ndc(spec, np.arange(r), np.arange(r))
        cols = np.clip(np.floor(u * res).astype(np.int64), 0, res - 1)
        rows = np.clip(np.floor(v * res).astype(np.int64), 0, res - 1)
        return image[rows[:, None], cols[None, :]]
    if filter == "box":
        wx = _box_weights(spec.offset_x, spec, res)
        wy = _box_weights(spec.offset_y, spec, res)
        if image.ndim == 2:
            return wy @ image @ wx.T
        return np.einsum("jy,yxc,ix->jic", wy, image, wx)
    raise InputError(f"unknown filter: {filter}")


def estimate_beta(samples: np.ndarray, min_scale: float, beta_init: float = 0.5) -> float:
    """
    Least-squares fit of beta to the empirical CDF of scale draws under the
    model s ~ Beta(1, beta) * (1 - r/R) + r/R.
    """
    samples = np.sort(np.asarray(samples, dtype=np.float64))
    if samples.size < 2:
        raise InputError("need at least two samples to estimate beta")
    x = np.clip((samples - min_scale) / (1.0 - min_scale), 0.0, 1.0)
    ecdf = (np.arange(x.size) + 0.5) / x.size

    params = Parameters()
    params.add("beta", value=beta_init, min=1e-4, max=10.0)

    def residual(p):
        return 1.0 - (1.0 - x) ** p["beta"].value - ecdf

    result = minimize(residual, params)
    beta = float(result.params["beta"].value)
    logger.debug("Estimated beta=%.4f from %d samples (%s)", beta, x.size, result.message)
    return beta


def annealing_timeline(cfg: ScheduleConfig, points: int) -> dict:
    """s_min(t) and beta(t) on `points` iterations spanning [0, T]."""
    ts = np.linspace(0, cfg.total_iters, points).round().astype(np.int64)
    return {
        "t": ts,
        "s_min": np.array([s_min_at(cfg, t) for t in ts]),
        "beta": np.array([beta_param_at(cfg, t) for t in ts]),
    }


def density_curves(cfg: ScheduleConfig, t: int, points: int = 1000) -> dict:
    """Uniform and beta scale densities at iteration t on a midpoint grid over [r/R, 1]."""
    m = cfg.min_scale
    s = m + (1.0 - m) * (np.arange(points) + 0.5) / points
    return {
        "s": s,
        "pdf_uniform": scale_pdf(replace(cfg, kind=UNIFORM_ANNEALED), t, s),
        "pdf_beta": scale_pdf(replace(cfg, kind=BETA_ANNEALED), t, s),
    }


def expected_beta_scale(beta: float, min_scale: float) -> float:
    """Closed-form mean of Beta(1, beta) * (1 - m) + m."""
    return (1.0 / (1.0 + beta)) * (1.0 - min_scale) + min_scale


def quantile_mass_above(cfg: ScheduleConfig, t: float, threshold: float) -> float:
    return float(1.0 - scale_cdf(cfg, t, threshold))
