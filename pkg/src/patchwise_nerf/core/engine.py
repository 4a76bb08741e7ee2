"""
Patch-wise reconstruction of a procedural scene.

Each iteration draws `batch_patches` (scale, offset, pose) triples, renders
the oracle and the tri-plane scene through the same rays, and takes one
Adam step on the mean patch L2 loss.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from ..errors import ContractViolation, InputError, TrainingDivergedError
from ..fields.base import RadianceField
from ..fields.oracles import GroundTruthScene
from ..fields.triplane import (
    DEFAULT_FEATURES,
    DEFAULT_HIDDEN,
    DEFAULT_PLANE_RES,
    TriPlaneScene,
)
from .geometry import CameraDistribution, PatchSpec, RayBundle, orbit_poses, patch_rays
from .patch_sampler import BETA_ANNEALED, UNIFORM_ANNEALED, ScheduleConfig, sample_patch
from .renderer import RenderConfig, backprop_rays, render_rays, shade

logger = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}
_PSNR_FLOOR_MSE = 1e-12


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractViolation("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractViolation("Adam betas must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 5000
    batch_patches: int = 4
    patch_res: int = 16
    full_res: int = 64
    # None: beta schedule annealed over the first half of training.
    schedule: Optional[ScheduleConfig] = None
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0
    eval_every: int = 250
    eval_views: int = 8
    plane_res: int = DEFAULT_PLANE_RES
    features: int = DEFAULT_FEATURES
    hidden: int = DEFAULT_HIDDEN
    render: RenderConfig = field(default_factory=RenderConfig)
    camera: CameraDistribution = field(default_factory=CameraDistribution)
    precision: str = "f32"
    workers: int = 1
    progress: bool = True

    def __post_init__(self):
        for name in ("iters", "batch_patches", "eval_every", "eval_views", "workers"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")
        if self.precision not in PRECISIONS:
            raise ContractViolation(f"precision must be one of {tuple(PRECISIONS)}")
        if self.schedule is None:
            schedule = ScheduleConfig(
                kind=BETA_ANNEALED,
                total_iters=max(self.iters // 2, 1),
                patch_res=self.patch_res,
                full_res=self.full_res,
            )
            object.__setattr__(self, "schedule", schedule)
        elif (self.schedule.patch_res, self.schedule.full_res) != (self.patch_res, self.full_res):
            raise ContractViolation("schedule patch_res/full_res must match the training resolution")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    cfg: AdamConfig,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; parameters and moments are updated in place."""
    for k, p in params.items():
        if state.m[k].shape != p.shape or grads[k].shape != p.shape:
            raise ContractViolation(f"optimizer state for '{k}' does not match the parameter")

    state.step += 1
    bc1 = 1.0 - cfg.beta1**state.step
    bc2 = 1.0 - cfg.beta2**state.step
    step_size = cfg.lr / bc1
    for k, p in params.items():
        g = grads[k]
        state.m[k] *= cfg.beta1
        state.m[k] += (1.0 - cfg.beta1) * g
        state.v[k] *= cfg.beta2
        state.v[k] += (1.0 - cfg.beta2) * (g * g)
        p -= step_size * state.m[k] / (np.sqrt(state.v[k] / bc2) + cfg.eps)
    return params, state


def patch_l2_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over pixels and channels, and its gradient w.r.t. pred."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InputError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    diff = pred.astype(np.float64) - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - target) ** 2))
    return -10.0 * math.log10(max(mse, _PSNR_FLOOR_MSE))


@dataclass
class ReportRow:
    iter: int
    psnr_db: float
    loss: float
    wall_time: float


@dataclass
class TrainReport:
    rows: List[ReportRow] = field(default_factory=list)

    def append(self, row: ReportRow):
        if self.rows and row.iter <= self.rows[-1].iter:
            raise ContractViolation("report iterations must increase")
        self.rows.append(row)

    def to_frame(self, include_wall_time: bool = False) -> pd.DataFrame:
        columns = ["iter", "psnr_db", "loss"] + (["wall_time"] if include_wall_time else [])
        return pd.DataFrame([{c: getattr(r, c) for c in columns} for r in self.rows], columns=columns)

    @property
    def final_psnr(self) -> float:
        return self.rows[-1].psnr_db if self.rows else float("nan")


def iters_to_threshold(report: TrainReport, threshold_db: float) -> Optional[int]:
    """First evaluated iteration whose PSNR reaches the threshold, or None."""
    for row in report.rows:
        if row.psnr_db >= threshold_db:
            return row.iter
    return None


def evaluate(
    scene: RadianceField,
    targets: Sequence[np.ndarray],
    cfg: TrainConfig,
    background: Optional[RadianceField] = None,
) -> float:
    """Full-image PSNR over the held-out orbit, rendered without jitter."""
    render = replace(cfg.render, stratified_jitter=False)
    poses = orbit_poses(len(targets), radius=cfg.camera.radius, fov=cfg.camera.fov)
    errors = []
    for pose, target in zip(poses, targets):
        rays = patch_rays(pose, PatchSpec.full_frame(cfg.full_res))
        pred = render_rays(scene, rays, render, background, None, cfg.workers).rgb
        errors.append(np.mean((pred.astype(np.float64) - target) ** 2))
    return -10.0 * math.log10(max(float(np.mean(errors)), _PSNR_FLOOR_MSE))


def train(
    cfg: TrainConfig,
    gt: GroundTruthScene,
    background: Optional[RadianceField] = None,
) -> Tuple[TriPlaneScene, TrainReport]:
    if gt.full_res != cfg.full_res:
        raise ContractViolation(f"oracle renders at {gt.full_res}, training expects {cfg.full_res}")
    init_seq, patch_seq, render_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    patch_rng = np.random.default_rng(patch_seq)
    render_rng = np.random.default_rng(render_seq)

    scene = TriPlaneScene.initialize(
        cfg.plane_res, cfg.features, cfg.hidden, np.random.default_rng(init_seq), cfg.dtype
    )
    params = scene.parameters()
    state = AdamState.zeros_like(params)

    eval_poses = orbit_poses(cfg.eval_views, radius=cfg.camera.radius, fov=cfg.camera.fov)
    targets = [gt.render_view(pose, cfg.workers) for pose in eval_poses]
    logger.info(
        "Training %d iters, %d patches of %dx%d from %dx%d, %s schedule",
        cfg.iters,
        cfg.batch_patches,
        cfg.patch_res,
        cfg.patch_res,
        cfg.full_res,
        cfg.full_res,
        cfg.schedule.kind,
    )

    report = TrainReport()
    start = time.perf_counter()
    progress = tqdm(range(cfg.iters), desc="fit", disable=None if cfg.progress else True)
    for t in progress:
        grads = scene.zero_gradients()
        loss_sum = 0.0
        for _ in range(cfg.batch_patches):
            sample = sample_patch(cfg.schedule, t, patch_rng)
            pose = cfg.camera.sample(patch_rng)
            rays = patch_rays(pose, sample.spec)
            target = gt.render_rays(rays, cfg.workers)
            result = render_rays(scene, rays, cfg.render, background, render_rng, cfg.workers)
            loss, d_pred = patch_l2_loss(result.rgb, target)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {t} for patch {sample.spec} and pose {pose}"
                )
            patch_grads = backprop_rays(scene, rays, result, d_pred, cfg.render.chunk_rays, cfg.workers)
            for k in grads:
                grads[k] += patch_grads[k]
            loss_sum += loss
        for k in grads:
            grads[k] /= cfg.batch_patches
        adam_step(params, grads, state, cfg.adam)

        if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.iters:
            value = evaluate(scene, targets, cfg, background)
            report.append(ReportRow(t + 1, value, loss_sum / cfg.batch_patches, time.perf_counter() - start))
            progress.set_postfix(psnr=f"{value:.2f}")
            logger.info("iter %d: psnr %.2f dB, loss %.5f", t + 1, value, loss_sum / cfg.batch_patches)

    return scene, report


@dataclass
class ScheduleComparison:
    frame: pd.DataFrame
    reports: Dict[Tuple[str, int], TrainReport]
    median_iters: Dict[str, float]
    passed: bool


def comparison_schedules(cfg: TrainConfig, uniform_total_iters: Sequence[int] = ()) -> Dict[str, ScheduleConfig]:
    """
    The schedules raced against each other. Both kinds share cfg.schedule and
    differ only in `kind`; each entry of `uniform_total_iters` adds a uniform
    baseline annealed over that many iterations instead.
    """
    schedules = {BETA_ANNEALED: replace(cfg.schedule, kind=BETA_ANNEALED)}
    if not uniform_total_iters:
        schedules[UNIFORM_ANNEALED] = replace(cfg.schedule, kind=UNIFORM_ANNEALED)
    for total in uniform_total_iters:
        schedules[f"{UNIFORM_ANNEALED}_T{total}"] = replace(
            cfg.schedule, kind=UNIFORM_ANNEALED, total_iters=total
        )
    return schedules


def compare_schedules(
    cfg: TrainConfig,
    gt: GroundTruthScene,
    seeds: Sequence[int] = (0, 1, 2),
    threshold_db: float = 25.0,
    slack: float = 0.1,
    background: Optional[RadianceField] = None,
    uniform_total_iters: Sequence[int] = (),
) -> ScheduleComparison:
    """
    Train with each schedule for every seed and compare the median number
    of iterations to reach `threshold_db`. Runs that never reach it count as
    infinitely slow. The beta schedule passes when it is within `slack` of
    the fastest uniform baseline.
    """
    rows = []
    reports = {}
    schedules = comparison_schedules(cfg, uniform_total_iters)
    for name, schedule in schedules.items():
        for seed in seeds:
            _, report = train(replace(cfg, schedule=schedule, seed=seed), gt, background)
            reports[(name, seed)] = report
            reached = iters_to_threshold(report, threshold_db)
            rows.append({"seed": seed, "schedule": name, "iters_to_threshold": reached})
            logger.info("%s seed %d: threshold reached at %s", name, seed, reached)

    frame = pd.DataFrame(rows, columns=["seed", "schedule", "iters_to_threshold"])
    median_iters = {}
    for name in schedules:
        values = [math.inf if r["iters_to_threshold"] is None else r["iters_to_threshold"] for r in rows if r["schedule"] == name]
        median_iters[name] = float(np.median(values))
    fastest_uniform = min(v for k, v in median_iters.items() if k != BETA_ANNEALED)
    passed = median_iters[BETA_ANNEALED] <= (1.0 + slack) * fastest_uniform
    return ScheduleComparison(frame=frame, reports=reports, median_iters=median_iters, passed=bool(passed))


@dataclass
class GradientCheck:
    names: List[str]
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.analytic - self.numeric)

    def passed(self, rtol: float = 1e-3, atol: float = 1e-9) -> bool:
        scale = np.maximum(np.abs(self.analytic), np.abs(self.numeric))
        return bool(np.all(self.errors <= rtol * scale + atol))


def check_gradients(
    scene: TriPlaneScene,
    rays: RayBundle,
    target: np.ndarray,
    render: RenderConfig,
    count: int = 100,
    h: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
    background: Optional[RadianceField] = None,
) -> GradientCheck:
    """
    Compare backprop gradients of the patch L2 loss against central
    differences on `count` parameters. Sample depths are frozen after one
    jitter-free render. Half the checked entries are plane entries inside the
    rendered stencils, the rest are decoder weights.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    render = replace(render, stratified_jitter=False)
    result = render_rays(scene, rays, render, background)
    _, d_pred = patch_l2_loss(result.rgb, target)
    grads = backprop_rays(scene, rays, result, d_pred, render.chunk_rays)
    flat = rays.flatten()

    def loss_now() -> float:
        rgb = shade(scene, flat, result.depths, result.background)
        return patch_l2_loss(rgb.reshape(target.shape), target)[0]

    params = scene.parameters()
    support = np.flatnonzero(grads["planes"])
    n_planes = min(count // 2, support.size)
    entries = [("planes", int(i)) for i in rng.choice(support, n_planes, replace=False)]
    mlp_names = [k for k in params if k != "planes"]
    while len(entries) < count:
        name = mlp_names[int(rng.integers(len(mlp_names)))]
        entries.append((name, int(rng.integers(params[name].size))))

    analytic, numeric = [], []
    for name, index in entries:
        values = params[name].reshape(-1)
        original = values[index]
        values[index] = original + h
        plus = loss_now()
        values[index] = original - h
        minus = loss_now()
        values[index] = original
        analytic.append(grads[name].reshape(-1)[index])
        numeric.append((plus - minus) / (2 * h))
    return GradientCheck(
        names=[f"{n}[{i}]" for n, i in entries],
        analytic=np.array(analytic),
        numeric=np.array(numeric),
    )
