import argparse
import logging
import math
import os
import sys
import time
from dataclasses import asdict, replace
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .core.engine import compare_schedules, train
from .core.geometry import orbit_poses
from .core.modulation import (
    ModulationNet,
    classify_filters,
    dump_modulation_profile,
    equivalence_sweep,
)
from .core.patch_sampler import (
    BETA_ANNEALED,
    annealing_timeline,
    beta_param_at,
    density_curves,
    estimate_beta,
    expected_beta_scale,
    s_min_at,
    sample_scale,
)
from .core.renderer import NERFPP, RenderConfig, render_full_frame
from .errors import ConfigError
from .fields.background import BackgroundField
from .fields.oracles import make_scene
from .fields.triplane import TriPlaneScene, export_density_grid
from .utils.config import RunConfig, load_run_config, render_config, schedule_config, train_config
from .utils.data_manager import DataManager

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EQUIVALENCE_TOLERANCE = {"f32": 1e-5, "f64": 1e-12}

# Each runner returns (artifact paths, extra manifest entries, success flag).
RunnerResult = Tuple[List[str], Dict[str, Any], bool]


def _background(cfg: RenderConfig, seed: int) -> Optional[BackgroundField]:
    if cfg.background != NERFPP:
        return None
    return BackgroundField.initialize(rng=np.random.default_rng(seed))


def run_fit(run: RunConfig) -> RunnerResult:
    out = run.envelope.output_dir
    cfg = train_config(run.job.train, run)
    background = _background(cfg.render, run.envelope.seed)
    gt = make_scene(run.job.scene, cfg.full_res, cfg.render, background)
    scene, report = train(cfg, gt, background)

    artifacts = [
        DataManager.write_checkpoint(scene, os.path.join(out, "checkpoint.epgc")),
        DataManager.write_csv(report.to_frame(), os.path.join(out, "report.csv")),
    ]
    eval_cfg = replace(cfg.render, stratified_jitter=False)
    poses = orbit_poses(cfg.eval_views, radius=cfg.camera.radius, fov=cfg.camera.fov)
    for k, pose in enumerate(poses):
        image = render_full_frame(scene, pose, cfg.full_res, eval_cfg, background, workers=cfg.workers)
        artifacts.append(DataManager.write_ppm(image, os.path.join(out, f"eval_{k:03d}.ppm")))

    print(f"fit: final PSNR {report.final_psnr:.2f} dB after {cfg.iters} iterations")
    extra = {
        "final_psnr_db": report.final_psnr,
        "wall_time": report.to_frame(include_wall_time=True)["wall_time"].tolist(),
    }
    return artifacts, extra, True


def run_render(run: RunConfig) -> RunnerResult:
    job = run.job
    if not job.checkpoint:
        raise ConfigError("render needs a 'checkpoint'")
    scene = DataManager.read_checkpoint(job.checkpoint, run.envelope.dtype)
    cfg = render_config(job.render, run.settings)
    background = _background(cfg, run.envelope.seed)
    rng = np.random.default_rng(run.envelope.seed)

    artifacts = []
    for k, pose in enumerate(orbit_poses(job.frames, job.pitch, job.radius, job.fov)):
        image = render_full_frame(scene, pose, job.resolution, cfg, background, rng, run.envelope.workers)
        path = os.path.join(run.envelope.output_dir, f"frame_{k:03d}.ppm")
        artifacts.append(DataManager.write_ppm(image, path))
    print(f"render: wrote {len(artifacts)} frames to {run.envelope.output_dir}")
    return artifacts, {}, True


def run_export_density(run: RunConfig) -> RunnerResult:
    job = run.job
    dtype = run.envelope.dtype
    if job.checkpoint:
        scene = DataManager.read_checkpoint(job.checkpoint, dtype)
    elif job.init == "zero":
        scene = TriPlaneScene.zeros(job.plane_res, job.features, job.hidden, dtype)
    else:
        rng = np.random.default_rng(run.envelope.seed)
        scene = TriPlaneScene.initialize(job.plane_res, job.features, job.hidden, rng, dtype)
    grid = export_density_grid(scene, job.resolution)
    path = DataManager.write_density_grid(grid, os.path.join(run.envelope.output_dir, "density.epgf"))
    print(f"export-density: {job.resolution}^3 grid, density range [{grid.min():.6g}, {grid.max():.6g}]")
    return [path], {"density_min": float(grid.min()), "density_max": float(grid.max())}, True


def run_sample_scales(run: RunConfig) -> RunnerResult:
    job = run.job
    cfg = schedule_config(job.schedule)
    rng = np.random.default_rng(run.envelope.seed)
    frames, summary = [], []
    for t in job.iterations:
        draws = sample_scale(cfg, t, rng, size=job.draws)
        frames.append(pd.DataFrame({"t": np.full(draws.size, t), "s": draws}))
        entry = {"t": t, "mean": float(draws.mean())}
        if cfg.kind == BETA_ANNEALED:
            entry["beta"] = beta_param_at(cfg, t)
            entry["expected_mean"] = expected_beta_scale(entry["beta"], cfg.min_scale)
            entry["beta_fit"] = estimate_beta(draws, cfg.min_scale)
        else:
            entry["s_min"] = s_min_at(cfg, t)
            entry["expected_mean"] = (1.0 + entry["s_min"]) / 2.0
        summary.append(entry)
        print(f"sample-scales: t={t} mean={entry['mean']:.6f} expected={entry['expected_mean']:.6f}")
    path = DataManager.write_csv(pd.concat(frames, ignore_index=True), os.path.join(run.envelope.output_dir, "scales.csv"))
    return [path], {"summary": summary}, True


def run_schedule(run: RunConfig) -> RunnerResult:
    job = run.job
    cfg = schedule_config(job.schedule)
    out = run.envelope.output_dir
    artifacts = []
    for t in job.iterations:
        curves = density_curves(cfg, t, job.grid_points)
        artifacts.append(DataManager.write_csv(pd.DataFrame(curves), os.path.join(out, f"schedule_t{t}.csv")))
    timeline = annealing_timeline(cfg, job.timeline_points)
    artifacts.append(DataManager.write_csv(pd.DataFrame(timeline), os.path.join(out, "annealing.csv")))
    print(f"schedule: wrote {len(job.iterations)} density curves and the annealing timeline")
    return artifacts, {}, True


def run_modulation_demo(run: RunConfig) -> RunnerResult:
    job = run.job
    rng = np.random.default_rng(run.envelope.seed)
    ok = True
    deltas = {}
    for precision, tolerance in EQUIVALENCE_TOLERANCE.items():
        sweep = equivalence_sweep(dtype=np.float32 if precision == "f32" else np.float64, rng=rng)
        worst = float(sweep["max_abs_delta"].max())
        deltas[precision] = worst
        passed = worst < tolerance
        ok &= passed
        print(sweep.to_string(index=False))
        print(f"{precision}: max |weight - output modulation| = {worst:.3e} ({'ok' if passed else 'FAIL'} < {tolerance:g})")

    net = ModulationNet.initialize(
        job.layer_channels, job.fourier_freqs, job.hidden_dim, job.init, rng, run.envelope.dtype
    )
    n = job.scale_grid_points
    scales = np.linspace(1.0 / n, 1.0, n)
    path = os.path.join(run.envelope.output_dir, "modulation_profile.csv")
    profile = dump_modulation_profile(net, scales, job.layers, path)

    counts = {}
    layers = range(len(job.layer_channels)) if job.layers is None else job.layers
    for layer in layers:
        gains = profile[[c for c in profile.columns if c.startswith(f"l{layer}_")]].to_numpy()
        counts[f"layer_{layer}"] = classify_filters(gains, job.threshold)
        print(f"layer {layer}: {counts[f'layer_{layer}']}")
    return [path], {"max_abs_delta": deltas, "filter_classes": counts}, ok


def run_compare_schedules(run: RunConfig) -> RunnerResult:
    job = run.job
    out = run.envelope.output_dir
    cfg = train_config(job.train, run)
    background = _background(cfg.render, run.envelope.seed)
    gt = make_scene(job.scene, cfg.full_res, cfg.render, background)
    result = compare_schedules(
        cfg, gt, job.seeds, job.threshold_db, job.slack, background, job.uniform_total_iters
    )

    artifacts = [DataManager.write_csv(result.frame, os.path.join(out, "comparison.csv"))]
    for (kind, seed), report in sorted(result.reports.items()):
        path = os.path.join(out, f"report_{kind}_{seed}.csv")
        artifacts.append(DataManager.write_csv(report.to_frame(), path))
    medians = {k: (None if math.isinf(v) else v) for k, v in result.median_iters.items()}
    print(f"compare-schedules: median iterations to {job.threshold_db} dB {medians}, passed={result.passed}")
    return artifacts, {"median_iters": medians, "passed": result.passed}, True


RUNNERS: Dict[str, Callable[[RunConfig], RunnerResult]] = {
    "fit": run_fit,
    "render": run_render,
    "export-density": run_export_density,
    "sample-scales": run_sample_scales,
    "schedule": run_schedule,
    "modulation-demo": run_modulation_demo,
    "compare-schedules": run_compare_schedules,
}


class CliParser(argparse.ArgumentParser):
    """Usage mistakes are configuration errors: exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="patchwise-nerf", description="Patch-wise tri-plane reconstruction toolkit")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        cmd = sub.add_parser(name)
        cmd.add_argument("-c", "--config", help="JSON run config (defaults apply without one)")
    return parser


def configure_logging(verbose: bool, quiet: bool):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on configuration errors, 2 on any other failure."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    configure_logging(args.verbose, args.quiet)
    try:
        run = load_run_config(args.command, args.config)
        start = time.perf_counter()
        artifacts, extra, ok = RUNNERS[args.command](run)
        extra["wall_seconds"] = time.perf_counter() - start
        extra["resolved"] = asdict(run.envelope)
        DataManager.write_manifest(run.envelope.output_dir, args.command, run.raw, artifacts, extra)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 1
    except Exception as e:
        logger.error("%s failed: %s", args.command, e)
        logger.debug("Traceback", exc_info=True)
        return 2
    return 0 if ok else 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
