import json
import logging
import math
import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, Optional, Tuple

import toml

from ..core.engine import PRECISIONS, TrainConfig
from ..core.geometry import DEFAULT_FOV, DEFAULT_RADIUS, CameraDistribution
from ..core.patch_sampler import ScheduleConfig
from ..core.renderer import RenderConfig
from ..errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

SETTINGS_PATH = os.path.join(os.getcwd(), "config", "settings.toml")
THREADS_ENV = "EPIGRAF_THREADS"
ENVELOPE_KEYS = ("seed", "output_dir", "precision", "workers")


def load_settings(path: Optional[str] = None) -> Dict[str, Any]:
    """Load machine settings from TOML, returning {} if the file is missing or broken."""
    path = path or SETTINGS_PATH
    try:
        if os.path.exists(path):
            return toml.load(path)
    except (toml.TomlDecodeError, OSError) as e:
        logger.warning("Error loading settings %s: %s", path, e)
    return {}


def resolve_workers(configured: Optional[int], settings: Dict[str, Any]) -> int:
    """EPIGRAF_THREADS, then the run config, then settings, then the CPU count."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            workers = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got '{env}'")
        if workers < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1")
        return workers
    if configured is not None:
        return configured
    from_settings = settings.get("general", {}).get("workers")
    if from_settings:
        return int(from_settings)
    return os.cpu_count() or 1


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, source=path, line=e.lineno, column=e.colno) from e
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _unwrap_optional(tp):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _coerce(tp, value: Any, where: str) -> Any:
    if value is None:
        return None
    tp = _unwrap_optional(tp)
    origin = typing.get_origin(tp)
    if is_dataclass(tp):
        return build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        item = typing.get_args(tp)[0]
        return tuple(_coerce(item, v, f"{where}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be an object")
        return value
    return value


def build(cls, data: Any, section: str):
    """Build dataclass `cls` from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")
    kwargs = {k: _coerce(known[k].type, v, f"{section}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ContractViolation, TypeError) as e:
        raise ConfigError(f"{section}: {e}") from e


@dataclass
class RunEnvelope:
    seed: int = 0
    output_dir: str = ""
    precision: str = "f32"
    workers: Optional[int] = None

    def __post_init__(self):
        if self.seed < 0:
            raise ContractViolation("seed must be >= 0")
        if self.precision not in PRECISIONS:
            raise ContractViolation(f"precision must be one of {tuple(PRECISIONS)}")
        if self.workers is not None and self.workers < 1:
            raise ContractViolation("workers must be >= 1")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class FitJob:
    scene: str = "sphere"
    train: Dict[str, Any] = field(default_factory=dict)


@dataclass
class RenderJob:
    checkpoint: str = ""
    frames: int = 8
    resolution: int = 64
    pitch: float = math.pi / 2
    radius: float = DEFAULT_RADIUS
    fov: float = DEFAULT_FOV
    render: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ExportJob:
    checkpoint: Optional[str] = None
    # "zero" (the default without a checkpoint) or "random".
    init: Optional[str] = None
    plane_res: int = 64
    features: int = 32
    hidden: int = 64
    resolution: int = 64

    def __post_init__(self):
        if self.checkpoint is not None and self.init is not None:
            raise ContractViolation("give either 'checkpoint' or 'init', not both")
        if self.checkpoint is None and self.init is None:
            self.init = "zero"
        if self.init is not None and self.init not in ("zero", "random"):
            raise ContractViolation("init must be 'zero' or 'random'")


@dataclass
class SampleScalesJob:
    schedule: Dict[str, Any] = field(default_factory=dict)
    iterations: Tuple[int, ...] = (0,)
    draws: int = 100000


@dataclass
class ScheduleJob:
    schedule: Dict[str, Any] = field(default_factory=dict)
    iterations: Tuple[int, ...] = (0, 2500, 5000, 10000)
    grid_points: int = 1000
    timeline_points: int = 101


@dataclass
class ModulationDemoJob:
    fourier_freqs: int = 8
    hidden_dim: int = 512
    layer_channels: Tuple[int, ...] = (32, 64, 128)
    init: str = "random"
    scale_grid_points: int = 64
    layers: Optional[Tuple[int, ...]] = None
    # Gain spread that marks a filter as scale-dependent.
    threshold: float = 0.5


@dataclass
class CompareJob:
    scene: str = "sphere"
    train: Dict[str, Any] = field(default_factory=dict)
    seeds: Tuple[int, ...] = (0, 1, 2)
    threshold_db: float = 25.0
    slack: float = 0.1
    # Extra uniform baselines, one per annealing length; empty races a single
    # uniform schedule sharing the beta schedule's settings.
    uniform_total_iters: Tuple[int, ...] = ()

    def __post_init__(self):
        if any(t < 1 for t in self.uniform_total_iters):
            raise ContractViolation("uniform_total_iters entries must be positive")


JOB_TYPES = {
    "fit": FitJob,
    "render": RenderJob,
    "export-density": ExportJob,
    "sample-scales": SampleScalesJob,
    "schedule": ScheduleJob,
    "modulation-demo": ModulationDemoJob,
    "compare-schedules": CompareJob,
}


@dataclass
class RunConfig:
    subcommand: str
    envelope: RunEnvelope
    job: Any
    settings: Dict[str, Any]
    raw: Dict[str, Any]


def _resolve_path(path: str, base_dir: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def load_run_config(
    subcommand: str,
    path: Optional[str] = None,
    settings: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Parse a subcommand's JSON config. Relative paths are resolved against the
    config file's directory (the working directory without a file).
    """
    if subcommand not in JOB_TYPES:
        raise ConfigError(f"unknown subcommand '{subcommand}'")
    settings = settings if settings is not None else load_settings()
    doc = read_json(path) if path else {}
    base_dir = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()

    envelope = build(RunEnvelope, {k: doc[k] for k in ENVELOPE_KEYS if k in doc}, "config")
    job = build(JOB_TYPES[subcommand], {k: v for k, v in doc.items() if k not in ENVELOPE_KEYS}, "config")

    envelope.output_dir = _resolve_path(envelope.output_dir or os.path.join("runs", subcommand), base_dir)
    envelope.workers = resolve_workers(envelope.workers, settings)
    if getattr(job, "checkpoint", None):
        job.checkpoint = _resolve_path(job.checkpoint, base_dir)
    logger.debug("Loaded %s config from %s", subcommand, path or "<defaults>")
    return RunConfig(subcommand=subcommand, envelope=envelope, job=job, settings=settings, raw=doc)


def render_config(section: Dict[str, Any], settings: Dict[str, Any], where: str = "render") -> RenderConfig:
    """Settings [render] defaults overridden by a config section."""
    merged = {**settings.get("render", {}), **section}
    return build(RenderConfig, merged, where)


def camera_distribution(section: Dict[str, Any], settings: Dict[str, Any]) -> CameraDistribution:
    camera = dict(settings.get("camera", {}))
    if "distribution" in camera:
        camera["kind"] = camera.pop("distribution")
    camera.update(section)
    return build(CameraDistribution, camera, "train.camera")


def schedule_config(
    section: Dict[str, Any],
    where: str = "schedule",
    **defaults: Any,
) -> ScheduleConfig:
    return build(ScheduleConfig, {**defaults, **section}, where)


def train_config(section: Dict[str, Any], run: RunConfig) -> TrainConfig:
    """
    TrainConfig from a `train` section. Seed, precision and workers come from
    the envelope; the schedule inherits the training resolutions and anneals
    over half the run unless it says otherwise.
    """
    section = dict(section)
    for key in ("seed", "precision", "workers"):
        if key in section:
            raise ConfigError(f"'{key}' belongs at the top level of the config, not in train")
    render = render_config(section.pop("render", {}), run.settings, "train.render")
    camera = camera_distribution(section.pop("camera", {}), run.settings)
    schedule_section = section.pop("schedule", None)
    cfg = build(TrainConfig, section, "train")
    schedule = None
    if schedule_section is not None:
        schedule = schedule_config(
            schedule_section,
            "train.schedule",
            total_iters=max(cfg.iters // 2, 1),
            patch_res=cfg.patch_res,
            full_res=cfg.full_res,
        )
    try:
        return replace(
            cfg,
            schedule=schedule,
            render=render,
            camera=camera,
            seed=run.envelope.seed,
            precision=run.envelope.precision,
            workers=run.envelope.workers,
        )
    except ContractViolation as e:
        raise ConfigError(f"train: {e}") from e
