"""Experiment configuration: typed sections loaded from YAML and validated
before any run.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .decoder import DecoderConfig, RefRange
from .encoder import GridConfig
from .head import LossWeights
from .scene import DetectionRange, LidarSpec, PoseNoiseSpec, SceneSpec


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class SceneConfig:
    agents: tuple[int, int] = (2, 3)  # inclusive range sampled per scene
    n_objects: int = 6
    range_scale: float = 0.25
    occluder_policy: str = "occlusion"
    angular_resolution_deg: float = 0.4
    sensor_noise: float = 0.0
    min_points: int = 5

    def spec(self, n_agents: int, policy: str | None = None) -> SceneSpec:
        return SceneSpec(n_agents=n_agents, n_objects=self.n_objects,
                         detection_range=DetectionRange.scaled(self.range_scale),
                         lidar=LidarSpec(angular_resolution_deg=self.angular_resolution_deg,
                                         range_noise=self.sensor_noise),
                         occluder_policy=policy or self.occluder_policy, min_points=self.min_points)


@dataclass
class ModelConfig:
    n_queries: int = 180
    query_dim: int = 64
    n_heads: int = 8
    n_points: int = 4
    n_levels: int = 4
    n_layers: int = 3
    channels: int = 32
    pillar_size: float = 0.2
    max_points_per_pillar: int = 16
    refine: bool = True
    fusion_heads: int = 8


@dataclass
class FusionConfig:
    mu: float = 0.3
    nms_iou: float | None = None  # optional rotated NMS on the fused output
    late_nms_iou: float = 0.5


@dataclass
class TrainConfig:
    n_scenes: int = 300
    epochs: int = 50
    max_minutes: float | None = None
    lr: float = 2e-4
    weight_decay: float = 1e-2
    warmup_epochs: int = 10
    warmup_lr: float = 2e-5
    min_lr: float = 2e-6
    max_grad_norm: float | None = 10.0
    aux_loss: bool = True
    single_weight: float = 1.0
    cls_weight: float = 2.0
    box_weight: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    random_fraction: float = 0.5  # share of training scenes using random occluders
    pose_noise_xyz: float = 0.0  # helper poses get N(0, s^2) xy noise, s ~ U(0, value) per step


@dataclass
class CommsConfig:
    budget_bytes: float | None = None  # None means unlimited


@dataclass
class EvalConfig:
    n_scenes: int = 200
    iou_thresholds: tuple[float, ...] = (0.3, 0.5, 0.7)
    sigma_xyz: float = 0.0
    sigma_heading: float = 0.0
    noise_sweep: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    heading_sweep: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    nq_sweep: tuple[int, ...] = (90, 180, 360, 540, 720, 900)
    mu_sweep: tuple[float, ...] = (0.3, 0.5, 0.7, 0.75)
    budget_sweep: tuple[float, ...] = (0, 46080, 92160)
    seed_offset: int = 1_000_000


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    comms: CommsConfig = field(default_factory=CommsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    workers: int = 1

    # derived objects -----------------------------------------------------
    @property
    def detection_range(self) -> DetectionRange:
        return DetectionRange.scaled(self.scene.range_scale)

    def grid(self) -> GridConfig:
        r = self.detection_range
        p = self.model.pillar_size
        return GridConfig((p, p), r.x, r.y, r.z, self.model.max_points_per_pillar)

    def ref_range(self) -> RefRange:
        r = self.detection_range
        return RefRange(r.x, r.y, r.z)

    def decoder(self) -> DecoderConfig:
        m = self.model
        return DecoderConfig(m.n_queries, m.query_dim, m.n_heads, m.n_levels, m.n_points, m.n_layers,
                             m.channels, m.refine, m.max_points_per_pillar)

    def loss_weights(self) -> LossWeights:
        t = self.train
        return LossWeights(t.cls_weight, t.box_weight, t.focal_alpha, t.focal_gamma)

    def pose_noise(self) -> PoseNoiseSpec:
        return PoseNoiseSpec(self.eval.sigma_xyz, self.eval.sigma_heading)

    @property
    def budget(self) -> float:
        b = self.comms.budget_bytes
        return math.inf if b is None else float(b)

    # validation / io -----------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        s, m, f, t = self.scene, self.model, self.fusion, self.train
        lo, hi = s.agents
        checks = [
            (1 <= lo <= hi <= 5, "scene.agents must satisfy 1 <= lo <= hi <= 5"),
            (1 <= s.n_objects <= 20, "scene.n_objects must be in 1..20"),
            (0 < s.range_scale <= 1, "scene.range_scale must be in (0, 1]"),
            (s.occluder_policy in ("random", "occlusion"), "scene.occluder_policy must be random|occlusion"),
            (s.occluder_policy != "occlusion" or lo >= 2, "occlusion scenes need at least two agents"),
            (m.n_queries >= 1, "model.n_queries must be >= 1"),
            (m.query_dim % m.n_heads == 0, "model.query_dim must be divisible by model.n_heads"),
            (m.query_dim % m.fusion_heads == 0, "model.query_dim must be divisible by model.fusion_heads"),
            (m.n_queries >= s.n_objects, "model.n_queries must be at least scene.n_objects"),
            (min(m.n_points, m.n_levels, m.n_layers, m.channels) >= 1, "model sizes must be positive"),
            (m.pillar_size > 0, "model.pillar_size must be positive"),
            (0 < f.mu < 1.5, "fusion.mu must be in (0, 1.5)"),
            (t.lr >= 0 and t.weight_decay >= 0, "train.lr and train.weight_decay must be non-negative"),
            (t.epochs >= 0 and t.n_scenes >= 1, "train.epochs >= 0 and train.n_scenes >= 1"),
            (0 <= t.random_fraction <= 1, "train.random_fraction must be in [0, 1]"),
            (t.pose_noise_xyz >= 0, "train.pose_noise_xyz must be non-negative"),
            (self.comms.budget_bytes is None or self.comms.budget_bytes >= 0, "comms.budget_bytes must be >= 0"),
            (self.eval.sigma_xyz >= 0 and self.eval.sigma_heading >= 0, "noise sigmas must be >= 0"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.grid()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(_plain(self.to_dict()), sort_keys=False))

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields of some sections overridden, e.g. ``replace(model={"n_queries": 90})``."""
        d = self.to_dict()
        for sec, vals in sections.items():
            if isinstance(vals, dict):
                d[sec].update(vals)
            else:
                d[sec] = vals
        return from_dict(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_SECTIONS = {"scene": SceneConfig, "model": ModelConfig, "fusion": FusionConfig,
             "train": TrainConfig, "comms": CommsConfig, "eval": EvalConfig}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        default = getattr(cls(), k)
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{section}.{k} must be a boolean")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{section}.{k} must be numeric, got {v!r}")
            if isinstance(default, int) and isinstance(v, float) and not v.is_integer():
                raise ConfigError(f"{section}.{k} must be an integer, got {v!r}")
            v = type(default)(v)
        kwargs[k] = v
    return cls(**kwargs)


def from_dict(d: dict | None) -> ExperimentConfig:
    d = dict(d or {})
    unknown = set(d) - set(_SECTIONS) - {"seed", "workers"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {name: _build(cls, {} if d.get(name) is None else d[name], name) for name, cls in _SECTIONS.items()}
    for key in ("seed", "workers"):
        if key in d:
            if isinstance(d[key], bool) or not isinstance(d[key], int):
                raise ConfigError(f"{key} must be an integer")
            kwargs[key] = d[key]
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(data)


__all__ = ["ConfigError", "ExperimentConfig", "SceneConfig", "ModelConfig", "FusionConfig", "TrainConfig",
           "CommsConfig", "EvalConfig", "from_dict", "load_config"]
