"""Experiment configuration: one dataclass tree, round-tripped through JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .loss import LossWeights
from .masking import MaskConfig
from .optim import OptimConfig
from .rays import DEFAULT_ANCHORS_PER_RAY, DEFAULT_RAY_BUDGET


@dataclass
class GridConfig:
    bounds: tuple = (-40.0, 40.0, -40.0, 40.0, -1.0, 5.4)
    resolution: tuple = (16, 200, 200)  # (Z, H, W): 0.4 m voxels

    def __post_init__(self):
        self.bounds = tuple(float(b) for b in self.bounds)
        self.resolution = tuple(int(r) for r in self.resolution)


@dataclass
class RigConfig:
    n_cameras: int = 6
    width: int = 128
    height: int = 128
    fov_deg: float = 90.0
    radius: float = 0.3
    cam_height: float = 1.2
    lidar_origin: tuple = (0.0, 0.0, 1.6)
    rings: int = 32
    elevation_deg: tuple = (-40.0, 10.0)
    azimuth_steps: int = 360
    max_range: float = 70.0

    def __post_init__(self):
        self.lidar_origin = tuple(float(v) for v in self.lidar_origin)
        self.elevation_deg = tuple(float(v) for v in self.elevation_deg)


@dataclass
class LssConfig:
    """Lift-splat encoder: trainable per-camera feature maps and depth logits."""

    stride: int = 4
    depth_bins: int = 16
    init_scale: float = 0.1


@dataclass
class TrainConfig:
    scene_path: str | None = None
    scene_seed: int = 7
    rig: RigConfig = field(default_factory=RigConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    feature_dim: int = 32
    hidden: tuple = (64, 64)
    encoder: str = "grid"  # "grid" (free grid) | "lss" (lift-splat)
    render_mode: str = "ray"  # "ray" | "splat"
    mask: MaskConfig = field(default_factory=MaskConfig)
    ray_budget: int = DEFAULT_RAY_BUDGET
    anchors_per_ray: int = DEFAULT_ANCHORS_PER_RAY
    jitter: bool = False
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    lss: LssConfig = field(default_factory=LssConfig)
    grid_init_scale: float = 0.1
    dtype: str = "float32"
    steps: int = 200
    checkpoint_interval: int = 0
    eval_batches: int = 4
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.encoder not in ("grid", "lss"):
            raise ConfigurationError(f"unknown encoder {self.encoder!r}")
        if self.render_mode not in ("ray", "splat"):
            raise ConfigurationError(f"unknown render mode {self.render_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.ray_budget < 1 or self.anchors_per_ray < 1:
            raise ConfigurationError("ray budget and anchors per ray must be >= 1")

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())

    def model_signature(self):
        """Fields a checkpoint must agree on to be loadable."""
        d = self.to_dict()
        return {k: d[k] for k in ("feature_dim", "hidden", "encoder", "grid", "lss", "dtype")} | {
            "n_cameras": self.rig.n_cameras,
            "image": [self.rig.width, self.rig.height],
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigurationError(f"expected an object for {cls.__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value) if sub is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


_NESTED = {
    (TrainConfig, "rig"): RigConfig,
    (TrainConfig, "grid"): GridConfig,
    (TrainConfig, "mask"): MaskConfig,
    (TrainConfig, "loss"): LossWeights,
    (TrainConfig, "optim"): OptimConfig,
    (TrainConfig, "lss"): LssConfig,
}


def reference_config(**overrides):
    """Full-scale defaults: the reference pre-training hyperparameters."""
    return TrainConfig(**overrides)


def fixture_config(**overrides):
    """Desk-scale reference setup: 6 cameras at 64x64, a 32x32x8 free grid,
    256 rays x 32 anchors, seed 7."""
    base = dict(
        scene_seed=7,
        rig=RigConfig(width=64, height=64),
        grid=GridConfig(bounds=(-8.0, 8.0, -8.0, 8.0, -0.4, 2.8), resolution=(8, 32, 32)),
        mask=MaskConfig(patch_size=16, mask_ratio=0.3, depth_range=(0.0, 12.0)),
        ray_budget=256,
        anchors_per_ray=32,
        optim=OptimConfig(learning_rate=1e-2, weight_decay=0.01),
        steps=200,
        seed=7,
    )
    base.update(overrides)
    return TrainConfig(**base)
