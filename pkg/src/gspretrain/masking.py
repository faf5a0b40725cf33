"""MAE-style random patch masks, checked against projected LiDAR depth.

A masked patch is kept ("valid") only when enough LiDAR points project into
it with a depth inside the configured closed range.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .geometry import Camera, project_points


@dataclass
class MaskConfig:
    patch_size: int = 32
    mask_ratio: float = 0.3
    depth_range: tuple[float, float] = (0.0, 50.0)
    seed: int = 0
    # Minimum number of in-range points needed to keep a patch.
    min_support: int = 1

    def __post_init__(self):
        self.depth_range = tuple(float(v) for v in self.depth_range)
        if self.patch_size < 1:
            raise ConfigurationError("patch_size must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError("mask_ratio must lie in (0, 1)")
        a, b = self.depth_range
        if not a < b:
            raise ConfigurationError("depth_range needs a < b")
        if self.min_support < 1:
            raise ConfigurationError("min_support must be >= 1")


@dataclass(frozen=True)
class PatchMask:
    image_index: int
    patches: tuple[tuple[int, int], ...]
    patch_size: int
    grid_shape: tuple[int, int]


@dataclass(frozen=True)
class ValidMask:
    image_index: int
    patch_size: int
    masked: tuple[tuple[int, int], ...]
    patches: tuple[tuple[int, int], ...]
    # (row, col) -> (pixels (k, 2), depths (k,)) of in-range supporting points
    support: dict = field(default_factory=dict, compare=False)

    def to_dict(self):
        return {
            "image_index": self.image_index,
            "patch_size": self.patch_size,
            "masked": [list(p) for p in self.masked],
            "patches": [list(p) for p in self.patches],
            "support": {
                f"{r},{c}": {
                    "pixels": self.support[(r, c)][0].tolist(),
                    "depths": self.support[(r, c)][1].tolist(),
                }
                for r, c in self.patches
            },
        }


@dataclass(frozen=True)
class LidarCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("LiDAR points must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Projections:
    """LiDAR points that land inside one camera image."""

    pixels: np.ndarray  # (N, 2) continuous pixel coordinates
    depths: np.ndarray  # (N,) view-space z
    point_index: np.ndarray  # (N,) index into the source cloud

    def __len__(self):
        return len(self.depths)


def round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def patch_grid(image_size, patch_size):
    """(rows, cols) of whole patches; partial edge patches are dropped."""
    width, height = image_size
    return height // patch_size, width // patch_size


def generate_patch_mask(image_size, cfg: MaskConfig, image_index=0, seed=None) -> PatchMask:
    width, height = image_size
    if width < cfg.patch_size or height < cfg.patch_size:
        raise ConfigurationError(
            f"image {width}x{height} is smaller than patch size {cfg.patch_size}"
        )
    rows, cols = patch_grid(image_size, cfg.patch_size)
    total = rows * cols
    count = round_half_away(cfg.mask_ratio * total)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    chosen = np.sort(rng.choice(total, size=count, replace=False))
    patches = tuple((int(i // cols), int(i % cols)) for i in chosen)
    return PatchMask(image_index, patches, cfg.patch_size, (rows, cols))


def pixel_index(pixels):
    """Integer pixel containing each continuous coordinate (centres at integers)."""
    return np.floor(np.asarray(pixels, dtype=np.float64) + 0.5).astype(np.int64)


def project_lidar(cloud: LidarCloud, camera: Camera) -> Projections:
    pts = cloud.points
    if len(pts) == 0:
        return Projections(np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int64))
    pixels, depth, in_front = project_points(camera, pts)
    with np.errstate(invalid="ignore"):
        inside = (
            in_front
            & (pixels[:, 0] >= -0.5) & (pixels[:, 0] < camera.width - 0.5)
            & (pixels[:, 1] >= -0.5) & (pixels[:, 1] < camera.height - 0.5)
        )
    idx = np.flatnonzero(inside)
    return Projections(pixels[idx], depth[idx], idx)


def validate_mask(mask: PatchMask, projections: Projections, cfg: MaskConfig) -> ValidMask:
    a, b = cfg.depth_range
    ps = mask.patch_size
    px = pixel_index(projections.pixels) if len(projections) else np.zeros((0, 2), np.int64)
    depths = projections.depths
    in_range = (depths >= a) & (depths <= b)
    cols = px[:, 0] // ps
    rows = px[:, 1] // ps

    valid = []
    support = {}
    for r, c in mask.patches:
        sel = in_range & (rows == r) & (cols == c)
        if np.count_nonzero(sel) >= cfg.min_support:
            valid.append((r, c))
            support[(r, c)] = (projections.pixels[sel].copy(), depths[sel].copy())
    return ValidMask(mask.image_index, ps, tuple(mask.patches), tuple(valid), support)


def mask_visualization(image, mask: ValidMask, outline=(0, 255, 0)):
    """Zero every masked patch and draw a one-pixel border around the valid ones."""
    out = np.array(image, copy=True)
    ps = mask.patch_size
    for r, c in mask.masked:
        out[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps] = 0
    colour = np.asarray(outline, dtype=np.float64)
    if out.dtype != np.uint8:
        colour = colour / 255.0
    colour = colour.astype(out.dtype)
    for r, c in mask.patches:
        y0, y1, x0, x1 = r * ps, (r + 1) * ps - 1, c * ps, (c + 1) * ps - 1
        out[y0, x0:x1 + 1] = colour
        out[y1, x0:x1 + 1] = colour
        out[y0:y1 + 1, x0] = colour
        out[y0:y1 + 1, x1] = colour
    return out


def config_dict(cfg: MaskConfig):
    d = asdict(cfg)
    d["depth_range"] = list(cfg.depth_range)
    return d
