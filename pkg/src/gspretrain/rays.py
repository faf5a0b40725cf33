"""Rays through valid masked patches and the Gaussian anchors sampled on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EmptyBatchError
from .geometry import pixel_rays
from .masking import ValidMask, pixel_index

DEFAULT_RAY_BUDGET = 1024
DEFAULT_ANCHORS_PER_RAY = 100


@dataclass(frozen=True)
class RayBatch:
    camera_index: np.ndarray  # (N,)
    pixels: np.ndarray  # (N, 2) integer (u, v)
    patches: np.ndarray  # (N, 2) (row, col) of the source patch
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3) unit
    view_dirs: np.ndarray  # (N, 3) world direction with unit view-space z
    depth: np.ndarray  # (N,) LiDAR view depth, NaN without support

    def __len__(self):
        return len(self.camera_index)

    @property
    def has_depth(self):
        return ~np.isnan(self.depth)


@dataclass(frozen=True)
class AnchorSet:
    positions: np.ndarray  # (N, D, 3) world metres
    depths: np.ndarray  # (N, D) view depths, strictly increasing per row

    @property
    def n_rays(self):
        return self.depths.shape[0]

    @property
    def per_ray(self):
        return self.depths.shape[1]

    def flat_positions(self):
        return self.positions.reshape(-1, 3)


def _patch_candidates(vm: ValidMask):
    """All pixels of the valid patches plus the nearest LiDAR depth per pixel."""
    ps = vm.patch_size
    rows, cols, us, vs, depth = [], [], [], [], []
    for r, c in vm.patches:
        v, u = np.mgrid[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps]
        u, v = u.ravel(), v.ravel()
        d = np.full(u.shape, np.inf)
        pix, dep = vm.support[(r, c)]
        ipx = pixel_index(pix)
        np.minimum.at(d, (ipx[:, 1] - r * ps) * ps + (ipx[:, 0] - c * ps), dep)
        d[np.isinf(d)] = np.nan
        rows.append(np.full(u.shape, r))
        cols.append(np.full(u.shape, c))
        us.append(u)
        vs.append(v)
        depth.append(d)
    cat = np.concatenate
    return cat(rows), cat(cols), cat(us), cat(vs), cat(depth)


def select_rays(valid_masks, cameras, budget=DEFAULT_RAY_BUDGET, seed=0) -> RayBatch:
    """Draw up to ``budget`` pixel rays from the valid patches.

    Pixels with LiDAR support are taken first so that as many rays as possible
    carry a depth target; the result is ordered by (camera, row, column).
    """
    if budget < 1:
        raise ConfigurationError("ray budget must be >= 1")
    parts = []
    for vm in sorted(valid_masks, key=lambda m: m.image_index):
        if not vm.patches:
            continue
        r, c, u, v, d = _patch_candidates(vm)
        parts.append((np.full(u.shape, vm.image_index), r, c, u, v, d))
    if not parts:
        raise EmptyBatchError("no valid masked patches")
    cam, row, col, u, v, depth = (np.concatenate(x) for x in zip(*parts))

    rng = np.random.default_rng(seed)
    supported = np.flatnonzero(~np.isnan(depth))
    bare = np.flatnonzero(np.isnan(depth))
    if len(supported) >= budget:
        chosen = rng.choice(supported, size=budget, replace=False)
    else:
        extra = min(budget - len(supported), len(bare))
        chosen = np.concatenate([supported, rng.choice(bare, size=extra, replace=False)])
    chosen = chosen[np.lexsort((u[chosen], v[chosen], cam[chosen]))]

    cam, row, col, u, v, depth = (x[chosen] for x in (cam, row, col, u, v, depth))
    pixels = np.stack([u, v], axis=1)
    origins = np.empty((len(cam), 3))
    view_dirs = np.empty((len(cam), 3))
    for i in np.unique(cam):
        sel = cam == i
        origins[sel] = cameras[i].center
        view_dirs[sel] = pixel_rays(cameras[i], pixels[sel].astype(np.float64))
    directions = view_dirs / np.linalg.norm(view_dirs, axis=1, keepdims=True)
    return RayBatch(cam, pixels, np.stack([row, col], axis=1), origins, directions, view_dirs, depth)


def anchor_depths(D, depth_range, n_rays=1, jitter=False, rng=None):
    a, b = depth_range
    if D < 1 or not a < b:
        raise ConfigurationError("need D >= 1 and a < b")
    step = (b - a) / D
    j = np.arange(D, dtype=np.float64)
    if jitter:
        rng = np.random.default_rng() if rng is None else rng
        offsets = rng.uniform(0.0, 1.0, size=(n_rays, D))
        return a + (j + offsets) * step
    return np.broadcast_to(a + (j + 0.5) * step, (n_rays, D)).copy()


def sample_anchors(batch: RayBatch, D=DEFAULT_ANCHORS_PER_RAY, depth_range=(0.0, 50.0),
                   jitter=False, rng=None) -> AnchorSet:
    """Mid-bin view depths over ``depth_range``, unprojected along each ray."""
    depths = anchor_depths(D, depth_range, len(batch), jitter, rng)
    if np.any(depths <= 0):
        depths = np.maximum(depths, 1e-6)
    positions = batch.origins[:, None, :] + batch.view_dirs[:, None, :] * depths[..., None]
    return AnchorSet(positions, depths)
