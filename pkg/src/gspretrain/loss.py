"""Reconstruction targets and the weighted L1 pre-training objective."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLossError
from .render import RenderOutput
from .voxel import TargetVoxels


@dataclass
class LossWeights:
    rgb: float = 10.0
    depth: float = 1.0
    occupancy: float = 10.0

    def __post_init__(self):
        if min(self.rgb, self.depth, self.occupancy) < 0:
            raise ValueError("loss weights must be non-negative")

    def scaled(self, k):
        return LossWeights(self.rgb * k, self.depth * k, self.occupancy * k)


@dataclass
class ReconTargets:
    colors: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,), NaN where no LiDAR point supports the pixel
    occupancy: np.ndarray  # (M,) in {0, 1}

    @property
    def has_depth(self):
        return ~np.isnan(self.depth)


def build_targets(images, batch, targets: TargetVoxels, occupancy) -> ReconTargets:
    """Colours from the source images, LiDAR depths from the ray batch, voxel occupancy.

    ``images`` are (H, W, 3) floats in [0, 1], one per camera; ``occupancy`` is
    the boolean grid from ``synth.voxelize_occupancy``.
    """
    colors = np.empty((len(batch), 3))
    for i, img in enumerate(images):
        sel = batch.camera_index == i
        if np.any(sel):
            px = batch.pixels[sel]
            colors[sel] = img[px[:, 1], px[:, 0]]
    occ = np.asarray(occupancy).ravel()[targets.flat_index].astype(np.float64)
    return ReconTargets(colors, batch.depth.astype(np.float64), occ)


def total_loss(out: RenderOutput, tgt: ReconTargets, w: LossWeights):
    """L = lam_rgb mean|C - C^| + lam_depth mean|D - D^| + lam_occ mean|O - O^|.

    Colour residuals are averaged over the three channels; the depth mean runs
    over depth-supported rays only. A term with nothing to average is 0.
    Returns ``(L, breakdown)``.
    """
    n_rays = len(tgt.colors)
    has_d = tgt.has_depth
    n_depth = int(has_d.sum())
    n_vox = len(tgt.occupancy)

    rgb = np.abs(out.rgb - tgt.colors).mean(axis=1).sum() / n_rays if n_rays else 0.0
    depth = np.abs(out.depth[has_d] - tgt.depth[has_d]).sum() / n_depth if n_depth else 0.0
    occ = np.abs(out.occupancy - tgt.occupancy).sum() / n_vox if n_vox else 0.0
    terms = {
        "L_rgb": w.rgb * float(rgb),
        "L_depth": w.depth * float(depth),
        "L_occ": w.occupancy * float(occ),
    }
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss term {name}", term=name)
    total = terms["L_rgb"] + terms["L_depth"] + terms["L_occ"]
    return total, {"L": total, **terms}


def loss_backward(out: RenderOutput, tgt: ReconTargets, w: LossWeights):
    """Subgradient sign(pred - target) (0 at exact ties), scaled per term.

    Returns ``(grad_rgb (R, 3), grad_depth (R,), grad_occ (M,))``.
    """
    n_rays = len(tgt.colors)
    has_d = tgt.has_depth
    n_depth = int(has_d.sum())
    n_vox = len(tgt.occupancy)
    g_rgb = np.zeros_like(out.rgb, dtype=np.float64)
    g_depth = np.zeros_like(out.depth, dtype=np.float64)
    g_occ = np.zeros_like(out.occupancy, dtype=np.float64)
    if n_rays:
        g_rgb = np.sign(out.rgb - tgt.colors) * (w.rgb / (3.0 * n_rays))
    if n_depth:
        g_depth[has_d] = np.sign(out.depth[has_d] - tgt.depth[has_d]) * (w.depth / n_depth)
    if n_vox:
        g_occ = np.sign(out.occupancy - tgt.occupancy) * (w.occupancy / n_vox)
    return g_rgb, g_depth, g_occ


class MetricsLog:
    """Append-only JSONL log of per-step loss breakdowns."""

    KEYS = ("step", "L", "L_rgb", "L_depth", "L_occ")

    def __init__(self, path):
        self.path = path

    def append(self, step, breakdown):
        row = {"step": int(step), **{k: float(breakdown[k]) for k in self.KEYS[1:]}}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(row) + "\n")
