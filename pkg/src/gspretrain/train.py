"""The pre-training loop: mask -> rays -> anchors -> encode -> decode -> render -> loss -> AdamW."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .decoder import HEAD_NAMES, OPACITY_EPS, Decoder, MlpHead, decode_all, decoder_backward
from .errors import EmptyBatchError, NonFiniteLossError
from .loss import ReconTargets, build_targets, loss_backward, total_loss
from .masking import generate_patch_mask, project_lidar, validate_mask
from .optim import ParamStore, adamw_step, grad_clip
from .rays import AnchorSet, RayBatch, sample_anchors, select_rays
from .render import RenderOutput, render_rays, render_rays_backward, render_splat, render_splat_backward
from .synth import Frame, generate_scene, load_scene, make_rig, voxelize_occupancy
from .voxel import (
    GridGeometry,
    TargetVoxels,
    VoxelGrid,
    extract_target_voxels,
    lift_splat_backward,
    lift_splat_encode,
)

log = logging.getLogger(__name__)

# Independent RNG streams, combined with the global seed.
STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_EVAL = 2


def load_frame(cfg: TrainConfig) -> Frame:
    if cfg.scene_path:
        scene, rig = load_scene(cfg.scene_path)
    else:
        scene, rig = generate_scene(cfg.scene_seed), None
    if rig is None:
        r = cfg.rig
        rig = make_rig(r.n_cameras, r.width, r.height, r.fov_deg, r.radius, r.cam_height,
                       r.lidar_origin, r.rings, r.elevation_deg, r.azimuth_steps, r.max_range)
    return Frame.build(scene, rig)


@dataclass
class FrameContext:
    """Per-frame quantities that never change during training."""

    frame: Frame
    geometry: GridGeometry
    projections: list
    occupancy: np.ndarray

    @classmethod
    def build(cls, cfg: TrainConfig, frame: Frame | None = None):
        frame = load_frame(cfg) if frame is None else frame
        geometry = GridGeometry(cfg.grid.bounds, cfg.grid.resolution)
        projections = [project_lidar(frame.cloud, cam) for cam in frame.rig.cameras]
        return cls(frame, geometry, projections, voxelize_occupancy(frame.cloud, geometry))

    @property
    def cameras(self):
        return self.frame.rig.cameras


def init_params(cfg: TrainConfig, ctx: FrameContext):
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng([cfg.seed, STREAM_INIT])
    decoder = Decoder.init(cfg.feature_dim, cfg.hidden, seed=int(rng.integers(2**63)), dtype=dtype)
    params = dict(decoder.params())
    C = cfg.feature_dim
    if cfg.encoder == "grid":
        s = cfg.grid_init_scale
        params["grid"] = rng.uniform(-s, s, size=(C, *cfg.grid.resolution)).astype(dtype)
    else:
        for i, cam in enumerate(ctx.cameras):
            hf, wf = cam.height // cfg.lss.stride, cam.width // cfg.lss.stride
            s = cfg.lss.init_scale
            params[f"lss.features.{i}"] = rng.uniform(-s, s, size=(C, hf, wf)).astype(dtype)
            params[f"lss.depth_logits.{i}"] = np.zeros((cfg.lss.depth_bins, hf, wf), dtype=dtype)
    return params


def decoder_from_params(params, cfg: TrainConfig):
    heads = {}
    n_layers = len(cfg.hidden) + 1
    for name in HEAD_NAMES:
        heads[name] = MlpHead(
            [params[f"head.{name}.W{i}"] for i in range(n_layers)],
            [params[f"head.{name}.b{i}"] for i in range(n_layers)],
        )
    return Decoder(heads)


def softmax(x, axis=0):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def lss_depth_bins(cfg: TrainConfig):
    a, b = cfg.mask.depth_range
    n = cfg.lss.depth_bins
    return a + (b - a) * (np.arange(n) + 0.5) / n


def encode(cfg: TrainConfig, params, ctx: FrameContext):
    """Voxel grid plus whatever the backward pass needs."""
    if cfg.encoder == "grid":
        return VoxelGrid(params["grid"], ctx.geometry), None
    n = len(ctx.cameras)
    feats = [np.asarray(params[f"lss.features.{i}"], dtype=np.float64) for i in range(n)]
    probs = [softmax(np.asarray(params[f"lss.depth_logits.{i}"], dtype=np.float64)) for i in range(n)]
    grid, cache = lift_splat_encode(feats, probs, ctx.cameras, ctx.geometry, lss_depth_bins(cfg), return_cache=True)
    return grid, (feats, probs, cache)


def encode_backward(cfg: TrainConfig, enc_cache, grad_features):
    if cfg.encoder == "grid":
        return {"grid": grad_features}
    feats, probs, cache = enc_cache
    g_feats, g_probs = lift_splat_backward(feats, probs, cache, grad_features)
    grads = {}
    for i, (gf, gp, p) in enumerate(zip(g_feats, g_probs, probs)):
        grads[f"lss.features.{i}"] = gf
        grads[f"lss.depth_logits.{i}"] = p * (gp - np.sum(gp * p, axis=0, keepdims=True))
    return grads


@dataclass
class Batch:
    valid_masks: list
    rays: RayBatch
    anchors: AnchorSet
    voxels: TargetVoxels
    targets: ReconTargets


def make_batch(cfg: TrainConfig, ctx: FrameContext, stream: int, index: int) -> Batch:
    """Masks, rays, anchors and targets for one step; raises EmptyBatchError."""
    valid = []
    for cam_i, cam in enumerate(ctx.cameras):
        pm = generate_patch_mask(cam.image_size, cfg.mask, image_index=cam_i,
                                 seed=[cfg.seed, stream, index, cam_i])
        valid.append(validate_mask(pm, ctx.projections[cam_i], cfg.mask))
    rays = select_rays(valid, ctx.cameras, cfg.ray_budget, seed=[cfg.seed, stream, index, 1_000_003])
    jitter_rng = np.random.default_rng([cfg.seed, stream, index, 1_000_033]) if cfg.jitter else None
    anchors = sample_anchors(rays, cfg.anchors_per_ray, cfg.mask.depth_range, cfg.jitter, jitter_rng)
    voxels = extract_target_voxels(anchors.positions, ctx.geometry)
    targets = build_targets(ctx.frame.images, rays, voxels, ctx.occupancy)
    return Batch(valid, rays, anchors, voxels, targets)


@dataclass
class StepResult:
    loss: float
    breakdown: dict
    output: RenderOutput
    grads: dict | None = None


def forward(cfg: TrainConfig, params, ctx: FrameContext, batch: Batch, grads=True) -> StepResult:
    grid, enc_cache = encode(cfg, params, ctx)
    decoder = decoder_from_params(params, cfg)
    gparams, dcache = decode_all(grid, decoder, batch.anchors.flat_positions(), OPACITY_EPS)
    if cfg.render_mode == "ray":
        out, rcache = render_rays(gparams, batch.anchors, batch.voxels, OPACITY_EPS)
    else:
        out, rcache = render_splat(gparams, batch.anchors, batch.rays, ctx.cameras, batch.voxels, OPACITY_EPS)
    loss, breakdown = total_loss(out, batch.targets, cfg.loss)
    if not grads:
        return StepResult(loss, breakdown, out)

    g_rgb, g_depth, g_occ = loss_backward(out, batch.targets, cfg.loss)
    K = len(gparams.opacities)
    if cfg.render_mode == "ray":
        g_col, g_op = render_rays_backward(rcache, g_rgb, g_depth, g_occ)
        g_rot = g_scale = None
    else:
        g_col, g_op, g_rot, g_scale = render_splat_backward(rcache, g_rgb, g_depth, g_occ, K)
    head_grads, g_feat, _ = decoder_backward(grid, decoder, dcache, g_col, g_op, g_rot, g_scale)
    all_grads = dict(head_grads)
    all_grads.update(encode_backward(cfg, enc_cache, g_feat))
    return StepResult(loss, breakdown, out, all_grads)


@dataclass
class TrainState:
    cfg: TrainConfig
    store: ParamStore
    step: int = 0  # data steps consumed, skipped ones included
    skipped: int = 0
    history: list = field(default_factory=list)


def init_state(cfg: TrainConfig, ctx: FrameContext) -> TrainState:
    return TrainState(cfg, ParamStore(init_params(cfg, ctx)))


def train_step(state: TrainState, ctx: FrameContext):
    """One optimisation step. Returns the loss breakdown, or None if the step was skipped."""
    cfg = state.cfg
    index = state.step
    state.step += 1
    try:
        batch = make_batch(cfg, ctx, STREAM_TRAIN, index)
    except EmptyBatchError:
        state.skipped += 1
        log.info("step %d skipped: no valid masked patches", index)
        return None
    try:
        res = forward(cfg, state.store.params, ctx, batch)
    except NonFiniteLossError as exc:
        log.error("step %d: non-finite %s; params finite: %s", index, exc.term,
                  {k: bool(np.all(np.isfinite(v))) for k, v in state.store.params.items()})
        raise
    grads, norm = grad_clip(res.grads, cfg.optim.max_grad_norm)
    adamw_step(state.store, grads, cfg.optim)
    row = {"step": index, **res.breakdown, "grad_norm": norm}
    state.history.append(row)
    return res.breakdown


def iou(pred, truth):
    pred = np.asarray(pred, bool)
    truth = np.asarray(truth, bool)
    union = np.count_nonzero(pred | truth)
    return 1.0 if union == 0 else np.count_nonzero(pred & truth) / union


def reconstruction_metrics(outputs, targets):
    """Masked-pixel RGB L1, depth L1 over LiDAR-supported rays, occupancy IoU at 0.5."""
    rgb_err, depth_err, pred_occ, true_occ = [], [], [], []
    for out, tgt in zip(outputs, targets):
        rgb_err.append(np.abs(out.rgb - tgt.colors).mean(axis=1))
        d = tgt.has_depth
        depth_err.append(np.abs(out.depth[d] - tgt.depth[d]))
        pred_occ.append(out.occupancy >= 0.5)
        true_occ.append(tgt.occupancy >= 0.5)
    rgb = np.concatenate(rgb_err)
    dep = np.concatenate(depth_err)
    return {
        "rgb_l1": float(rgb.mean()) if rgb.size else 0.0,
        "depth_l1": float(dep.mean()) if dep.size else 0.0,
        "occ_iou": float(iou(np.concatenate(pred_occ), np.concatenate(true_occ))),
    }


def evaluate(state: TrainState, ctx: FrameContext, n_batches=None):
    """Metrics on held-out masks drawn from the evaluation RNG stream."""
    cfg = state.cfg
    n_batches = cfg.eval_batches if n_batches is None else n_batches
    outs, tgts = [], []
    for k in range(n_batches):
        try:
            batch = make_batch(cfg, ctx, STREAM_EVAL, k)
        except EmptyBatchError:
            continue
        res = forward(cfg, state.store.params, ctx, batch, grads=False)
        outs.append(res.output)
        tgts.append(batch.targets)
    if not outs:
        raise EmptyBatchError("no evaluation batch had a valid masked patch")
    return reconstruction_metrics(outs, tgts)


def train(state: TrainState, ctx: FrameContext, steps=None, on_step=None):
    """Run until ``state.step`` reaches ``steps`` (default: the configured budget)."""
    steps = state.cfg.steps if steps is None else steps
    while state.step < steps:
        breakdown = train_step(state, ctx)
        if on_step is not None:
            on_step(state, breakdown)
    return state
