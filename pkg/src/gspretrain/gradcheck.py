"""Finite-difference verification of every hand-written backward pass.

Each check draws a random double-precision case away from the kinks of the
function under test (ReLU hinges, lattice cell faces, L1 ties, max ties,
opacity clamps), builds the scalar ``sum(upstream * output)`` and compares
the analytic gradient against central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .decoder import Decoder, decode_all, decoder_backward
from .geometry import Camera
from .loss import LossWeights, ReconTargets, loss_backward, total_loss
from .optim import finite_difference_check
from .render import (
    RayContribs,
    RenderOutput,
    composite,
    composite_backward,
    occupancy_backward,
    reconstruct_occupancy,
    render_rays,
    render_rays_backward,
    splat_alpha_backward,
    splat_effective_alpha,
)
from .rays import AnchorSet
from .voxel import (
    GridGeometry,
    VoxelGrid,
    extract_target_voxels,
    lift_splat_backward,
    lift_splat_encode,
    trilinear_backward,
    trilinear_sample,
)

FD_EPS = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


def _max_err(f, x, analytic):
    rep = finite_difference_check(f, x, analytic, eps=FD_EPS)
    return np.inf if rep.non_finite else rep.max_rel_error


def _interior_points(geometry: GridGeometry, rng, n):
    """Points whose lattice coordinates stay KINK_MARGIN away from cell faces and the clamped border."""
    counts = geometry.counts_xyz
    pts = []
    while len(pts) < n:
        g = rng.uniform(0, counts - 1)
        frac = g - np.floor(g)
        if np.all((frac > KINK_MARGIN) & (frac < 1 - KINK_MARGIN)):
            pts.append(geometry.lower + (g + 0.5) * geometry.voxel_size)
    return np.array(pts)


def _small_geometry():
    return GridGeometry((-1.0, 1.0, -1.5, 1.5, 0.0, 1.0), (3, 4, 5))


def check_trilinear(rng):
    geom = _small_geometry()
    feats = rng.normal(size=(3, *geom.resolution))
    x = _interior_points(geom, rng, 4)
    up = rng.normal(size=(4, 3))
    grid = VoxelGrid(feats, geom)
    g_feat, g_x = trilinear_backward(grid, x, up)
    e1 = _max_err(lambda F: float(np.sum(up * trilinear_sample(VoxelGrid(F, geom), x)[0])), feats, g_feat)
    e2 = _max_err(lambda X: float(np.sum(up * trilinear_sample(grid, X)[0])), x, g_x)
    return max(e1, e2)


def _decoder_case(rng):
    geom = GridGeometry((-1.0, 1.0, -1.0, 1.0, 0.0, 1.0), (2, 3, 3))
    C = 3
    while True:
        dec = Decoder.init(C, (5, 5), seed=int(rng.integers(2**31)))
        feats = rng.normal(size=(C, *geom.resolution))
        x = _interior_points(geom, rng, 3)
        params, cache = decode_all(VoxelGrid(feats, geom), dec, x)
        pre = [
            cache.acts[name][i] @ head.weights[i] + head.biases[i]
            for name, head in dec.heads.items()
            for i in range(len(head.weights) - 1)
        ]
        raw_op = cache.raw["opacity"]
        if min(np.abs(p).min() for p in pre) > KINK_MARGIN and np.all(np.abs(raw_op) < 10):
            return geom, dec, feats, x


def check_decoder(rng):
    geom, dec, feats, x = _decoder_case(rng)
    K = len(x)
    up = {
        "c": rng.normal(size=(K, 3)), "o": rng.normal(size=K),
        "r": rng.normal(size=(K, 4)), "s": rng.normal(size=(K, 3)),
    }

    def scalar(d, F, X):
        p, _ = decode_all(VoxelGrid(F, geom), d, X)
        return float(np.sum(up["c"] * p.colors) + np.sum(up["o"] * p.opacities)
                     + np.sum(up["r"] * p.rotations) + np.sum(up["s"] * p.scales))

    grid = VoxelGrid(feats, geom)
    _, cache = decode_all(grid, dec, x)
    hg, g_feat, g_x = decoder_backward(grid, dec, cache, up["c"], up["o"], up["r"], up["s"], positions_grad=True)
    errs = [
        _max_err(lambda F: scalar(dec, F, x), feats, g_feat),
        _max_err(lambda X: scalar(dec, feats, X), x, g_x),
    ]
    flat = dec.params()
    for name, arr in flat.items():
        errs.append(_max_err(lambda _: scalar(dec, feats, x), arr, hg[name]))
    return max(errs)


def _contribs(rng, R=3, N=6):
    return RayContribs(
        rng.uniform(0, 1, size=(R, N, 3)),
        rng.uniform(0.05, 0.6, size=(R, N)),
        np.sort(rng.uniform(0.5, 20, size=(R, N)), axis=1),
    )


def _composite_check(rng, use_rgb, use_depth):
    c = _contribs(rng)
    g_rgb = rng.normal(size=(3, 3)) if use_rgb else np.zeros((3, 3))
    g_d = rng.normal(size=3) if use_depth else np.zeros(3)

    def scalar(col, a, d):
        rgb, depth, _, _ = composite(RayContribs(col, a, d))
        return float(np.sum(g_rgb * rgb) + np.sum(g_d * depth))

    tau = composite(c)[3]
    gc, ga, gd = composite_backward(c, tau, g_rgb, g_d)
    return max(
        _max_err(lambda col: scalar(col, c.alphas, c.depths), c.colors, gc),
        _max_err(lambda a: scalar(c.colors, a, c.depths), c.alphas, ga),
        _max_err(lambda d: scalar(c.colors, c.alphas, d), c.depths, gd),
    )


def check_composite_rgb(rng):
    return _composite_check(rng, True, False)


def check_composite_depth(rng):
    return _composite_check(rng, False, True)


def check_occupancy(rng):
    geom = _small_geometry()
    pos = rng.uniform(geom.lower, geom.upper, size=(24, 3))
    targets = extract_target_voxels(pos, geom)
    while True:
        op = rng.uniform(0.01, 0.99, size=len(pos))
        ok = all(
            len(m) == 1 or np.diff(np.sort(op[m]))[-1] > KINK_MARGIN for m in targets.members
        )
        if ok:
            break
    up = rng.normal(size=len(targets))
    occ, argmax = reconstruct_occupancy(op, targets)
    g = occupancy_backward(up, argmax, len(op))
    return _max_err(lambda o: float(np.sum(up * reconstruct_occupancy(o, targets)[0])), op, g)


def check_loss(rng):
    R, M = 5, 4

    def away(target, lo, hi, size):
        while True:
            pred = rng.uniform(lo, hi, size=size)
            if np.all(np.abs(pred - target) > KINK_MARGIN):
                return pred

    colors = rng.uniform(0, 1, size=(R, 3))
    depth = rng.uniform(1, 10, size=R)
    depth[rng.uniform(size=R) < 0.3] = np.nan
    occ = (rng.uniform(size=M) < 0.5).astype(float)
    tgt = ReconTargets(colors, depth, occ)
    rgb = away(colors, 0, 1, (R, 3))
    dep = away(np.nan_to_num(depth, nan=-1e9), 1, 10, R)
    o = away(occ, 0, 1, M)
    w = LossWeights(*rng.uniform(0.5, 10, size=3))

    def L(a, b, c):
        return total_loss(RenderOutput(a, b, np.ones(R), c), tgt, w)[0]

    out = RenderOutput(rgb, dep, np.ones(R), o)
    g_rgb, g_d, g_o = loss_backward(out, tgt, w)
    return max(
        _max_err(lambda a: L(a, dep, o), rgb, g_rgb),
        _max_err(lambda b: L(rgb, b, o), dep, g_d),
        _max_err(lambda c: L(rgb, dep, c), o, g_o),
    )


def _splat_case(rng):
    """Gaussians in front of a 32x32 camera, one query pixel near each projected mean.

    Cases where some Gaussian barely reaches every pixel are redrawn: their
    gradients sit at the round-off floor of central differences.
    """
    cam = Camera([[40.0, 0, 15.5], [0, 40.0, 15.5], [0, 0, 1]], np.eye(3), np.zeros(3), 32, 32)
    K = 4
    while True:
        means = np.column_stack([rng.uniform(-1, 1, K), rng.uniform(-1, 1, K), rng.uniform(3, 6, K)])
        op = rng.uniform(0.2, 0.9, K)
        q = rng.normal(size=(K, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        s = rng.uniform(0.1, 0.6, size=(K, 3))
        centers = means[:, :2] / means[:, 2:] * 40.0 + 15.5
        pix = centers + rng.normal(scale=2.0, size=(K, 2))
        alpha, _ = splat_effective_alpha(means, op, q, s, cam, pix)
        if np.all((alpha / op).max(axis=0) > 0.05):
            return cam, means, op, q, s, pix


def check_splat_alpha(rng):
    cam, means, op, q, s, pix = _splat_case(rng)
    up = rng.normal(size=(len(pix), len(means)))
    _, cache = splat_effective_alpha(means, op, q, s, cam, pix)
    g_o, g_r, g_s = splat_alpha_backward(cache, up)

    def scalar(o, r, sc):
        return float(np.sum(up * splat_effective_alpha(means, o, r, sc, cam, pix)[0]))

    return max(
        _max_err(lambda o: scalar(o, q, s), op, g_o),
        _max_err(lambda r: scalar(op, r, s), q, g_r),
        _max_err(lambda sc: scalar(op, q, sc), s, g_s),
    )


def check_lift_splat(rng):
    geom = GridGeometry((-2.0, 2.0, -2.0, 2.0, 0.0, 6.0), (3, 4, 4))
    cam = Camera([[4.0, 0, 3.5], [0, 4.0, 3.5], [0, 0, 1]], np.eye(3), np.zeros(3), 8, 8)
    bins = np.array([1.0, 2.5, 4.0, 5.5])
    feats = rng.normal(size=(2, 4, 4))
    probs = rng.dirichlet(np.ones(4), size=(4, 4)).transpose(2, 0, 1)
    grid, cache = lift_splat_encode([feats], [probs], [cam], geom, bins, return_cache=True)
    up = rng.normal(size=grid.features.shape)
    gf, gp = lift_splat_backward([feats], [probs], cache, up)

    def scalar(f, p):
        from .voxel import lift_splat_scatter

        sums, counts, _ = lift_splat_scatter([f], [p], [cam], geom, bins)
        return float(np.sum(up * sums / np.maximum(counts, 1.0)))

    return max(
        _max_err(lambda f: scalar(f, probs), feats, gf[0]),
        _max_err(lambda p: scalar(feats, p), probs, gp[0]),
    )


def check_pipeline(rng):
    """Loss of a tiny grid -> decoder -> ray-render chain against every parameter."""
    R, D = 2, 3
    while True:
        geom, dec, feats, _ = _decoder_case(rng)
        pos = _interior_points(geom, rng, R * D).reshape(R, D, 3)
        anchors = AnchorSet(pos, np.sort(rng.uniform(1, 10, size=(R, D)), axis=1))
        targets = extract_target_voxels(pos, geom)
        grid = VoxelGrid(feats, geom)
        params, cache = decode_all(grid, dec, anchors.flat_positions())
        pre = [
            cache.acts[n][i] @ h.weights[i] + h.biases[i]
            for n, h in dec.heads.items() for i in range(len(h.weights) - 1)
        ]
        op = params.opacities
        untied = all(len(m) == 1 or np.diff(np.sort(op[m]))[-1] > KINK_MARGIN for m in targets.members)
        if min(np.abs(p).min() for p in pre) > KINK_MARGIN and untied:
            break
    out, _ = render_rays(params, anchors, targets)

    def offset(x):
        return x + rng.choice([-1.0, 1.0], size=x.shape) * rng.uniform(0.01, 0.5, size=x.shape)

    tgt = ReconTargets(offset(out.rgb), offset(out.depth), offset(out.occupancy))
    w = LossWeights(*rng.uniform(0.5, 10, size=3))

    def L(F, d):
        p, _ = decode_all(VoxelGrid(F, geom), d, anchors.flat_positions())
        return total_loss(render_rays(p, anchors, targets)[0], tgt, w)[0]

    params, cache = decode_all(grid, dec, anchors.flat_positions())
    out, rcache = render_rays(params, anchors, targets)
    g_rgb, g_d, g_o = loss_backward(out, tgt, w)
    g_col, g_op = render_rays_backward(rcache, g_rgb, g_d, g_o)
    hg, g_feat, _ = decoder_backward(grid, dec, cache, g_col, g_op)
    errs = [_max_err(lambda F: L(F, dec), feats, g_feat)]
    for name, arr in dec.params().items():
        if name.startswith(("head.color", "head.opacity")):
            errs.append(_max_err(lambda _: L(feats, dec), arr, hg[name]))
    return max(errs)


# Not part of the default suite: slower, and built entirely from the ops above.
EXTRA_CHECKS = {"pipeline": check_pipeline}

CHECKS = {
    "trilinear": check_trilinear,
    "decoder_heads": check_decoder,
    "composite_rgb": check_composite_rgb,
    "composite_depth": check_composite_depth,
    "occupancy_max": check_occupancy,
    "loss": check_loss,
    "splat_alpha": check_splat_alpha,
    "lift_splat": check_lift_splat,
}


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def run_suite(cases=100, seed=0, names=None):
    results = []
    for k, name in enumerate(names or CHECKS):
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        check = CHECKS.get(name) or EXTRA_CHECKS[name]
        worst = max(check(rng) for _ in range(cases))
        results.append(CheckResult(name, cases, float(worst), time.perf_counter() - t0))
    return results
