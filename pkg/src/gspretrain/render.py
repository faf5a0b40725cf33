"""Differentiable compositing of colour, depth and occupancy from decoded anchors.

Two modes share the same front-to-back compositor:

``ray``
    each ray composites its own anchors with alpha equal to the decoded
    opacity (the anchors sit on the ray, so the footprint at the pixel is 1);
``splat``
    each ray pixel composites every anchor cast from its patch, with alpha
    modulated by the projected 2D Gaussian footprint, which gives rotation
    and scale a gradient path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GSPretrainError, NumericError
from .geometry import Camera, project_points, projection_jacobians, quaternion_matrix, quaternion_matrix_backward
from .voxel import TargetVoxels

SIGMA_EPS = 1e-6  # px^2 added to the screen-space covariance


@dataclass
class RayContribs:
    colors: np.ndarray  # (R, N, 3)
    alphas: np.ndarray  # (R, N)
    depths: np.ndarray  # (R, N)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    acc: np.ndarray  # (R,) accumulated opacity sum(alpha * tau)
    occupancy: np.ndarray  # (M,)


def transmittance(alphas):
    """Exclusive product prod_{j<i} (1 - alpha_j) along the last axis."""
    a = np.asarray(alphas, dtype=np.float64)
    tau = np.ones_like(a)
    if a.shape[-1] > 1:
        tau[..., 1:] = np.cumprod(1.0 - a[..., :-1], axis=-1)
    return tau


def composite(contribs: RayContribs):
    """Returns ``(rgb, depth, acc, tau)``."""
    tau = transmittance(contribs.alphas)
    w = contribs.alphas * tau
    rgb = np.einsum("rn,rnc->rc", w, contribs.colors)
    depth = np.sum(w * contribs.depths, axis=-1)
    return rgb, depth, w.sum(axis=-1), tau


def composite_rgb(contribs: RayContribs):
    return composite(contribs)[0]


def composite_depth(contribs: RayContribs):
    return composite(contribs)[1]


def composite_backward(contribs: RayContribs, tau, grad_rgb=None, grad_depth=None):
    """Analytic gradients of colour/depth compositing.

    d rgb / d c_i = alpha_i tau_i and
    d rgb / d alpha_i = c_i tau_i - sum_{k>i} c_k alpha_k tau_k / (1 - alpha_i),
    likewise for depth. Returns ``(grad_colors, grad_alphas, grad_depths)``.
    """
    a = contribs.alphas
    w = a * tau
    R = a.shape[0]
    grad_rgb = np.zeros((R, 3)) if grad_rgb is None else grad_rgb
    grad_depth = np.zeros(R) if grad_depth is None else grad_depth
    grad_colors = w[..., None] * grad_rgb[:, None, :]
    grad_depths = w * grad_depth[:, None]
    s = np.einsum("rnc,rc->rn", contribs.colors, grad_rgb) + contribs.depths * grad_depth[:, None]
    sw = s * w
    behind = np.cumsum(sw[..., ::-1], axis=-1)[..., ::-1] - sw  # sum over k > i
    grad_alphas = tau * s - behind / (1.0 - a)
    return grad_colors, grad_alphas, grad_depths


def reconstruct_occupancy(opacities, targets: TargetVoxels):
    """Per target voxel, the maximum member opacity.

    Returns ``(occupancy (M,), argmax (M,))``; ties go to the lowest anchor index.
    """
    op = np.asarray(opacities, dtype=np.float64).ravel()
    M = len(targets)
    if M == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    rows = targets.anchor_voxel
    idx = np.flatnonzero(rows >= 0)
    if len(np.unique(rows[idx])) != M:
        raise GSPretrainError("target voxel without member anchors")
    order = idx[np.lexsort((idx, -op[idx], rows[idx]))]
    first = np.flatnonzero(np.r_[True, rows[order][1:] != rows[order][:-1]])
    argmax = order[first]
    return op[argmax], argmax


def occupancy_backward(grad_occ, argmax, n_anchors):
    g = np.zeros(n_anchors)
    g[argmax] = grad_occ
    return g


@dataclass
class SplatCache:
    opacities: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    R: np.ndarray  # (K, 3, 3)
    J: np.ndarray  # (K, 2, 3)
    Ainv: np.ndarray  # (K, 2, 2)
    delta: np.ndarray  # (P, K, 2)
    falloff: np.ndarray  # (P, K) exp(-q)
    alpha: np.ndarray  # (P, K)


def splat_effective_alpha(means, opacities, rotations, scales, camera: Camera, pixels):
    """alpha_eff[p, k] = opacity_k * exp(-0.5 d^T (Sigma'_k + eps I)^-1 d), d = pixel_p - centre_k.

    Rotations are used through the polynomial quaternion matrix, which is a
    rotation only for unit quaternions (what the decoder emits).
    Returns ``(alpha (P, K), SplatCache)``.
    """
    means = np.atleast_2d(means)
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    opacities = np.asarray(opacities, dtype=np.float64).ravel()
    R = quaternion_matrix(rotations)
    M = R * np.asarray(scales, dtype=np.float64)[:, None, :]
    sigma = M @ np.swapaxes(M, 1, 2)
    J = projection_jacobians(camera, means)
    cov2 = J @ sigma @ np.swapaxes(J, 1, 2)
    a = cov2[:, 0, 0] + SIGMA_EPS
    b = 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0])
    d = cov2[:, 1, 1] + SIGMA_EPS
    det = a * d - b * b
    if np.any(~np.isfinite(det)) or np.any(det <= 0):
        raise NumericError("screen-space covariance is not invertible")
    Ainv = np.stack([np.stack([d, -b], -1), np.stack([-b, a], -1)], -2) / det[:, None, None]
    centre = project_points(camera, means)[0]
    delta = pixels[:, None, :] - centre[None, :, :]
    q = 0.5 * np.einsum("pki,kij,pkj->pk", delta, Ainv, delta)
    falloff = np.exp(-q)
    alpha = opacities[None, :] * falloff
    cache = SplatCache(opacities, np.asarray(rotations, dtype=np.float64), np.asarray(scales, dtype=np.float64),
                       R, J, Ainv, delta, falloff, alpha)
    return alpha, cache


def splat_alpha_backward(cache: SplatCache, grad_alpha):
    """Gradients of effective alphas w.r.t. (opacity, rotation, scale)."""
    grad_op = np.sum(grad_alpha * cache.falloff, axis=0)
    gq = -grad_alpha * cache.alpha  # dL/dq
    g_ainv = 0.5 * np.einsum("pk,pki,pkj->kij", gq, cache.delta, cache.delta)
    g_cov = -cache.Ainv @ g_ainv @ cache.Ainv
    g_sigma = np.swapaxes(cache.J, 1, 2) @ g_cov @ cache.J
    g_sigma = 0.5 * (g_sigma + np.swapaxes(g_sigma, 1, 2))
    M = cache.R * cache.scales[:, None, :]
    g_M = 2.0 * g_sigma @ M
    g_R = g_M * cache.scales[:, None, :]
    g_s = np.sum(g_M * cache.R, axis=1)
    g_r = quaternion_matrix_backward(cache.rotations, g_R)
    return grad_op, g_r, g_s


# --- full render passes -----------------------------------------------------

@dataclass
class RayModeCache:
    contribs: RayContribs
    tau: np.ndarray
    argmax: np.ndarray
    live: np.ndarray


def live_opacities(params, eps):
    """Decoded opacities with out-of-grid anchors pinned to ``eps``."""
    return np.where(params.inside, params.opacities, eps)


def render_rays(params, anchors, targets: TargetVoxels, eps=1e-6):
    """RAY mode: composite each ray's own anchors in depth order."""
    R, D = anchors.n_rays, anchors.per_ray
    op = live_opacities(params, eps)
    contribs = RayContribs(params.colors.reshape(R, D, 3), op.reshape(R, D), anchors.depths)
    rgb, depth, acc, tau = composite(contribs)
    occ, argmax = reconstruct_occupancy(params.opacities, targets)
    return RenderOutput(rgb, depth, acc, occ), RayModeCache(contribs, tau, argmax, params.inside)


def render_rays_backward(cache: RayModeCache, grad_rgb, grad_depth, grad_occ):
    """Returns per-anchor ``(grad_colors (K, 3), grad_opacity (K,))``."""
    gc, ga, _ = composite_backward(cache.contribs, cache.tau, grad_rgb, grad_depth)
    K = ga.size
    grad_op = ga.reshape(-1) * cache.live + occupancy_backward(grad_occ, cache.argmax, K)
    return gc.reshape(K, 3), grad_op


@dataclass
class SplatGroup:
    rays: np.ndarray  # ray indices in the group
    anchors: np.ndarray  # flat anchor indices, sorted by view depth
    contribs: RayContribs
    tau: np.ndarray
    splat: SplatCache


@dataclass
class SplatModeCache:
    groups: list
    argmax: np.ndarray
    live: np.ndarray


def render_splat(params, anchors, batch, cameras, targets: TargetVoxels, eps=1e-6):
    """SPLAT mode: every ray composites all anchors cast from its (camera, patch)."""
    R, D = anchors.n_rays, anchors.per_ray
    op = live_opacities(params, eps)
    positions = anchors.flat_positions()
    depths = anchors.depths.ravel()
    rgb = np.zeros((R, 3))
    depth = np.zeros(R)
    acc = np.zeros(R)
    key = np.stack([batch.camera_index, batch.patches[:, 0], batch.patches[:, 1]], axis=1)
    _, group_of = np.unique(key, axis=0, return_inverse=True)
    group_of = group_of.ravel()
    groups = []
    for g in range(group_of.max() + 1):
        rays = np.flatnonzero(group_of == g)
        flat = (rays[:, None] * D + np.arange(D)[None, :]).ravel()
        flat = flat[np.argsort(depths[flat], kind="stable")]
        cam = cameras[int(batch.camera_index[rays[0]])]
        alpha, sc = splat_effective_alpha(
            positions[flat], op[flat], params.rotations[flat], params.scales[flat],
            cam, batch.pixels[rays].astype(np.float64),
        )
        n = len(rays)
        contribs = RayContribs(
            np.broadcast_to(params.colors[flat], (n, len(flat), 3)),
            alpha,
            np.broadcast_to(depths[flat], (n, len(flat))),
        )
        c_rgb, c_depth, c_acc, tau = composite(contribs)
        rgb[rays], depth[rays], acc[rays] = c_rgb, c_depth, c_acc
        groups.append(SplatGroup(rays, flat, contribs, tau, sc))
    occ, argmax = reconstruct_occupancy(params.opacities, targets)
    return RenderOutput(rgb, depth, acc, occ), SplatModeCache(groups, argmax, params.inside)


def render_splat_backward(cache: SplatModeCache, grad_rgb, grad_depth, grad_occ, n_anchors):
    """Returns per-anchor grads ``(colors, opacity, rotation, scale)``."""
    gc = np.zeros((n_anchors, 3))
    gop = np.zeros(n_anchors)
    gr = np.zeros((n_anchors, 4))
    gs = np.zeros((n_anchors, 3))
    for grp in cache.groups:
        g_col, g_alpha, _ = composite_backward(grp.contribs, grp.tau, grad_rgb[grp.rays], grad_depth[grp.rays])
        o, r, s = splat_alpha_backward(grp.splat, g_alpha)
        gc[grp.anchors] += g_col.sum(axis=0)
        gop[grp.anchors] += o
        gr[grp.anchors] += r
        gs[grp.anchors] += s
    gop = gop * cache.live + occupancy_backward(grad_occ, cache.argmax, n_anchors)
    return gc, gop, gr, gs
