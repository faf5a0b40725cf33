"""Dense voxel feature grids: trilinear sampling, lift-splat encoding, target voxels.

Feature arrays are laid out ``(C, Z, H, W)`` with ``H`` along world x, ``W``
along world y and ``Z`` along world z. Voxel membership uses half-open
intervals ``[min + i*size, min + (i+1)*size)``. Trilinear sampling treats the
stored features as values at the voxel centres and replicates the border
half-voxel.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, CorruptCheckpointError
from .geometry import Camera, unproject_pixels

# Eight lattice corners in (dz, dx, dy) order.
_CORNERS = np.array([[dz, dx, dy] for dz in (0, 1) for dx in (0, 1) for dy in (0, 1)])


@dataclass(frozen=True)
class GridGeometry:
    bounds: tuple  # (xmin, xmax, ymin, ymax, zmin, zmax)
    resolution: tuple  # (Z, H, W)

    def __post_init__(self):
        b = tuple(float(v) for v in self.bounds)
        r = tuple(int(v) for v in self.resolution)
        if len(b) != 6 or len(r) != 3:
            raise ConfigurationError("bounds need 6 values and resolution 3")
        if not (b[0] < b[1] and b[2] < b[3] and b[4] < b[5]):
            raise ConfigurationError("grid bounds need min < max on every axis")
        if min(r) < 1:
            raise ConfigurationError("grid resolution must be >= 1 per axis")
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "resolution", r)

    @classmethod
    def default(cls):
        # 80 m x 80 m x 6.4 m at 0.4 m voxels
        return cls((-40.0, 40.0, -40.0, 40.0, -1.0, 5.4), (16, 200, 200))

    @property
    def shape(self):
        return self.resolution

    @property
    def n_voxels(self):
        Z, H, W = self.resolution
        return Z * H * W

    @property
    def lower(self):
        """(x, y, z) minimum corner."""
        return np.array(self.bounds[0::2])

    @property
    def upper(self):
        return np.array(self.bounds[1::2])

    @property
    def counts_xyz(self):
        Z, H, W = self.resolution
        return np.array([H, W, Z])

    @property
    def voxel_size(self):
        """(sx, sy, sz) in metres."""
        return (self.upper - self.lower) / self.counts_xyz

    def contains(self, points):
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lower) & (p < self.upper), axis=-1)

    def voxel_index(self, points):
        """Integer (ix, iy, iz) per point and a half-open inside flag."""
        p = np.asarray(points, dtype=np.float64)
        idx = np.floor((p - self.lower) / self.voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < self.counts_xyz), axis=-1)
        return idx, inside

    def flat_index(self, ixyz):
        Z, H, W = self.resolution
        ixyz = np.asarray(ixyz)
        return (ixyz[..., 2] * H + ixyz[..., 0]) * W + ixyz[..., 1]

    def unflatten(self, flat):
        Z, H, W = self.resolution
        flat = np.asarray(flat)
        iz, rem = np.divmod(flat, H * W)
        ix, iy = np.divmod(rem, W)
        return np.stack([ix, iy, iz], axis=-1)

    def voxel_centers(self, ixyz):
        return self.lower + (np.asarray(ixyz, dtype=np.float64) + 0.5) * self.voxel_size

    def to_dict(self):
        return {"bounds": list(self.bounds), "resolution": list(self.resolution)}


@dataclass
class VoxelGrid:
    features: np.ndarray  # (C, Z, H, W)
    geometry: GridGeometry

    def __post_init__(self):
        if self.features.ndim != 4 or tuple(self.features.shape[1:]) != self.geometry.resolution:
            raise ConfigurationError(
                f"feature shape {self.features.shape} does not match resolution {self.geometry.resolution}"
            )

    @property
    def channels(self):
        return self.features.shape[0]

    def flat(self):
        """(n_voxels, C) view used for gathers."""
        return self.features.reshape(self.channels, -1).T


@dataclass(frozen=True)
class TrilinearWeights:
    corners: np.ndarray  # (N, 8) flat voxel index
    weights: np.ndarray  # (N, 8)
    dweights: np.ndarray  # (N, 8, 3) d(weight)/d(x, y, z)
    inside: np.ndarray  # (N,)


def trilinear_weights(geometry: GridGeometry, points) -> TrilinearWeights:
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(p)
    inside = geometry.contains(p)
    counts = geometry.counts_xyz
    size = geometry.voxel_size

    g = (p - geometry.lower) / size - 0.5
    lo_clamp = g < 0
    hi_clamp = g > counts - 1
    g = np.clip(g, 0, counts - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, np.maximum(counts - 2, 0))
    i1 = np.minimum(i0 + 1, counts - 1)
    t = g - i0
    dt = np.where(lo_clamp | hi_clamp, 0.0, 1.0 / size)
    # axis order (x, y, z) -> corner offsets in (dz, dx, dy)
    wx = np.stack([1 - t[:, 0], t[:, 0]], axis=1)
    wy = np.stack([1 - t[:, 1], t[:, 1]], axis=1)
    wz = np.stack([1 - t[:, 2], t[:, 2]], axis=1)
    dwx = np.stack([-dt[:, 0], dt[:, 0]], axis=1)
    dwy = np.stack([-dt[:, 1], dt[:, 1]], axis=1)
    dwz = np.stack([-dt[:, 2], dt[:, 2]], axis=1)

    cz, cx, cy = _CORNERS[:, 0], _CORNERS[:, 1], _CORNERS[:, 2]
    ix = np.where(cx == 0, i0[:, 0:1], i1[:, 0:1])
    iy = np.where(cy == 0, i0[:, 1:2], i1[:, 1:2])
    iz = np.where(cz == 0, i0[:, 2:3], i1[:, 2:3])
    Z, H, W = geometry.resolution
    corners = (iz * H + ix) * W + iy

    ax, ay, az = wx[:, cx], wy[:, cy], wz[:, cz]
    weights = ax * ay * az
    dweights = np.empty((n, 8, 3))
    dweights[..., 0] = dwx[:, cx] * ay * az
    dweights[..., 1] = ax * dwy[:, cy] * az
    dweights[..., 2] = ax * ay * dwz[:, cz]

    weights[~inside] = 0.0
    dweights[~inside] = 0.0
    corners[~inside] = 0
    return TrilinearWeights(corners, weights, dweights, inside)


def trilinear_sample(grid: VoxelGrid, points, tw: TrilinearWeights | None = None):
    """Sample (N, C) features; points outside the grid get zeros and ``inside`` False."""
    tw = trilinear_weights(grid.geometry, points) if tw is None else tw
    gathered = grid.flat()[tw.corners]  # (N, 8, C)
    feats = np.einsum("nk,nkc->nc", tw.weights, gathered)
    return feats, tw.inside


def trilinear_backward(grid: VoxelGrid, points, upstream, tw: TrilinearWeights | None = None):
    """Returns (dense grad on features (C, Z, H, W), grad on points (N, 3))."""
    tw = trilinear_weights(grid.geometry, points) if tw is None else tw
    upstream = np.atleast_2d(upstream)
    C = grid.channels
    contrib = tw.weights[..., None] * upstream[:, None, :]  # (N, 8, C)
    grad_flat = np.zeros((grid.geometry.n_voxels, C), dtype=np.result_type(contrib, np.float64))
    np.add.at(grad_flat, tw.corners.ravel(), contrib.reshape(-1, C))
    gathered = grid.flat()[tw.corners]
    dots = np.einsum("nkc,nc->nk", gathered, upstream)
    grad_x = np.einsum("nk,nkd->nd", dots, tw.dweights)
    return grad_flat.T.reshape(grid.features.shape), grad_x


@dataclass(frozen=True)
class LiftSplatCache:
    voxel: np.ndarray  # (n_cam, Db, P) flat voxel index, -1 outside
    counts: np.ndarray  # (n_voxels,)


def frustum_points(camera: Camera, feat_hw, depth_bins):
    """World points of every (bin, feature pixel) pair, shape (Db, P, 3)."""
    hf, wf = feat_hw
    if camera.width % wf or camera.height % hf:
        raise ConfigurationError("feature map must evenly divide the image")
    sx, sy = camera.width // wf, camera.height // hf
    fv, fu = np.mgrid[0:hf, 0:wf]
    pix = np.stack([(fu.ravel() + 0.5) * sx - 0.5, (fv.ravel() + 0.5) * sy - 0.5], axis=1)
    bins = np.asarray(depth_bins, dtype=np.float64)
    return unproject_pixels(camera, pix[None, :, :], bins[:, None])


def lift_splat_scatter(feature_images, depth_probs, cameras, geometry: GridGeometry, depth_bins):
    """Un-normalised splat: per-voxel sum of feature x probability and contribution counts.

    Contributions are accumulated camera by camera, bin by bin, pixel by pixel
    (row-major), in that fixed order.
    """
    if not (len(feature_images) == len(depth_probs) == len(cameras)):
        raise ConfigurationError("one feature image and depth distribution per camera")
    depth_bins = np.asarray(depth_bins, dtype=np.float64)
    C = feature_images[0].shape[0]
    sums = np.zeros((geometry.n_voxels, C))
    counts = np.zeros(geometry.n_voxels)
    voxels = []
    for feats, probs, cam in zip(feature_images, depth_probs, cameras):
        if feats.ndim != 3 or feats.shape[0] != C:
            raise ConfigurationError("feature images must be (C, Hf, Wf) with a shared C")
        if probs.shape != (len(depth_bins),) + feats.shape[1:]:
            raise ConfigurationError("depth distribution must be (Db, Hf, Wf)")
        pts = frustum_points(cam, feats.shape[1:], depth_bins)
        ixyz, inside = geometry.voxel_index(pts)
        vox = np.where(inside, geometry.flat_index(ixyz), -1)  # (Db, P)
        f = feats.reshape(C, -1).T  # (P, C)
        pr = probs.reshape(len(depth_bins), -1)  # (Db, P)
        contrib = f[None, :, :] * pr[:, :, None]  # (Db, P, C)
        sel = inside.ravel()
        np.add.at(sums, vox.ravel()[sel], contrib.reshape(-1, C)[sel])
        np.add.at(counts, vox.ravel()[sel], 1.0)
        voxels.append(vox)
    Z, H, W = geometry.resolution
    return sums.T.reshape(C, Z, H, W), counts.reshape(Z, H, W), LiftSplatCache(np.stack(voxels), counts)


def lift_splat_encode(feature_images, depth_probs, cameras, geometry: GridGeometry, depth_bins,
                      return_cache=False):
    """Count-normalised lift-splat into a :class:`VoxelGrid`."""
    for probs in depth_probs:
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=0), 1.0, atol=1e-6, rtol=0):
            raise ConfigurationError("depth distributions must be non-negative and sum to 1")
    sums, counts, cache = lift_splat_scatter(feature_images, depth_probs, cameras, geometry, depth_bins)
    grid = VoxelGrid(sums / np.maximum(counts, 1.0), geometry)
    return (grid, cache) if return_cache else grid


def lift_splat_backward(feature_images, depth_probs, cache: LiftSplatCache, grad_features):
    """Gradients of the normalised encoding w.r.t. feature images and depth probabilities."""
    C = grad_features.shape[0]
    g = (grad_features.reshape(C, -1) / np.maximum(cache.counts, 1.0)).T  # (n_voxels, C)
    g = np.vstack([g, np.zeros((1, C))])  # row -1 absorbs out-of-grid points
    grad_feats, grad_probs = [], []
    for k, (feats, probs) in enumerate(zip(feature_images, depth_probs)):
        gv = g[cache.voxel[k]]  # (Db, P, C)
        f = feats.reshape(C, -1).T
        pr = probs.reshape(probs.shape[0], -1)
        grad_feats.append(np.einsum("bp,bpc->cp", pr, gv).reshape(feats.shape))
        grad_probs.append(np.einsum("pc,bpc->bp", f, gv).reshape(probs.shape))
    return grad_feats, grad_probs


@dataclass(frozen=True)
class TargetVoxels:
    flat_index: np.ndarray  # (M,) ascending
    members: tuple  # M arrays of flat anchor indices, ascending
    anchor_voxel: np.ndarray  # (K,) target row per anchor, -1 outside the grid

    def __len__(self):
        return len(self.flat_index)


def extract_target_voxels(positions, geometry: GridGeometry) -> TargetVoxels:
    """Voxels holding at least one anchor; ``positions`` is (K, 3) or (N, D, 3)."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    ixyz, inside = geometry.voxel_index(p)
    flat = np.where(inside, geometry.flat_index(ixyz), -1)
    keep = np.flatnonzero(inside)
    order = keep[np.argsort(flat[keep], kind="stable")]
    uniq, start = np.unique(flat[order], return_index=True)
    members = tuple(np.split(order, start[1:])) if len(order) else ()
    row = np.full(len(p), -1, dtype=np.int64)
    row[order] = np.searchsorted(uniq, flat[order])
    return TargetVoxels(uniq, members, row)


GRID_MAGIC = b"GPVX"
_HEADER = struct.Struct("<4sI4I6d")


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    """Version 1 stores float32 features; version 2 stores float64."""
    version = 2 if grid.features.dtype == np.float64 else 1
    C, Z, H, W = grid.features.shape
    head = _HEADER.pack(GRID_MAGIC, version, C, Z, H, W, *grid.geometry.bounds)
    dtype = "<f8" if version == 2 else "<f4"
    return head + np.ascontiguousarray(grid.features, dtype=dtype).tobytes()


def grid_from_bytes(buf, offset=0):
    """Parse a grid segment; returns ``(grid, end_offset)``."""
    if len(buf) - offset < _HEADER.size:
        raise CorruptCheckpointError("truncated voxel grid header")
    magic, version, C, Z, H, W, *bounds = _HEADER.unpack_from(buf, offset)
    if magic != GRID_MAGIC:
        raise CorruptCheckpointError("bad voxel grid magic")
    if version not in (1, 2):
        raise CorruptCheckpointError(f"unsupported voxel grid version {version}")
    dtype = np.dtype("<f8" if version == 2 else "<f4")
    n = C * Z * H * W
    start = offset + _HEADER.size
    end = start + n * dtype.itemsize
    if len(buf) < end:
        raise CorruptCheckpointError("truncated voxel grid payload")
    feats = np.frombuffer(buf, dtype=dtype, count=n, offset=start).reshape(C, Z, H, W)
    feats = feats.astype(np.float64 if version == 2 else np.float32)
    geometry = GridGeometry(tuple(bounds), (Z, H, W))
    return VoxelGrid(feats, geometry), end
