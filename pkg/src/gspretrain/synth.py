"""Procedural box-world scenes, a camera/LiDAR rig and exact reference renders."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, pixel_rays
from .masking import LidarCloud
from .voxel import GridGeometry

# Face order for per-face colours.
FACES = ("-x", "+x", "-y", "+y", "-z", "+z")


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    face_colors: np.ndarray | None = None  # (6, 3) in FACES order

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.face_colors is not None:
            self.face_colors = np.asarray(self.face_colors, dtype=np.float64).reshape(6, 3)
        if np.any(self.lo >= self.hi):
            raise ValueError("box needs lo < hi on every axis")

    def face_color_table(self):
        return np.tile(self.color, (6, 1)) if self.face_colors is None else self.face_colors

    def to_dict(self):
        d = {"type": "box", "min": self.lo.tolist(), "max": self.hi.tolist(), "color": self.color.tolist()}
        if self.face_colors is not None:
            d["face_colors"] = self.face_colors.tolist()
        return d


@dataclass
class GroundPlane:
    """Horizontal plane at height ``z``, clipped to the scene's x/y bounds."""

    z: float
    color: np.ndarray

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)

    def to_dict(self):
        return {"type": "plane", "z": float(self.z), "color": self.color.tolist()}


@dataclass
class Scene:
    boxes: list
    ground: GroundPlane | None
    background: np.ndarray
    bounds: tuple  # (xmin, xmax, ymin, ymax, zmin, zmax)
    seed: int = 0

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        self.bounds = tuple(float(b) for b in self.bounds)
        lo, hi = np.array(self.bounds[0::2]), np.array(self.bounds[1::2])
        for box in self.boxes:
            if np.any(box.lo < lo) or np.any(box.hi > hi):
                raise ValueError("primitive outside scene bounds")
            if np.any(box.face_color_table() < 0) or np.any(box.face_color_table() > 1):
                raise ValueError("albedo must lie in [0, 1]")


@dataclass
class SensorRig:
    cameras: list
    lidar_origin: np.ndarray
    elevations: np.ndarray  # radians, one per ring
    azimuths: np.ndarray  # radians
    max_range: float = 70.0

    def lidar_directions(self):
        el, az = np.meshgrid(self.elevations, self.azimuths, indexing="ij")
        return np.stack(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1
        ).reshape(-1, 3)

    def to_dict(self):
        return {
            "cameras": [c.to_dict() for c in self.cameras],
            "lidar_origin": np.asarray(self.lidar_origin).tolist(),
            "elevations": np.asarray(self.elevations).tolist(),
            "azimuths": np.asarray(self.azimuths).tolist(),
            "max_range": self.max_range,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [Camera.from_dict(c) for c in d["cameras"]],
            np.asarray(d["lidar_origin"], dtype=np.float64),
            np.asarray(d["elevations"], dtype=np.float64),
            np.asarray(d["azimuths"], dtype=np.float64),
            float(d["max_range"]),
        )


@dataclass
class Hits:
    t: np.ndarray  # (N,) ray parameter of the nearest hit, inf on miss
    albedo: np.ndarray  # (N, 3), background on miss
    hit: np.ndarray  # (N,)


def _slab(box: Box, o, d):
    """Entry/exit parameters and the face each one crosses, per ray."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (box.lo - o) * inv
        t2 = (box.hi - o) * inv
    # a ray parallel to a slab is inside it for all t or for none
    parallel = d == 0
    inside_slab = (o >= box.lo) & (o <= box.hi)
    tlo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    thi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    near_axis = np.argmax(tlo, axis=1)
    far_axis = np.argmin(thi, axis=1)
    rows = np.arange(len(o))
    tnear = tlo[rows, near_axis]
    tfar = thi[rows, far_axis]
    # entering across the min face when travelling in +axis, else the max face
    near_face = 2 * near_axis + (d[rows, near_axis] < 0)
    far_face = 2 * far_axis + (d[rows, far_axis] > 0)
    return tnear, tfar, near_face, far_face


def raycast(scene: Scene, origins, directions, t_min=1e-9) -> Hits:
    """Nearest positive hit for arbitrary (not necessarily unit) directions."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    o = np.broadcast_to(o, d.shape)
    n = len(d)
    best = np.full(n, np.inf)
    albedo = np.tile(scene.background, (n, 1))
    for box in scene.boxes:
        tnear, tfar, nf, ff = _slab(box, o, d)
        ok = (tnear <= tfar) & (tfar > t_min)
        t = np.where(tnear > t_min, tnear, tfar)
        face = np.where(tnear > t_min, nf, ff)
        closer = ok & (t < best)
        best[closer] = t[closer]
        albedo[closer] = box.face_color_table()[face[closer]]
    if scene.ground is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.ground.z - o[:, 2]) / d[:, 2]
        p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
        xmin, xmax, ymin, ymax = scene.bounds[:4]
        ok = (
            np.isfinite(t) & (t > t_min)
            & (p[:, 0] >= xmin) & (p[:, 0] <= xmax) & (p[:, 1] >= ymin) & (p[:, 1] <= ymax)
        )
        closer = ok & (t < best)
        best[closer] = t[closer]
        albedo[closer] = scene.ground.color
    return Hits(best, albedo, np.isfinite(best))


def raycast_scene(scene: Scene, origin, direction):
    """Single unit-direction ray; returns ``(distance, albedo)`` or ``None`` on a miss."""
    h = raycast(scene, np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)))
    if not h.hit[0]:
        return None
    return float(h.t[0]), h.albedo[0]


def render_reference(scene: Scene, camera: Camera):
    """Ground-truth (H, W, 3) image and (H, W) view-depth map (+inf where nothing is hit)."""
    v, u = np.mgrid[0:camera.height, 0:camera.width]
    pixels = np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)
    return render_pixels(scene, camera, pixels, (camera.height, camera.width))


def render_pixels(scene: Scene, camera: Camera, pixels, shape=None):
    """Colour and view depth at arbitrary continuous pixel coordinates."""
    dirs = pixel_rays(camera, pixels)  # unit view-space z, so t is the view depth
    h = raycast(scene, camera.center, dirs)
    rgb, depth = h.albedo, h.t
    if shape is not None:
        rgb, depth = rgb.reshape(*shape, 3), depth.reshape(shape)
    return rgb, depth


def simulate_lidar(scene: Scene, rig: SensorRig) -> LidarCloud:
    """One return per table ray that hits within ``max_range``."""
    dirs = rig.lidar_directions()
    h = raycast(scene, rig.lidar_origin, dirs)
    keep = h.hit & (h.t <= rig.max_range)
    return LidarCloud(rig.lidar_origin + dirs[keep] * h.t[keep, None])


def voxelize_occupancy(cloud, geometry: GridGeometry):
    """Boolean (Z, H, W) grid: True where a voxel holds at least one point."""
    pts = cloud.points if isinstance(cloud, LidarCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    occ = np.zeros(geometry.n_voxels, dtype=bool)
    if len(pts):
        ixyz, inside = geometry.voxel_index(pts)
        occ[geometry.flat_index(ixyz[inside])] = True
    return occ.reshape(geometry.resolution)


# --- generation -------------------------------------------------------------

@dataclass
class SceneSpec:
    """Knobs for :func:`generate_scene`."""

    half_extent: float = 8.0
    arena_radius: float = 6.4
    wall_thickness: float = 0.6
    wall_height: float = 2.4
    n_boxes: int = 5
    box_size: tuple = (0.8, 2.0)
    box_ring: tuple = (2.5, 5.0)
    z_range: tuple = (-0.4, 2.8)
    background: tuple = (0.0, 0.0, 0.0)


def _palette(rng, n):
    return rng.uniform(0.1, 0.9, size=(n, 3))


def generate_scene(seed=7, spec: SceneSpec | None = None) -> Scene:
    """A walled arena on a ground plane with a few free-standing boxes."""
    spec = SceneSpec() if spec is None else spec
    rng = np.random.default_rng(seed)
    e, r, th, h = spec.half_extent, spec.arena_radius, spec.wall_thickness, spec.wall_height
    z0 = 0.0
    boxes = []
    wall_cols = _palette(rng, 4)
    walls = [
        ((r, -r - th, z0), (r + th, r + th, h)),
        ((-r - th, -r - th, z0), (-r, r + th, h)),
        ((-r, r, z0), (r, r + th, h)),
        ((-r, -r - th, z0), (r, -r, h)),
    ]
    for (lo, hi), col in zip(walls, wall_cols):
        boxes.append(Box(lo, hi, col))
    angles = np.sort(rng.uniform(0, 2 * np.pi, spec.n_boxes))
    for ang in angles:
        size = rng.uniform(*spec.box_size, size=3)
        size[2] = min(size[2], spec.z_range[1] - z0 - 0.2)
        radius = rng.uniform(*spec.box_ring)
        c = np.array([radius * np.cos(ang), radius * np.sin(ang)])
        lo = np.array([c[0] - size[0] / 2, c[1] - size[1] / 2, z0])
        hi = np.array([c[0] + size[0] / 2, c[1] + size[1] / 2, z0 + size[2]])
        base = _palette(rng, 1)[0]
        faces = np.clip(base + rng.uniform(-0.1, 0.1, size=(6, 3)), 0, 1)
        boxes.append(Box(lo, hi, base, faces))
    ground = GroundPlane(z0, _palette(rng, 1)[0] * 0.6)
    bounds = (-e, e, -e, e, spec.z_range[0], spec.z_range[1])
    return Scene(boxes, ground, spec.background, bounds, seed)


def make_rig(n_cameras=6, width=64, height=64, fov_deg=90.0, radius=0.3, cam_height=1.2,
             lidar_origin=(0.0, 0.0, 1.6), rings=32, elevation_deg=(-40.0, 10.0),
             azimuth_steps=360, max_range=70.0) -> SensorRig:
    """Yaw-distributed cameras sharing intrinsics, plus a ring LiDAR."""
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    K = np.array([[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1]])
    cams = []
    for k in range(n_cameras):
        yaw = 2 * np.pi * k / n_cameras
        centre = (radius * np.cos(yaw), radius * np.sin(yaw), cam_height)
        cams.append(Camera.looking_along(K, centre, yaw, width, height))
    elev = np.deg2rad(np.linspace(elevation_deg[0], elevation_deg[1], rings))
    az = 2 * np.pi * np.arange(azimuth_steps) / azimuth_steps
    return SensorRig(cams, np.asarray(lidar_origin, dtype=np.float64), elev, az, max_range)


# --- JSON -------------------------------------------------------------------

def scene_to_dict(scene: Scene, rig: SensorRig | None = None):
    prims = [b.to_dict() for b in scene.boxes]
    if scene.ground is not None:
        prims.append(scene.ground.to_dict())
    d = {
        "seed": scene.seed,
        "bounds": list(scene.bounds),
        "primitives": prims,
        "background": scene.background.tolist(),
    }
    if rig is not None:
        d["rig"] = rig.to_dict()
    return d


def scene_from_dict(d):
    boxes, ground = [], None
    for p in d["primitives"]:
        if p["type"] == "box":
            boxes.append(Box(p["min"], p["max"], p["color"], p.get("face_colors")))
        elif p["type"] == "plane":
            ground = GroundPlane(p["z"], p["color"])
        else:
            raise ValueError(f"unknown primitive type {p['type']!r}")
    scene = Scene(boxes, ground, d["background"], tuple(d["bounds"]), int(d.get("seed", 0)))
    rig = SensorRig.from_dict(d["rig"]) if "rig" in d else None
    return scene, rig


def save_scene(path, scene, rig=None):
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene, rig), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene(path):
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


@dataclass
class Frame:
    """Everything the trainer needs from one synthetic frame."""

    scene: Scene
    rig: SensorRig
    images: list = field(default_factory=list)
    depths: list = field(default_factory=list)
    cloud: LidarCloud | None = None

    @classmethod
    def build(cls, scene, rig):
        images, depths = [], []
        for cam in rig.cameras:
            img, dep = render_reference(scene, cam)
            images.append(img)
            depths.append(dep)
        return cls(scene, rig, images, depths, simulate_lidar(scene, rig))
