"""Procedural scenes with exact ground truth, plus a spinning-lidar simulator.

A scene is a convex road quad on the ground plane z = 0, a few axis-aligned
box obstacles, and posed camera / lidar sensors. Rendering ray-casts every
pixel against the ground and the boxes, so the dense road mask is exact by
construction; the lidar simulator casts one ray per (beam, azimuth) pair
and labels ground hits inside the road polygon as road. Together these
supply image datasets where both the dense 2D annotation and the projected
sparse annotation are known without any manual labeling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import datastore
from .geometry import (
    CameraIntrinsics,
    LabeledPointCloud,
    RigidTransform,
    camera_pose,
    compose,
    inverse,
    lidar_pose,
    project_cloud,
)
from .maskgen import NoiseConfig, build_sparse_gt, densify, save_mask_png
from .plyio import save_ply

_RAY_EPS = 1e-9

# Hit kinds produced by the ray caster.
_MISS = -1
_GROUND = 0  # boxes are 1 + box index


@dataclass(frozen=True)
class Box:
    """Axis-aligned obstacle: minimum corner, edge lengths, surface color."""

    min_corner: np.ndarray
    size: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        mc = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        sz = np.asarray(self.size, dtype=np.float64).reshape(3)
        col = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.any(sz <= 0):
            raise ValueError(f"box size must be positive, got {sz}")
        for arr in (mc, sz, col):
            arr.flags.writeable = False
        object.__setattr__(self, "min_corner", mc)
        object.__setattr__(self, "size", sz)
        object.__setattr__(self, "color", col)

    @property
    def max_corner(self) -> np.ndarray:
        return self.min_corner + self.size

    def contains(self, point: np.ndarray) -> bool:
        p = np.asarray(point)
        return bool(np.all(p >= self.min_corner) and np.all(p <= self.max_corner))


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to reproduce one synthetic world exactly."""

    road_polygon: np.ndarray  # (4, 2) convex quad on z = 0, meters
    boxes: tuple[Box, ...]
    road_color: np.ndarray
    ground_color: np.ndarray
    sky_color: np.ndarray
    noise_amplitude: float
    camera_pose: RigidTransform  # world -> camera
    lidar_pose: RigidTransform  # world -> lidar
    seed: int

    def __post_init__(self):
        poly = np.asarray(self.road_polygon, dtype=np.float64).reshape(4, 2)
        area = _shoelace_area(poly)
        if abs(area) < 1e-9:
            raise ValueError("road polygon is degenerate (zero area)")
        if area < 0:
            poly = poly[::-1].copy()  # normalize to CCW winding
        poly.flags.writeable = False
        object.__setattr__(self, "road_polygon", poly)
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for name in ("road_color", "ground_color", "sky_color"):
            col = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            col.flags.writeable = False
            object.__setattr__(self, name, col)
        cam_origin = sensor_origin(self.camera_pose)
        if cam_origin[2] <= 0:
            raise ValueError(f"camera must sit above the ground, got height {cam_origin[2]}")
        for box in self.boxes:
            if box.contains(cam_origin):
                raise ValueError("an obstacle box contains the camera origin")


@dataclass(frozen=True)
class LidarSpec:
    """Beam elevations (radians, strictly increasing), azimuth step, max range."""

    elevations: np.ndarray = field(
        default_factory=lambda: np.deg2rad(np.linspace(-15.0, -1.0, 16))
    )
    azimuth_step: float = math.radians(0.5)
    max_range: float = 60.0

    def __post_init__(self):
        el = np.asarray(self.elevations, dtype=np.float64).reshape(-1)
        if el.size and np.any(np.diff(el) <= 0):
            raise ValueError("beam elevations must be strictly increasing")
        if self.azimuth_step <= 0:
            raise ValueError("azimuth step must be positive")
        if self.max_range <= 0:
            raise ValueError("max range must be positive")
        el.flags.writeable = False
        object.__setattr__(self, "elevations", el)


def sensor_origin(pose: RigidTransform) -> np.ndarray:
    """World position of a sensor given its world -> sensor transform."""
    return -pose.rotation.T @ pose.translation


def _shoelace_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def points_in_quad(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Boolean mask: which (N, 2) points lie inside the CCW convex quad."""
    inside = np.ones(len(pts), dtype=bool)
    for i in range(4):
        a = poly[i]
        b = poly[(i + 1) % 4]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross >= -1e-9
    return inside


def _raycast(origin: np.ndarray, dirs: np.ndarray, scene: SceneSpec,
             max_range: Optional[float] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-hit ray cast against ground plane and boxes.

    Returns (t, kind, road): ray parameters, hit kinds (_MISS/_GROUND/box
    index + 1), and the road flag for ground hits inside the road polygon.
    """
    n = len(dirs)
    t_best = np.full(n, np.inf)
    kind = np.full(n, _MISS, dtype=np.int32)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = -origin[2] / dz
    ok = np.isfinite(t_ground) & (t_ground > _RAY_EPS)
    t_best[ok] = t_ground[ok]
    kind[ok] = _GROUND

    for bi, box in enumerate(scene.boxes):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (box.min_corner - origin) / dirs
            t2 = (box.max_corner - origin) / dirs
        near = np.nanmax(np.minimum(t1, t2), axis=1)
        far = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (near <= far) & (far > _RAY_EPS)
        t_hit = np.where(near > _RAY_EPS, near, far)
        closer = hit & (t_hit < t_best)
        t_best[closer] = t_hit[closer]
        kind[closer] = bi + 1

    if max_range is not None:
        out = t_best > max_range
        kind[out] = _MISS
        t_best[out] = np.inf

    road = np.zeros(n, dtype=bool)
    ground = kind == _GROUND
    if np.any(ground):
        pts = origin[None, :2] + t_best[ground, None] * dirs[ground, :2]
        road[ground] = points_in_quad(scene.road_polygon, pts)
    return t_best, kind, road


def render(scene: SceneSpec, cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast the scene through the camera.

    Returns the (H, W, 3) image in [0, 1] (surface colors plus seeded
    per-pixel noise) and the exact (H, W) dense road mask: 1 where the
    nearest hit is ground inside the road polygon.
    """
    h, w = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack(
        [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1
    ).reshape(-1, 3)
    rot = scene.camera_pose.rotation
    origin = sensor_origin(scene.camera_pose)
    dirs = dirs_cam @ rot  # rows become R^T @ dir_cam, i.e. world directions

    _, kind, road = _raycast(origin, dirs, scene)
    image = np.empty((h * w, 3), dtype=np.float64)
    image[:] = scene.sky_color
    image[kind == _GROUND] = scene.ground_color
    image[(kind == _GROUND) & road] = scene.road_color
    for bi, box in enumerate(scene.boxes):
        image[kind == bi + 1] = box.color

    rng = np.random.default_rng([scene.seed, 1])
    image += rng.uniform(-scene.noise_amplitude, scene.noise_amplitude, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    dense_gt = ((kind == _GROUND) & road).astype(np.uint8)
    return image.reshape(h, w, 3), dense_gt.reshape(h, w)


def scan(scene: SceneSpec, lidar: LidarSpec) -> LabeledPointCloud:
    """Simulate one full spin: one ray per (beam, azimuth).

    Points are returned in the lidar frame in (beam-major, azimuth-minor)
    order; rays that miss everything within max range produce no point.
    """
    azimuths = np.arange(0.0, 2.0 * math.pi, lidar.azimuth_step)
    n_el = len(lidar.elevations)
    if n_el == 0 or len(azimuths) == 0:
        return LabeledPointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))
    el = np.repeat(lidar.elevations, len(azimuths))
    az = np.tile(azimuths, n_el)
    dirs_lidar = np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1
    )
    rot = scene.lidar_pose.rotation
    origin = sensor_origin(scene.lidar_pose)
    dirs = dirs_lidar @ rot

    t, kind, road = _raycast(origin, dirs, scene, max_range=lidar.max_range)
    hit = kind != _MISS
    pts_world = origin + t[hit, None] * dirs[hit]
    pts_lidar = scene.lidar_pose.apply(pts_world)
    labels = road[hit].astype(np.uint8)
    return LabeledPointCloud(pts_lidar, labels)


@dataclass(frozen=True)
class VariationConfig:
    """Sampling ranges for procedural scene generation (all uniform)."""

    road_near_x: tuple[float, float] = (2.4, 2.7)
    road_far_x: tuple[float, float] = (18.0, 25.5)
    half_width_near: tuple[float, float] = (5.0, 8.0)
    half_width_far: tuple[float, float] = (3.5, 6.5)
    center_shift: tuple[float, float] = (-1.5, 1.5)
    max_boxes: int = 3
    box_height: tuple[float, float] = (1.7, 2.2)
    box_width: tuple[float, float] = (0.6, 1.6)
    box_x: tuple[float, float] = (6.5, 18.0)
    box_y: tuple[float, float] = (-6.0, 6.0)
    camera_height: tuple[float, float] = (1.35, 1.5)
    camera_y: tuple[float, float] = (-0.4, 0.4)
    camera_yaw_deg: tuple[float, float] = (-3.0, 3.0)
    camera_pitch_deg: tuple[float, float] = (0.0, 0.6)
    lidar_height: tuple[float, float] = (1.45, 1.6)
    lidar_x: tuple[float, float] = (-0.3, 0.0)
    noise_amplitude: tuple[float, float] = (0.05, 0.11)
    road_gray: tuple[float, float] = (0.24, 0.34)
    ground_green: tuple[float, float] = (0.36, 0.50)


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def sample_scene(rng: np.random.Generator, var: VariationConfig = VariationConfig()) -> SceneSpec:
    """Draw one scene; every quantity comes from ``rng`` in a fixed order."""
    x0 = _uniform(rng, var.road_near_x)
    x1 = _uniform(rng, var.road_far_x)
    w0 = _uniform(rng, var.half_width_near)
    w1 = _uniform(rng, var.half_width_far)
    s0 = _uniform(rng, var.center_shift)
    s1 = _uniform(rng, var.center_shift)
    poly = np.array(
        [[x0, s0 - w0], [x1, s1 - w1], [x1, s1 + w1], [x0, s0 + w0]]
    )

    boxes = []
    for _ in range(int(rng.integers(0, var.max_boxes + 1))):
        bw = _uniform(rng, var.box_width)
        bd = _uniform(rng, var.box_width)
        bh = _uniform(rng, var.box_height)
        bx = _uniform(rng, var.box_x)
        by = _uniform(rng, var.box_y)
        color = rng.uniform(0.15, 0.95, size=3)
        while color.max() - color.min() < 0.25:  # keep boxes visually distinct
            color = rng.uniform(0.15, 0.95, size=3)
        boxes.append(Box(min_corner=(bx - bw / 2, by - bd / 2, 0.0), size=(bw, bd, bh), color=color))

    gray = _uniform(rng, var.road_gray)
    road_color = np.array([gray, gray + 0.01, gray + 0.03])
    green = _uniform(rng, var.ground_green)
    ground_color = np.array([green * 0.8, green, green * 0.55])
    sky = 0.62 + 0.08 * rng.random()
    sky_color = np.array([sky * 0.82, sky * 0.92, sky])

    cam_h = _uniform(rng, var.camera_height)
    cam_y = _uniform(rng, var.camera_y)
    yaw = math.radians(_uniform(rng, var.camera_yaw_deg))
    pitch = math.radians(_uniform(rng, var.camera_pitch_deg))
    lid_h = _uniform(rng, var.lidar_height)
    lid_x = _uniform(rng, var.lidar_x)
    noise_amp = _uniform(rng, var.noise_amplitude)
    seed = int(rng.integers(0, 2**63 - 1))

    return SceneSpec(
        road_polygon=poly,
        boxes=tuple(boxes),
        road_color=road_color,
        ground_color=ground_color,
        sky_color=sky_color,
        noise_amplitude=noise_amp,
        camera_pose=camera_pose((0.0, cam_y, cam_h), yaw=yaw, pitch_down=pitch),
        lidar_pose=lidar_pose((lid_x, cam_y, lid_h), yaw=yaw),
        seed=seed,
    )


def default_intrinsics(size: int = 64) -> CameraIntrinsics:
    """Square pinhole camera; principal point at the exact image center."""
    return CameraIntrinsics(
        fx=1.1 * size, fy=1.1 * size, cx=(size - 1) / 2, cy=(size - 1) / 2,
        width=size, height=size,
    )


def lidar_preset(name: str) -> LidarSpec:
    """Named beam layouts: a 16-beam unit, a dense 64-beam unit, and two
    interleaved 32-beam units."""
    if name == "dense16":
        return LidarSpec()
    if name == "dense64":
        return LidarSpec(elevations=np.deg2rad(np.linspace(-15.0, -1.0, 64)))
    if name == "dual32":
        a = np.deg2rad(np.linspace(-15.0, -1.0, 32))
        b = np.deg2rad(np.linspace(-14.78, -0.78, 32))
        return LidarSpec(elevations=np.unique(np.concatenate([a, b])))
    raise ValueError(f"unknown lidar preset '{name}' (expected dense16, dense64 or dual32)")


def generate_dataset(
    n_scenes: int,
    variation: VariationConfig,
    cam: CameraIntrinsics,
    lidar: LidarSpec,
    out_dir,
    seed: int = 0,
    noise: NoiseConfig = NoiseConfig(),
    val_fraction: float = 0.15,
) -> Path:
    """Generate scenes and write the full on-disk dataset.

    Per frame: the rendered image, dense gt/valid PNGs, the labeled PLY
    cloud, and the sparse gt/valid PNGs obtained by projecting the cloud
    into the camera and adding upper-region noise points. Frames are
    assigned to train/val by a seeded permutation. Returns the path of the
    ``dataset.jsonl`` manifest (one dense and one sparse record per frame).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_val = int(round(val_fraction * n_scenes))
    split_rng = np.random.default_rng([seed, 2])
    val_idx = set(split_rng.permutation(n_scenes)[:n_val].tolist()) if n_scenes else set()

    records = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, 3, i])
        scene = sample_scene(rng, variation)
        image, dense_gt = render(scene, cam)
        cloud = scan(scene, lidar)
        t_cam_lidar = compose(scene.camera_pose, inverse(scene.lidar_pose))
        projected = project_cloud(cloud, cam, t_cam_lidar)
        frame_noise = NoiseConfig(
            density_ratio=noise.density_ratio,
            region_fraction=noise.region_fraction,
            seed=int(rng.integers(0, 2**63 - 1)),
        )
        sparse = build_sparse_gt(projected, (cam.height, cam.width), frame_noise)
        dense = densify(dense_gt)

        stem = f"{i:05d}"
        img_name = f"{stem}.png"
        Image.fromarray((image * 255.0).round().astype(np.uint8), mode="RGB").save(out_dir / img_name)
        save_ply(cloud, out_dir / f"{stem}.ply")
        save_mask_png(dense.labels, out_dir / f"{stem}_dense_gt.png")
        save_mask_png(dense.valid, out_dir / f"{stem}_dense_valid.png")
        save_mask_png(sparse.labels, out_dir / f"{stem}_sparse_gt.png")
        save_mask_png(sparse.valid, out_dir / f"{stem}_sparse_valid.png")

        split = datastore.SPLIT_VAL if i in val_idx else datastore.SPLIT_TRAIN
        for kind, prefix in ((datastore.KIND_DENSE, "dense"), (datastore.KIND_SPARSE, "sparse")):
            records.append(
                datastore.ManifestRecord(
                    image=img_name,
                    gt=f"{stem}_{prefix}_gt.png",
                    valid=f"{stem}_{prefix}_valid.png",
                    kind=kind,
                    split=split,
                    frame_id=stem,
                )
            )

    manifest_path = out_dir / datastore.MANIFEST_NAME
    datastore.write_manifest(records, manifest_path)
    return manifest_path
