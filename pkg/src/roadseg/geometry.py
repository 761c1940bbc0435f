"""Rigid transforms, pinhole projection, and lidar-to-image mapping.

Coordinate conventions used throughout:

  World frame:   right-handed, z up, ground plane at z = 0.
  Lidar frame:   right-handed, x forward (azimuth 0), z up.
  Camera frame:  +z forward along the optical axis, +x right, +y down
                 (standard pinhole). Pixel u indexes columns, v rows,
                 origin at the top-left corner.

A lidar-frame point p projects to the image through the rigid transform
T (lidar -> camera) followed by the intrinsics K:

    (u, v) = (fx * xc / zc + cx,  fy * yc / zc + cy)

with (xc, yc, zc) the camera-frame coordinates of p. Points with
zc <= Z_MIN are culled, continuous coordinates are rounded
half-away-from-zero to integer pixels, and out-of-bounds pixels are
dropped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

# Near-plane cull distance in meters; points closer than this to the image
# plane (or behind it) never produce a pixel.
Z_MIN = 0.1

ROAD = 1
NON_ROAD = 0

_ORTHO_TOL = 1e-6


def round_half_away(x):
    """Round to nearest integer with halves away from zero (0.5 -> 1, -0.5 -> -1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


@dataclass(frozen=True)
class Point3:
    """A point in meters in some named frame (the frame is tracked by context)."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"Point3 coordinates must be finite, got {(self.x, self.y, self.z)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class PixelCoord:
    """Integer pixel position: u is the column index, v the row index."""

    u: int
    v: int


@dataclass(frozen=True)
class RigidTransform:
    """Maps points from ``source_frame`` to ``target_frame``: x_t = R x_s + t."""

    rotation: np.ndarray
    translation: np.ndarray
    source_frame: str
    target_frame: str

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got shape {rot.shape}")
        if tr.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got shape {tr.shape}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(tr)):
            raise ValueError("rigid transform contains non-finite values")
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (max |R R^T - I| = {err:.3g})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation determinant must be +1, got {det:.9f}")
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls, frame: str) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), frame, frame)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Chain two transforms: the result maps b.source_frame to a.target_frame.

    Requires a.source_frame == b.target_frame, i.e. ``a`` picks up where
    ``b`` leaves off.
    """
    if a.source_frame != b.target_frame:
        raise ValueError(
            f"cannot compose: left transform expects frame '{a.source_frame}' "
            f"but right transform produces frame '{b.target_frame}'"
        )
    rot = a.rotation @ b.rotation
    # Re-orthonormalize via polar decomposition to stop drift under long chains.
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return RigidTransform(
        rotation=rot,
        translation=a.rotation @ b.translation + a.translation,
        source_frame=b.source_frame,
        target_frame=a.target_frame,
    )


def inverse(t: RigidTransform) -> RigidTransform:
    """The transform mapping target_frame back to source_frame."""
    rot = t.rotation.T
    return RigidTransform(
        rotation=rot,
        translation=-rot @ t.translation,
        source_frame=t.target_frame,
        target_frame=t.source_frame,
    )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside [0, width={self.width})")
        if not (0 <= self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside [0, height={self.height})")

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class LabeledPointCloud:
    """Lidar returns in the sensor frame, each tagged road / non-road.

    ``points`` is (N, 3) float64, ``labels`` is (N,) uint8 with 1 = road.
    """

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        lab = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(pts) != len(lab):
            raise ValueError(f"points ({len(pts)}) and labels ({len(lab)}) lengths differ")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        if lab.size and lab.max() > 1:
            raise ValueError("labels must be 0 (non-road) or 1 (road)")
        pts.flags.writeable = False
        lab.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.points)


def camera_frame_coords(points: np.ndarray, t: RigidTransform) -> np.ndarray:
    """Apply ``t`` to an (N, 3) array of points; alias kept for readability."""
    return t.apply(points)


def pixel_coords_continuous(xyz_cam: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Continuous (u, v) image coordinates of camera-frame points, (N, 2).

    No culling or bounds checks; division by zc is the caller's risk.
    """
    xyz = np.asarray(xyz_cam, dtype=np.float64).reshape(-1, 3)
    z = xyz[:, 2]
    u = cam.fx * xyz[:, 0] / z + cam.cx
    v = cam.fy * xyz[:, 1] / z + cam.cy
    return np.stack([u, v], axis=1)


def project_point(p: Point3, cam: CameraIntrinsics, t: RigidTransform) -> Optional[PixelCoord]:
    """Project a single lidar-frame point to an integer pixel, or None.

    None is returned both for near-plane culls (zc <= Z_MIN) and for pixels
    that round outside the image.
    """
    xc, yc, zc = t.apply(p.as_array())
    if zc <= Z_MIN:
        return None
    u = float(round_half_away(cam.fx * xc / zc + cam.cx))
    v = float(round_half_away(cam.fy * yc / zc + cam.cy))
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        return None
    return PixelCoord(u=int(u), v=int(v))


def project_cloud_arrays(
    cloud: LabeledPointCloud, cam: CameraIntrinsics, t: RigidTransform
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of a whole cloud.

    Returns (u, v, labels) int arrays for the in-bounds points only, in
    input order. Culled and out-of-bounds points are dropped.
    """
    if len(cloud) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0, dtype=np.uint8)
    xyz = t.apply(cloud.points)
    z = xyz[:, 2]
    front = z > Z_MIN
    uv = np.full((len(cloud), 2), -1.0)
    uv[front] = pixel_coords_continuous(xyz[front], cam)
    u = round_half_away(uv[:, 0])
    v = round_half_away(uv[:, 1])
    keep = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u[keep].astype(np.int64), v[keep].astype(np.int64), cloud.labels[keep]


def project_cloud(
    cloud: LabeledPointCloud, cam: CameraIntrinsics, t: RigidTransform
) -> list[tuple[PixelCoord, int]]:
    """Project every point; keep in-bounds results as (pixel, label) pairs."""
    u, v, labels = project_cloud_arrays(cloud, cam, t)
    return [(PixelCoord(int(ui), int(vi)), int(li)) for ui, vi, li in zip(u, v, labels)]


def load_calibration(path) -> tuple[CameraIntrinsics, RigidTransform]:
    """Read a calibration file and validate it.

    The file is JSON with fields ``K`` (9 numbers, row-major 3x3),
    ``T_camera_lidar`` (16 numbers, row-major 4x4), ``width`` and
    ``height``. Returns the intrinsics and the lidar -> camera transform.
    """
    path = Path(path)
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"calibration file {path} is not valid JSON: {e}") from e
    for key in ("K", "T_camera_lidar", "width", "height"):
        if key not in raw:
            raise ValueError(f"calibration file {path} is missing field '{key}'")
    k = np.asarray(raw["K"], dtype=np.float64)
    if k.size != 9:
        raise ValueError(f"calibration field 'K' must hold 9 numbers, got {k.size}")
    k = k.reshape(3, 3)
    if abs(k[0, 1]) > 1e-12 or np.abs(k[2] - [0.0, 0.0, 1.0]).max() > 1e-12 or abs(k[1, 0]) > 1e-12:
        raise ValueError("calibration 'K' must be an axis-aligned pinhole matrix (no skew)")
    mat = np.asarray(raw["T_camera_lidar"], dtype=np.float64)
    if mat.size != 16:
        raise ValueError(f"calibration field 'T_camera_lidar' must hold 16 numbers, got {mat.size}")
    mat = mat.reshape(4, 4)
    if np.abs(mat[3] - [0.0, 0.0, 0.0, 1.0]).max() > 1e-9:
        raise ValueError("calibration 'T_camera_lidar' last row must be [0, 0, 0, 1]")
    cam = CameraIntrinsics(
        fx=float(k[0, 0]),
        fy=float(k[1, 1]),
        cx=float(k[0, 2]),
        cy=float(k[1, 2]),
        width=int(raw["width"]),
        height=int(raw["height"]),
    )
    # RigidTransform validates rotation orthonormality / determinant.
    t = RigidTransform(mat[:3, :3], mat[:3, 3], source_frame="lidar", target_frame="camera")
    return cam, t


def save_calibration(path, cam: CameraIntrinsics, t: RigidTransform) -> None:
    """Write the calibration JSON consumed by :func:`load_calibration`."""
    mat = np.eye(4)
    mat[:3, :3] = t.rotation
    mat[:3, 3] = t.translation
    payload = {
        "K": [float(x) for x in cam.as_matrix().reshape(-1)],
        "T_camera_lidar": [float(x) for x in mat.reshape(-1)],
        "width": cam.width,
        "height": cam.height,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def camera_pose(position: Sequence[float], yaw: float = 0.0, pitch_down: float = 0.0) -> RigidTransform:
    """World -> camera transform for a camera at ``position`` looking along +x.

    ``yaw`` rotates the view direction about world z (radians, CCW from
    above); ``pitch_down`` tilts the optical axis toward the ground
    (positive = down). Camera convention is +z forward, +y down.
    """
    cp, sp = math.cos(pitch_down), math.sin(pitch_down)
    cy, sy = math.cos(yaw), math.sin(yaw)
    forward = np.array([cp * cy, cp * sy, -sp])
    right = np.array([sy, -cy, 0.0])  # pitch-independent, no singularity at +-90 deg
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # rows: camera axes in world coords
    pos = np.asarray(position, dtype=np.float64)
    return RigidTransform(rot, -rot @ pos, source_frame="world", target_frame="camera")


def lidar_pose(position: Sequence[float], yaw: float = 0.0) -> RigidTransform:
    """World -> lidar transform for a level-mounted spinning lidar."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    rot_lidar_to_world = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    rot = rot_lidar_to_world.T
    pos = np.asarray(position, dtype=np.float64)
    return RigidTransform(rot, -rot @ pos, source_frame="world", target_frame="lidar")
