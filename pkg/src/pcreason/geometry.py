"""Canonical point-cloud preprocessing and the spherical 8-view camera rig.

Clouds are normalized into the unit sphere (centroid at the origin, farthest
point at radius 1). Cameras sit on a sphere outside the object: six views at
60-degree azimuth steps and 30-degree elevation, plus zenith and nadir. Each
view carries an ideal-pinhole 3x4 projection matrix mapping homogeneous world
points to normalized image coordinates in [0,1]^2 with the origin at image
center (0.5, 0.5).

File formats:
  .pts  -- little-endian: uint64 point count, then N*3 float64 (row-major)
  .json -- a JSON array of [x, y, z] triples
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_RADIUS = 2.2
DEFAULT_FOV_DEG = 50.0
DEFAULT_IMAGE_SIZE = 64

RIG_AZIMUTHS_DEG = [0.0, 60.0, 120.0, 180.0, 240.0, 300.0]
RIG_VIEW_NAMES = [
    "az000", "az060", "az120", "az180", "az240", "az300", "zenith", "nadir",
]


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # N x 3 float64, canonical frame
    object_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise GeometryError("points must be N x 3")
        if self.points.shape[0] < 4:
            raise GeometryError("need at least 4 points")


@dataclass
class CameraView:
    azimuth_deg: float
    elevation_deg: float
    radius: float
    projection: np.ndarray  # 3 x 4, K [R|t] in normalized image units
    image_size: int
    rotation: np.ndarray = field(repr=False, default=None)
    translation: np.ndarray = field(repr=False, default=None)
    name: str = ""


@dataclass
class CameraRig:
    views: list  # 8 CameraView, order: 6 azimuths, zenith, nadir


def normalize_to_unit_sphere(points, object_id: str = "") -> PointCloud:
    """Center at the origin and scale so the farthest point has norm 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError("points must be N x 3")
    if pts.shape[0] < 4:
        raise GeometryError("need at least 4 points")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("non-finite coordinates")
    centered = pts - pts.mean(axis=0)
    max_radius = float(np.linalg.norm(centered, axis=1).max())
    if max_radius < 1e-12:
        raise GeometryError("degenerate geometry")
    return PointCloud(centered / max_radius, object_id=object_id)


def farthest_point_sample(cloud: PointCloud, k: int, start_index: int = 0):
    """Greedy max-min selection; ties broken toward the smallest index.

    Returns the selected indices in selection order.
    """
    pts = cloud.points
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise GeometryError(f"k={k} out of range for {n} points")
    if not 0 <= start_index < n:
        raise GeometryError("start_index out of range")
    chosen = [start_index]
    # squared distances preserve the max-min ordering and tie pattern
    min_d2 = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(min_d2))  # argmax returns the first (smallest) index
        chosen.append(nxt)
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def _look_at(position: np.ndarray, up: np.ndarray):
    """Rows of R: camera x (image right), y (image down), z (toward origin)."""
    forward = -position / np.linalg.norm(position)
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    t = -r @ position
    return r, t


def camera_position(azimuth_deg: float, elevation_deg: float, radius: float):
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    return radius * np.array(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
    )


def _make_view(az, el, radius, fov_deg, image_size, name) -> CameraView:
    pos = camera_position(az, el, radius)
    up = np.array([0.0, 1.0, 0.0]) if abs(el) > 89.0 else np.array([0.0, 0.0, 1.0])
    r, t = _look_at(pos, up)
    focal = 0.5 / np.tan(np.deg2rad(fov_deg) / 2.0)
    intrinsics = np.array(
        [[focal, 0.0, 0.5], [0.0, focal, 0.5], [0.0, 0.0, 1.0]]
    )
    extrinsics = np.concatenate([r, t[:, None]], axis=1)
    return CameraView(
        azimuth_deg=az,
        elevation_deg=el,
        radius=radius,
        projection=intrinsics @ extrinsics,
        image_size=image_size,
        rotation=r,
        translation=t,
        name=name,
    )


def build_spherical_rig(
    radius: float = DEFAULT_RADIUS,
    fov_deg: float = DEFAULT_FOV_DEG,
    image_size: int = DEFAULT_IMAGE_SIZE,
) -> CameraRig:
    """Six 30-degree-elevation azimuth views plus zenith and nadir."""
    if radius <= 1.0:
        raise GeometryError("camera inside object sphere")
    if not 0.0 < fov_deg < 180.0:
        raise GeometryError("fov out of range")
    views = [
        _make_view(az, 30.0, radius, fov_deg, image_size, RIG_VIEW_NAMES[i])
        for i, az in enumerate(RIG_AZIMUTHS_DEG)
    ]
    views.append(_make_view(0.0, 90.0, radius, fov_deg, image_size, "zenith"))
    views.append(_make_view(0.0, -90.0, radius, fov_deg, image_size, "nadir"))
    return CameraRig(views=views)


def project_point(p, view: CameraView):
    """Pinhole projection to normalized [0,1]^2 image coordinates.

    Returns (u, visible). ``visible`` requires positive depth and u inside
    the frame. Points at (or behind) the camera plane get visible=False and
    u = (nan, nan).
    """
    p = np.asarray(p, dtype=np.float64)
    hom = view.projection @ np.append(p, 1.0)
    depth = hom[2]
    if depth < 1e-9:
        return np.array([np.nan, np.nan]), False
    u = hom[:2] / depth
    visible = bool(0.0 <= u[0] <= 1.0 and 0.0 <= u[1] <= 1.0)
    return u, visible


def project_points(points: np.ndarray, view: CameraView):
    """Vectorized projection: returns (u: N x 2, depth: N, visible: N bool)."""
    pts = np.asarray(points, dtype=np.float64)
    hom = pts @ view.projection[:, :3].T + view.projection[:, 3]
    depth = hom[:, 2]
    safe = np.where(np.abs(depth) < 1e-9, np.nan, depth)
    u = hom[:, :2] / safe[:, None]
    visible = (
        (depth >= 1e-9)
        & (u[:, 0] >= 0.0)
        & (u[:, 0] <= 1.0)
        & (u[:, 1] >= 0.0)
        & (u[:, 1] <= 1.0)
    )
    return u, depth, visible


# -- serialization ----------------------------------------------------------

_PTS_COUNT = struct.Struct("<Q")


def save_point_cloud(cloud: PointCloud, path) -> None:
    path = Path(path)
    if path.suffix == ".pts":
        with open(path, "wb") as fh:
            fh.write(_PTS_COUNT.pack(cloud.points.shape[0]))
            fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
    elif path.suffix == ".json":
        path.write_text(json.dumps(cloud.points.tolist()))
    else:
        raise GeometryError(f"unknown point cloud extension: {path.suffix}")


def load_point_cloud(path, object_id: str = "") -> PointCloud:
    path = Path(path)
    if path.suffix == ".pts":
        raw = path.read_bytes()
        (count,) = _PTS_COUNT.unpack_from(raw, 0)
        pts = np.frombuffer(raw, dtype="<f8", offset=_PTS_COUNT.size).reshape(count, 3)
        return PointCloud(pts.astype(np.float64), object_id=object_id)
    if path.suffix == ".json":
        return PointCloud(np.array(json.loads(path.read_text())), object_id=object_id)
    raise GeometryError(f"unknown point cloud extension: {path.suffix}")
