"""Rigid transforms, trajectory interpolation, camera and spherical LiDAR projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .labels import InvalidInputError

# extrapolation beyond trajectory ends, seconds
EXTRAPOLATION_LIMIT = 0.1


class OutOfRangeError(ValueError):
    """Query timestamp outside the trajectory's covered interval."""


def quat_wxyz_to_rotation(q: np.ndarray) -> Rotation:
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat([q[1], q[2], q[3], q[0]])


def rotation_to_quat_wxyz(rot: Rotation) -> np.ndarray:
    x, y, z, w = rot.as_quat()
    return np.array([w, x, y, z])


@dataclass(frozen=True)
class Pose:
    """Stamped rigid transform: world_T_body at time t."""

    t: float
    translation: np.ndarray  # (3,) meters
    rotation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        q = np.asarray(self.rotation, dtype=np.float64)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise InvalidInputError(f"quaternion norm {n} != 1")
        object.__setattr__(self, "rotation", q / n)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_wxyz_to_rotation(self.rotation).as_matrix()
        T[:3, 3] = self.translation
        return T

    @classmethod
    def identity(cls, t: float = 0.0) -> "Pose":
        return cls(t, np.zeros(3), np.array([1.0, 0, 0, 0]))

    @classmethod
    def from_matrix(cls, T: np.ndarray, t: float = 0.0) -> "Pose":
        rot = Rotation.from_matrix(T[:3, :3])
        return cls(t, T[:3, 3].copy(), rotation_to_quat_wxyz(rot))


def invert(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def apply(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 4x4 transform to one point (3,) or many (N, 3)."""
    p = np.asarray(points, dtype=np.float64)
    return p @ T[:3, :3].T + T[:3, 3]


class Trajectory:
    """Time-ordered poses with lerp/slerp evaluation between knots.

    Queries up to EXTRAPOLATION_LIMIT beyond either end extrapolate with a
    constant-velocity assumption on the translation (rotation held).
    """

    def __init__(self, poses: list[Pose]):
        if not poses:
            raise InvalidInputError("trajectory needs at least one pose")
        ts = np.array([p.t for p in poses])
        if np.any(np.diff(ts) <= 0):
            raise InvalidInputError("trajectory timestamps must strictly increase")
        self.poses = list(poses)
        self.times = ts

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def interpolate(self, t: float) -> Pose:
        if t < self.t_start - EXTRAPOLATION_LIMIT or t > self.t_end + EXTRAPOLATION_LIMIT:
            raise OutOfRangeError(
                f"timestamp {t} outside trajectory [{self.t_start}, {self.t_end}] "
                f"(+/- {EXTRAPOLATION_LIMIT} s)")
        if len(self.poses) == 1:
            p = self.poses[0]
            return Pose(t, p.translation, p.rotation)
        if t <= self.t_start:
            return self._extrapolate(t, 0, 1)
        if t >= self.t_end:
            return self._extrapolate(t, len(self.poses) - 2, len(self.poses) - 1)
        hi = int(np.searchsorted(self.times, t, side="right"))
        lo = hi - 1
        a, b = self.poses[lo], self.poses[hi]
        if t == a.t:
            return Pose(t, a.translation, a.rotation)
        u = (t - a.t) / (b.t - a.t)
        trans = (1 - u) * a.translation + u * b.translation
        slerp = Slerp([a.t, b.t], Rotation.concatenate(
            [quat_wxyz_to_rotation(a.rotation), quat_wxyz_to_rotation(b.rotation)]))
        rot = slerp(t)
        return Pose(t, trans, rotation_to_quat_wxyz(rot))

    def _extrapolate(self, t: float, lo: int, hi: int) -> Pose:
        a, b = self.poses[lo], self.poses[hi]
        anchor = a if t <= a.t else b
        vel = (b.translation - a.translation) / (b.t - a.t)
        trans = anchor.translation + vel * (t - anchor.t)
        return Pose(t, trans, anchor.rotation)


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    return traj.interpolate(t)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the static camera-from-base extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_cam_base: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise InvalidInputError("camera intrinsics must be positive")
        object.__setattr__(self, "T_cam_base", np.asarray(self.T_cam_base, dtype=np.float64))


@dataclass(frozen=True)
class SphericalModel:
    """Spherical range-image geometry of a rotating LiDAR."""

    width: int = 1024
    height: int = 128
    f_up: float = np.pi / 4  # radians
    f_down: float = np.pi / 4
    r_max: float = 50.0

    def __post_init__(self):
        if abs(self.f_up) + abs(self.f_down) <= 0:
            raise InvalidInputError("vertical FoV must be positive")

    @property
    def fov_vertical(self) -> float:
        return abs(self.f_up) + abs(self.f_down)


def lidar_to_camera(points: np.ndarray, t_lidar: float, t_cam: float,
                    traj: Trajectory, cam: CameraModel,
                    T_base_lidar: np.ndarray) -> np.ndarray:
    """Transform LiDAR-frame points into the camera frame, compensating the
    base motion between the two capture times."""
    T_w_base_l = traj.interpolate(t_lidar).matrix()
    if t_cam == t_lidar:
        T_motion = np.eye(4)
    else:
        T_w_base_c = traj.interpolate(t_cam).matrix()
        T_motion = invert(T_w_base_c) @ T_w_base_l
    T = cam.T_cam_base @ T_motion @ T_base_lidar
    return apply(T, points)


def project_pinhole(p_cam: np.ndarray, cam: CameraModel):
    """Project camera-frame points to pixels.

    Returns (u, v, valid); valid is False behind the camera (z <= 1e-6) or
    outside [0, w) x [0, h).
    """
    p = np.atleast_2d(np.asarray(p_cam, dtype=np.float64))
    z = p[:, 2]
    in_front = z > 1e-6
    zs = np.where(in_front, z, 1.0)
    u = cam.fx * p[:, 0] / zs + cam.cx
    v = cam.fy * p[:, 1] / zs + cam.cy
    valid = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    if np.asarray(p_cam).ndim == 1:
        return float(u[0]), float(v[0]), bool(valid[0])
    return u, v, valid


def sample_bilinear(grid: np.ndarray, u, v):
    """Bilinearly sample an (H, W, C) or (H, W) grid at subpixel (u, v).

    Coordinates address cell centers at integer positions; borders clamp.
    Returns (values, in_bounds).
    """
    H, W = grid.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inb = (u > -0.5) & (u < W - 0.5) & (v > -0.5) & (v < H - 0.5)
    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    u0 = np.floor(uc).astype(int)
    v0 = np.floor(vc).astype(int)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = uc - u0
    fv = vc - v0
    if grid.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    val = (grid[v0, u0] * (1 - fu) * (1 - fv)
           + grid[v0, u1] * fu * (1 - fv)
           + grid[v1, u0] * (1 - fu) * fv
           + grid[v1, u1] * fu * fv)
    return val, inb


def project_spherical(points: np.ndarray, model: SphericalModel):
    """Spherical projection of sensor-frame points to range-image coordinates.

    u = 0.5 (1 - atan2(y, x) / pi) w,  v = (1 - (asin(z / r) + f_down) / f) h.
    Returns (u, v, r, valid); invalid when r > r_max or v outside [0, h).
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    r = np.linalg.norm(p, axis=1)
    if np.any(r == 0):
        raise InvalidInputError("cannot project zero-norm point")
    yaw = np.arctan2(p[:, 1], p[:, 0])
    pitch = np.arcsin(np.clip(p[:, 2] / r, -1.0, 1.0))
    f = model.fov_vertical
    u = 0.5 * (1.0 - yaw / np.pi) * model.width
    v = (1.0 - (pitch + abs(model.f_down)) / f) * model.height
    valid = (r <= model.r_max) & (v >= 0) & (v < model.height)
    if np.asarray(points).ndim == 1:
        return float(u[0]), float(v[0]), float(r[0]), bool(valid[0])
    return u, v, r, valid


def spherical_ray_directions(model: SphericalModel) -> np.ndarray:
    """Unit ray direction per cell center, shape (H, W, 3), consistent with
    project_spherical so that project(r * dir(u, v)) round-trips to (u, v)."""
    us = np.arange(model.width) + 0.5
    vs = np.arange(model.height) + 0.5
    yaw = np.pi * (1.0 - 2.0 * us / model.width)
    pitch = (1.0 - vs / model.height) * model.fov_vertical - abs(model.f_down)
    cy = np.cos(yaw)[None, :]
    sy = np.sin(yaw)[None, :]
    cp = np.cos(pitch)[:, None]
    sp = np.sin(pitch)[:, None]
    dirs = np.stack([cp * cy, cp * sy, np.broadcast_to(sp, (model.height, model.width))],
                    axis=-1)
    return dirs


def unproject_spherical(u, v, r, model: SphericalModel) -> np.ndarray:
    """Reconstruct sensor-frame points from image coordinates and range."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    yaw = np.pi * (1.0 - 2.0 * u / model.width)
    pitch = (1.0 - v / model.height) * model.fov_vertical - abs(model.f_down)
    d = np.stack([np.cos(pitch) * np.cos(yaw),
                  np.cos(pitch) * np.sin(yaw),
                  np.sin(pitch)], axis=-1)
    return d * r[..., None]


@dataclass
class RangeImage:
    """H x W grid of range and per-cell xyz (sensor frame); -1 range marks
    invalid cells. Optional intensity and per-cell payload index."""

    model: SphericalModel
    range: np.ndarray  # (H, W) float64, -1 where invalid
    xyz: np.ndarray  # (H, W, 3)
    intensity: np.ndarray | None = None
    cell_index: np.ndarray | None = None  # index of the winning source point

    @property
    def valid(self) -> np.ndarray:
        return self.range >= 0

    @classmethod
    def empty(cls, model: SphericalModel) -> "RangeImage":
        H, W = model.height, model.width
        return cls(model, np.full((H, W), -1.0), np.zeros((H, W, 3)))


def render_range_image(points: np.ndarray, model: SphericalModel) -> RangeImage:
    """Z-buffer the points (sensor frame) into a spherical range image; the
    nearest point per cell wins. cell_index records the winning row of
    `points` per cell (-1 where empty)."""
    img = RangeImage.empty(model)
    H, W = model.height, model.width
    img.cell_index = np.full((H, W), -1, dtype=np.int64)
    if len(points) == 0:
        return img
    u, v, r, valid = project_spherical(points, model)
    idx = np.nonzero(valid)[0]
    if len(idx) == 0:
        return img
    ui = np.clip(u[idx].astype(int), 0, W - 1)
    vi = v[idx].astype(int)
    flat = vi * W + ui
    # sort by range descending so the nearest write lands last
    order = np.argsort(-r[idx], kind="stable")
    img.range.reshape(-1)[flat[order]] = r[idx][order]
    img.cell_index.reshape(-1)[flat[order]] = idx[order]
    img.xyz.reshape(-1, 3)[flat[order]] = points[idx][order]
    return img


def render_virtual_scan(cloud_xyz: np.ndarray, viewpoint: Pose,
                        model: SphericalModel) -> RangeImage:
    """Render world-frame points into a virtual spherical view at `viewpoint`."""
    local = apply(invert(viewpoint.matrix()), cloud_xyz) if len(cloud_xyz) else cloud_xyz
    return render_range_image(np.atleast_2d(local) if len(cloud_xyz) else np.zeros((0, 3)),
                              model)
