"""Cameras, point clouds, voxel grids and the pinhole projection they share.

Camera frame convention is OpenCV-style: +x right, +y down, +z forward.
A :class:`CameraPose` stores the camera centre in world coordinates and the
world-to-camera rotation as a unit quaternion ``(w, x, y, z)``, so a world
point ``p`` maps to ``R @ (p - position)`` in camera space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

QUAT_TOL = 1e-9


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix (or stack of them) from ``(w, x, y, z)`` quaternions."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix."""
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def look_at_rotation(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation for a camera at ``position`` facing ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        # degenerate: camera sits on its target, look along +x
        forward = np.array([1.0, 0.0, 0.0])
    else:
        forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with a near/far depth range."""

    focal_x: float
    focal_y: float
    principal_point: Tuple[float, float]
    image_width: int
    image_height: int
    near_plane: float = 0.05
    far_plane: float = 100.0

    def __post_init__(self):
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near_plane < self.far_plane):
            raise ValueError("need 0 < near_plane < far_plane")
        cx, cy = self.principal_point
        if not (0 <= cx <= self.image_width and 0 <= cy <= self.image_height):
            raise ValueError("principal point outside the image")
        object.__setattr__(self, "principal_point", (float(cx), float(cy)))

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float,
                 near: float = 0.05, far: float = 100.0) -> "CameraIntrinsics":
        """Square-pixel intrinsics from a horizontal field of view."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width / 2, height / 2), width, height, near, far)

    @property
    def K(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal_x, 0.0, cx], [0.0, self.focal_y, cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    """Camera centre plus world-to-camera unit quaternion ``(w, x, y, z)``."""

    position: Tuple[float, float, float]
    orientation: Tuple[float, float, float, float]

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        quat = tuple(float(v) for v in self.orientation)
        if len(pos) != 3 or len(quat) != 4:
            raise ValueError("position needs 3 values and orientation 4")
        if not all(math.isfinite(v) for v in pos + quat):
            raise ValueError("pose values must be finite")
        if abs(math.sqrt(sum(v * v for v in quat)) - 1.0) > QUAT_TOL:
            raise ValueError("orientation quaternion must have unit norm")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    @classmethod
    def from_rotation(cls, position, R) -> "CameraPose":
        q = matrix_to_quat(R)
        q = q / np.linalg.norm(q)
        return cls(tuple(np.asarray(position, dtype=np.float64)), tuple(q))

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        return cls.from_rotation(position, look_at_rotation(position, target, up))

    @cached_property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation matrix."""
        return quat_to_matrix(self.orientation)

    @cached_property
    def center(self) -> np.ndarray:
        return np.array(self.position)

    @property
    def view_direction(self) -> np.ndarray:
        """Unit optical axis in world coordinates."""
        return self.rotation[2].copy()

    def world_to_camera(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.center) @ self.rotation.T

    def camera_to_world(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation + self.center

    def as_array(self) -> np.ndarray:
        """The 7 numbers ``px, py, pz, qw, qx, qy, qz``."""
        return np.array(self.position + self.orientation)

    # rigid-transform algebra on x -> R x + t with t = -R c
    def compose(self, other: "CameraPose") -> "CameraPose":
        """Transform equal to applying ``other`` first, then ``self``."""
        R = self.rotation @ other.rotation
        t = self.rotation @ (-other.rotation @ other.center) - self.rotation @ self.center
        return CameraPose.from_rotation(-R.T @ t, R)

    def inverse(self) -> "CameraPose":
        R = self.rotation.T
        t = self.center
        return CameraPose.from_rotation(-R.T @ t, R)

    def transform_matrix(self) -> np.ndarray:
        """4x4 homogeneous world-to-camera matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = -self.rotation @ self.center
        return T


def project_points(pose: CameraPose, intr: CameraIntrinsics, points):
    """Vectorised pinhole projection.

    Returns ``(pixels, depth, visible)`` where ``visible`` marks points in
    front of the camera, between the clip planes and inside the image.
    """
    cam = pose.world_to_camera(np.atleast_2d(points))
    depth = cam[:, 2]
    in_front = depth > 0
    safe = np.where(in_front, depth, 1.0)
    cx, cy = intr.principal_point
    u = intr.focal_x * cam[:, 0] / safe + cx
    v = intr.focal_y * cam[:, 1] / safe + cy
    visible = (
        in_front
        & (depth >= intr.near_plane) & (depth <= intr.far_plane)
        & (u >= 0) & (u <= intr.image_width)
        & (v >= 0) & (v <= intr.image_height)
    )
    return np.stack([u, v], axis=1), depth, visible


def world_to_pixel(pose: CameraPose, intr: CameraIntrinsics, p) -> Optional[Tuple[np.ndarray, float]]:
    """Pixel and camera depth of ``p``, or ``None`` outside the frustum."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    pix, depth, vis = project_points(pose, intr, p[None])
    if not vis[0]:
        return None
    return pix[0], float(depth[0])


def pixel_to_world(pose: CameraPose, intr: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    """Inverse of :func:`world_to_pixel` for a known camera depth."""
    cx, cy = intr.principal_point
    u, v = pixel
    cam = np.array([(u - cx) / intr.focal_x * depth, (v - cy) / intr.focal_y * depth, depth])
    return pose.camera_to_world(cam)


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Colored points plus, per point, the views that observed it.

    ``provenance`` holds one frozenset of view indices per point; externally
    ingested clouds use ``frozenset({"external"})``.
    """

    positions: np.ndarray
    colors: np.ndarray
    provenance: Tuple[frozenset, ...] = field(default=())

    def __post_init__(self):
        pos = _frozen(np.reshape(self.positions, (-1, 3)))
        col = _frozen(np.reshape(self.colors, (-1, 3)))
        if pos.shape != col.shape:
            raise ValueError("positions and colors disagree in length")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        if np.any(col < 0) or np.any(col > 1):
            raise ValueError("colors must lie in [0, 1]")
        prov = tuple(frozenset(p) for p in self.provenance)
        if not prov:
            prov = tuple(frozenset() for _ in range(len(pos)))
        if len(prov) != len(pos):
            raise ValueError("provenance length must equal the point count")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "provenance", prov)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.positions.shape == other.positions.shape
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.colors, other.colors)
            and self.provenance == other.provenance
        )

    def union(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.colors, other.colors]),
            self.provenance + other.provenance,
        )

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)


DEFAULT_RESOLUTION = (16, 16, 16)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Axis-aligned box split into ``nx * ny * nz`` equal voxels.

    Flat indices run C-order over ``(ix, iy, iz)``.  A coordinate on an
    internal face belongs to the higher-index voxel; the ``bbox_max`` faces
    belong to the last voxel along that axis.
    """

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: Tuple[int, int, int] = DEFAULT_RESOLUTION
    occupied: Optional[np.ndarray] = None

    def __post_init__(self):
        lo = _frozen(self.bbox_min)
        hi = _frozen(self.bbox_max)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(lo < hi):
            raise ValueError("need bbox_min < bbox_max componentwise")
        res = tuple(int(n) for n in self.resolution)
        if len(res) != 3 or min(res) < 1:
            raise ValueError("resolution needs three positive integers")
        size = res[0] * res[1] * res[2]
        occ = np.zeros(size, dtype=bool) if self.occupied is None else np.array(self.occupied, dtype=bool)
        if occ.shape != (size,):
            raise ValueError("occupancy bitset length must equal the voxel count")
        occ.setflags(write=False)
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "occupied", occ)

    @property
    def size(self) -> int:
        return len(self.occupied)

    @property
    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.occupied))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))

    def cleared(self) -> "VoxelGrid":
        return VoxelGrid(self.bbox_min, self.bbox_max, self.resolution)

    def edges(self, axis: int) -> np.ndarray:
        """Voxel face coordinates along one axis (length ``n + 1``)."""
        n = self.resolution[axis]
        lo, hi = self.bbox_min[axis], self.bbox_max[axis]
        e = lo + (hi - lo) * (np.arange(n + 1) / n)
        e[-1] = hi
        return e

    def voxel_indices(self, points) -> np.ndarray:
        """Flat voxel index per point, ``-1`` for points outside the box."""
        points = np.reshape(np.asarray(points, dtype=np.float64), (-1, 3))
        inside = np.all((points >= self.bbox_min) & (points <= self.bbox_max), axis=1)
        ijk = np.empty(points.shape, dtype=np.int64)
        for axis in range(3):
            n = self.resolution[axis]
            idx = np.searchsorted(self.edges(axis), points[:, axis], side="right") - 1
            ijk[:, axis] = np.clip(idx, 0, n - 1)
        nx, ny, nz = self.resolution
        flat = (ijk[:, 0] * ny + ijk[:, 1]) * nz + ijk[:, 2]
        return np.where(inside, flat, -1)

    def voxel_bounds(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        nx, ny, nz = self.resolution
        ix, rem = divmod(int(index), ny * nz)
        iy, iz = divmod(rem, nz)
        ijk = (ix, iy, iz)
        lo = np.array([self.edges(a)[ijk[a]] for a in range(3)])
        hi = np.array([self.edges(a)[ijk[a] + 1] for a in range(3)])
        return lo, hi


def voxel_index(grid: VoxelGrid, p) -> Optional[int]:
    """Flat index of the voxel holding ``p``; ``None`` outside the box."""
    idx = int(grid.voxel_indices(np.asarray(p, dtype=np.float64)[None])[0])
    return None if idx < 0 else idx


def mark_points(grid: VoxelGrid, pc: PointCloud) -> VoxelGrid:
    """New grid with every voxel holding at least one cloud point set."""
    occ = np.array(grid.occupied)
    if len(pc):
        idx = grid.voxel_indices(pc.positions)
        occ[idx[idx >= 0]] = True
    return VoxelGrid(grid.bbox_min, grid.bbox_max, grid.resolution, occ)


def ring_poses(count: int, radius: float, height: float, center=(0.0, 0.0, 0.0),
               start_deg: float = 0.0) -> Sequence[CameraPose]:
    """Look-at-centre poses evenly spaced in azimuth on a horizontal circle."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(count):
        a = math.radians(start_deg) + 2 * math.pi * k / count
        pos = center + np.array([radius * math.cos(a), radius * math.sin(a), height])
        poses.append(CameraPose.look_at(pos, center))
    return poses
