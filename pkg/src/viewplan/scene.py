"""Procedural ground-truth scenes and a visibility-based reconstruction oracle.

The oracle plays the part of an SfM pipeline: a ground-truth Gaussian centre
is "triangulated" once enough views see it unoccluded.  Its output is always
a subset of the true centres, so adding views can only grow the cloud.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import OracleFailure
from .geometry import CameraIntrinsics, CameraPose, PointCloud, project_points
from .splats import SplatModel

log = logging.getLogger(__name__)

GENERATORS = ("clustered", "shell", "indoor-box")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    generator: str = "clustered"
    n_primitives: int = 2000
    bbox: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    scale_range: Tuple[float, float] = (0.01, 0.04)
    n_clusters: int = 6
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.n_primitives < 0:
            raise ValueError("n_primitives must be non-negative")
        lo, hi = (tuple(float(v) for v in b) for b in self.bbox)
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("bbox min must be below bbox max")
        s0, s1 = self.scale_range
        if not 0 < s0 <= s1:
            raise ValueError("scale range must satisfy 0 < min <= max")
        object.__setattr__(self, "bbox", (lo, hi))

    @property
    def center(self) -> np.ndarray:
        lo, hi = np.asarray(self.bbox)
        return (lo + hi) / 2

    @property
    def shell_radius(self) -> float:
        lo, hi = np.asarray(self.bbox)
        return 0.8 * float(np.min(hi - lo)) / 2


def _clustered(spec: SceneSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    lo, hi = np.asarray(spec.bbox)
    extent = hi - lo
    k = max(1, spec.n_clusters)
    centers = rng.uniform(lo + 0.25 * extent, hi - 0.25 * extent, size=(k, 3))
    spread = rng.uniform(0.06, 0.14, size=k)[:, None] * extent
    label = rng.integers(0, k, size=n)
    pts = centers[label] + rng.normal(size=(n, 3)) * spread[label]
    return np.clip(pts, lo, hi)


def _shell(spec: SceneSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return spec.center + spec.shell_radius * d


def _indoor_box(spec: SceneSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    lo, hi = np.asarray(spec.bbox)
    ext = hi - lo
    # face areas: pairs of faces normal to x, y, z
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    side = rng.integers(0, 2, size=n)
    pts = rng.uniform(lo, hi, size=(n, 3))
    rows = np.arange(n)
    pts[rows, face_axis] = np.where(side == 1, hi[face_axis], lo[face_axis])
    return pts


def generate_scene(spec: SceneSpec) -> SplatModel:
    """Deterministic ground-truth Gaussians for a scene spec."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_primitives
    if n == 0:
        return SplatModel.empty(spec.background)
    maker = {"clustered": _clustered, "shell": _shell, "indoor-box": _indoor_box}[spec.generator]
    means = maker(spec, rng, n)
    # 8-bit colors keep PLY round-trips exact
    colors = rng.integers(0, 256, size=(n, 3)) / 255.0
    s0, s1 = spec.scale_range
    scales = np.exp(rng.uniform(np.log(s0), np.log(s1), size=(n, 3)))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    opac = rng.uniform(0.5, 1.0, size=n)
    return SplatModel(means, q, scales, opac, colors, spec.background)


def _pose_key(pose: CameraPose) -> bytes:
    return np.asarray(pose.as_array(), dtype="<f8").tobytes()


@dataclass
class ReconstructionOracle:
    """Black-box point-cloud producer over a ground-truth scene.

    A primitive centre enters the cloud when at least ``min_observing_views``
    of the given views see it inside the frustum and unoccluded.  Centre ``j``
    occludes centre ``i`` in a view when it is strictly closer in camera depth
    and the angle between their viewing rays is below ``j``'s angular radius
    ``atan(occlusion_scale * mean_scale_j / dist_j)``, with ``dist_j`` the
    distance from the camera centre.

    Per-view visibility is cached by pose, and dropout draws are seeded from
    ``(seed, pose)``, so repeated or reordered queries agree.
    """

    scene: SplatModel
    intrinsics: CameraIntrinsics
    min_observing_views: int = 2
    occlusion: bool = True
    dropout: float = 0.0
    occlusion_scale: float = 1.0
    seed: int = 0
    _cache: Dict[bytes, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.min_observing_views < 1:
            raise ValueError("min_observing_views must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def visibility(self, pose: CameraPose) -> np.ndarray:
        """Boolean mask of primitives this single view observes."""
        key = _pose_key(pose)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._visibility(pose, key)
            hit.setflags(write=False)
            self._cache[key] = hit
        return hit

    def _visibility(self, pose: CameraPose, key: bytes) -> np.ndarray:
        n = len(self.scene)
        if n == 0:
            return np.zeros(0, dtype=bool)
        _, depth, vis = project_points(pose, self.intrinsics, self.scene.means)
        if self.occlusion and vis.any():
            vis = vis & ~occluded(pose, self.scene, depth, vis, self.occlusion_scale)
        if self.dropout > 0:
            digest = hashlib.sha256(key).digest()
            stream = np.random.default_rng([self.seed, int.from_bytes(digest[:8], "little")])
            vis = vis & (stream.random(n) >= self.dropout)
        return vis

    def observation_counts(self, views: Sequence[CameraPose]) -> np.ndarray:
        counts = np.zeros(len(self.scene), dtype=np.int64)
        for v in views:
            counts += self.visibility(v)
        return counts

    def reconstruct(self, views: Sequence[CameraPose], intr: Optional[CameraIntrinsics] = None) -> PointCloud:
        """Triangulated cloud for a view set; raises OracleFailure if empty."""
        if not views:
            raise ValueError("need at least one view")
        if intr is not None and intr != self.intrinsics:
            other = ReconstructionOracle(self.scene, intr, self.min_observing_views, self.occlusion,
                                         self.dropout, self.occlusion_scale, self.seed)
            return other.reconstruct(views)
        masks = np.stack([self.visibility(v) for v in views])
        keep = np.flatnonzero(masks.sum(axis=0) >= self.min_observing_views)
        if keep.size == 0:
            raise OracleFailure(f"no point seen by {self.min_observing_views} of {len(views)} views")
        prov = tuple(frozenset(np.flatnonzero(masks[:, i]).tolist()) for i in keep)
        return PointCloud(self.scene.means[keep], self.scene.colors[keep], prov)


def occluded(pose: CameraPose, scene: SplatModel, depth: np.ndarray, targets: np.ndarray,
             occlusion_scale: float = 1.0, chunk: int = 512) -> np.ndarray:
    """Mask of ``targets`` hidden behind some nearer primitive centre."""
    cam = pose.world_to_camera(scene.means)
    front = depth > 0
    occ_idx = np.flatnonzero(front)
    dist = np.linalg.norm(cam[occ_idx], axis=1)
    rays = cam[occ_idx] / dist[:, None]
    occ_depth = depth[occ_idx]
    radius = np.arctan(occlusion_scale * scene.scales[occ_idx].mean(axis=1) / dist)
    cos_r = np.cos(radius)
    out = np.zeros(len(depth), dtype=bool)
    tgt = np.flatnonzero(targets)
    t_rays = cam[tgt] / np.linalg.norm(cam[tgt], axis=1, keepdims=True)
    for s in range(0, len(tgt), chunk):
        sl = slice(s, s + chunk)
        cosang = t_rays[sl] @ rays.T
        nearer = occ_depth[None, :] < depth[tgt[sl]][:, None]
        out[tgt[sl]] = np.any(nearer & (cosang > cos_r[None, :]), axis=1)
    return out


def occluded_bruteforce(pose: CameraPose, scene: SplatModel, i: int, occlusion_scale: float = 1.0) -> bool:
    """Scalar reference for :func:`occluded` used in tests."""
    cam = pose.world_to_camera(scene.means)
    ri = cam[i] / np.linalg.norm(cam[i])
    for j in range(len(scene)):
        if j == i or cam[j, 2] <= 0 or not cam[j, 2] < cam[i, 2]:
            continue
        dj = np.linalg.norm(cam[j])
        ang = np.arccos(np.clip(ri @ (cam[j] / dj), -1.0, 1.0))
        if ang < np.arctan(occlusion_scale * scene.scales[j].mean() / dj):
            return True
    return False


class GroundTruth:
    """Scene plus a per-pose cache of ground-truth renders."""

    def __init__(self, scene: SplatModel, intrinsics: CameraIntrinsics):
        self.scene = scene
        self.intrinsics = intrinsics
        self._images: Dict[bytes, np.ndarray] = {}

    def image(self, pose: CameraPose) -> np.ndarray:
        key = _pose_key(pose)
        img = self._images.get(key)
        if img is None:
            img = render_ground_truth(self.scene, pose, self.intrinsics)
            self._images[key] = img
        return img


def render_ground_truth(scene: SplatModel, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    from .render import render

    return render(scene, pose, intr)
