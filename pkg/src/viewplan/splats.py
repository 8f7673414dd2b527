"""Anisotropic 3D Gaussians and their initialisation from a point cloud."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud
from .geometry import PointCloud, quat_to_matrix

MIN_INIT_SCALE = 1e-4


@dataclass(frozen=True)
class Gaussian3D:
    mean: Tuple[float, float, float]
    rotation: Tuple[float, float, float, float]
    scale: Tuple[float, float, float]
    opacity: float
    color: Tuple[float, float, float]

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must have unit norm")
        if min(self.scale) <= 0:
            raise ValueError("scales must be positive")
        if not 0 < self.opacity <= 1:
            raise ValueError("opacity must lie in (0, 1]")

    @property
    def covariance(self) -> np.ndarray:
        return covariances(np.array([self.rotation]), np.array([self.scale]))[0]


def covariances(quats, scales) -> np.ndarray:
    """Stack of ``R S S^T R^T`` for ``(N, 4)`` quaternions and ``(N, 3)`` scales."""
    R = quat_to_matrix(np.asarray(quats, dtype=np.float64))
    M = R * np.asarray(scales, dtype=np.float64)[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def eval_gaussian(g: Gaussian3D, z) -> float:
    """Opacity-weighted Gaussian density at ``z`` (equals the opacity at the mean)."""
    d = np.asarray(z, dtype=np.float64) - np.asarray(g.mean)
    # work in the local frame: Sigma^{-1} = R S^{-2} R^T
    R = quat_to_matrix(np.asarray(g.rotation))
    local = (R.T @ d) / np.asarray(g.scale)
    return float(g.opacity * np.exp(-0.5 * float(local @ local)))


class SplatModel:
    """Array-backed set of Gaussians with a background color.

    Attributes are ``(N, ...)`` float arrays: ``means``, ``quats``
    (``w, x, y, z``), ``scales``, ``opacities`` and ``colors``.
    """

    def __init__(self, means, quats, scales, opacities, colors, background=(0.0, 0.0, 0.0)):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        self.background = np.asarray(background, dtype=np.float64).reshape(3)
        if n:
            if np.any(self.scales <= 0):
                raise ValueError("scales must be positive")
            if np.any(self.opacities <= 0) or np.any(self.opacities > 1):
                raise ValueError("opacities must lie in (0, 1]")
            if np.any(np.abs(np.linalg.norm(self.quats, axis=1) - 1) > 1e-9):
                raise ValueError("quaternions must have unit norm")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError("colors must lie in [0, 1]")

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)) -> "SplatModel":
        z = np.zeros((0, 3))
        return cls(z, np.zeros((0, 4)), z, np.zeros(0), z, background)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D], background=(0.0, 0.0, 0.0)) -> "SplatModel":
        gs = list(gaussians)
        if not gs:
            return cls.empty(background)
        return cls(
            [g.mean for g in gs], [g.rotation for g in gs], [g.scale for g in gs],
            [g.opacity for g in gs], [g.color for g in gs], background,
        )

    def __len__(self) -> int:
        return len(self.means)

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            tuple(self.means[i]), tuple(self.quats[i]), tuple(self.scales[i]),
            float(self.opacities[i]), tuple(self.colors[i]),
        )

    def __iter__(self):
        return (self.gaussian(i) for i in range(len(self)))

    def covariances(self) -> np.ndarray:
        return covariances(self.quats, self.scales)

    def replace(self, **fields) -> "SplatModel":
        kw = dict(means=self.means, quats=self.quats, scales=self.scales,
                  opacities=self.opacities, colors=self.colors, background=self.background)
        kw.update(fields)
        return SplatModel(**kw)

    def subset(self, index) -> "SplatModel":
        return SplatModel(self.means[index], self.quats[index], self.scales[index],
                          self.opacities[index], self.colors[index], self.background)


@dataclass(frozen=True)
class InitConfig:
    initial_opacity: float = 0.1
    neighbors: int = 3
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)


def init_from_cloud(pc: PointCloud, cfg: InitConfig = InitConfig()) -> SplatModel:
    """One isotropic Gaussian per cloud point.

    The scale is the mean distance to the ``cfg.neighbors`` nearest
    neighbours, clamped to ``[1e-4, diag / 10]`` where ``diag`` is the
    cloud's bounding-box diagonal.
    """
    n = len(pc)
    if n == 0:
        raise EmptyCloud("cannot initialise Gaussians from an empty cloud")
    pts = np.array(pc.positions)
    lo, hi = pc.bounds()
    upper = max(MIN_INIT_SCALE, float(np.linalg.norm(hi - lo)) / 10)
    k = min(cfg.neighbors, n - 1)
    if k == 0:
        scale = np.full(n, MIN_INIT_SCALE)
    else:
        dist, _ = cKDTree(pts).query(pts, k=k + 1)
        scale = np.clip(dist[:, 1:].mean(axis=1), MIN_INIT_SCALE, upper)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return SplatModel(
        pts, quats, np.repeat(scale[:, None], 3, axis=1),
        np.full(n, cfg.initial_opacity), np.array(pc.colors), cfg.background,
    )
