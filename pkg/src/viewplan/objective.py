"""View-set quality score: cloud density times voxel occupancy."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import OracleFailure
from .geometry import CameraPose, PointCloud, VoxelGrid, mark_points
from .scene import ReconstructionOracle


@dataclass(frozen=True)
class ObjectiveValue:
    density: float
    occupancy: float
    r_q: float
    noise_sigma: float = 0.0
    observation: float = 0.0

    def __post_init__(self):
        if self.density < 0:
            raise ValueError("density must be non-negative")
        if not 0.0 <= self.occupancy <= 1.0:
            raise ValueError("occupancy must lie in [0, 1]")

    @classmethod
    def zero(cls, noise_sigma: float = 0.0) -> "ObjectiveValue":
        return cls(0.0, 0.0, 0.0, noise_sigma, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def density(pc: PointCloud, normalizer: float = 1.0) -> float:
    if normalizer <= 0:
        raise ValueError("normalizer must be positive")
    return len(pc) / normalizer


def occupancy(grid: VoxelGrid, pc: PointCloud) -> float:
    marked = mark_points(grid, pc)
    return marked.occupied_count / marked.size


def score_cloud(pc: PointCloud, grid: VoxelGrid, normalizer: float = 1.0) -> ObjectiveValue:
    d = density(pc, normalizer)
    o = occupancy(grid, pc)
    rq = d * o
    return ObjectiveValue(d, o, rq, 0.0, rq)


def evaluate_rq(views: Sequence[CameraPose], oracle: ReconstructionOracle, grid: VoxelGrid,
                noise_sigma: float = 0.0, rng_seed: int = 0, normalizer: float = 1.0) -> ObjectiveValue:
    """Reconstruct a cloud from ``views`` and score it.

    The observation adds ``N(0, noise_sigma**2)`` noise drawn from a generator
    seeded with ``rng_seed``; with ``noise_sigma == 0`` it equals ``r_q``.
    Raises OracleFailure (carrying a zero value) when nothing triangulates.
    """
    if not views:
        raise ValueError("need at least one view")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    try:
        pc = oracle.reconstruct(list(views))
    except OracleFailure as exc:
        raise OracleFailure(str(exc), ObjectiveValue.zero(noise_sigma)) from None
    base = score_cloud(pc, grid.cleared(), normalizer)
    y = base.r_q
    if noise_sigma > 0:
        y = base.r_q + noise_sigma * float(np.random.default_rng(rng_seed).standard_normal())
    return ObjectiveValue(base.density, base.occupancy, base.r_q, noise_sigma, y)


def evaluate_or_zero(views, oracle, grid, noise_sigma=0.0, rng_seed=0, normalizer=1.0) -> ObjectiveValue:
    """Like :func:`evaluate_rq` but scores degenerate view sets as zero."""
    try:
        return evaluate_rq(views, oracle, grid, noise_sigma, rng_seed, normalizer)
    except OracleFailure as exc:
        return exc.value
