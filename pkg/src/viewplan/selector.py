"""Sequential view selection: the GP-driven active loop and its baselines.

Every method produces a :class:`SelectionRun` whose records hold the pose
picked at each slot and the score of the cumulative view set after it.
Slots 0 and 1 are the two initial views; slot ``k + 1`` is the ``k``-th
acquired view, so a budget ``T`` yields ``T + 2`` views.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyCandidates
from .geometry import CameraPose, VoxelGrid, look_at_rotation
from .gp import GpSurrogate, KernelBounds, KernelConfig, fit_hyperparameters
from .objective import ObjectiveValue, evaluate_or_zero
from .scene import ReconstructionOracle

log = logging.getLogger(__name__)

N_STARTS = 32
N_PROBES = 512
N_PROBE_STARTS = 8
GOLDEN = (math.sqrt(5) - 1) / 2


def pose_features(poses: Sequence[CameraPose], direction_weight: float = 0.0) -> np.ndarray:
    """Rows of ``[position, direction_weight * view_direction]``."""
    if not poses:
        return np.zeros((0, 6))
    pos = np.array([p.position for p in poses])
    dirs = np.array([p.view_direction for p in poses])
    return np.hstack([pos, direction_weight * dirs])


class Candidate(NamedTuple):
    id: Optional[int]
    pose: CameraPose


@dataclass(frozen=True)
class CandidateSet:
    """Either a finite pool of identified poses or a continuous position box.

    In continuous mode, ``orientation`` is ``"look-at-center"`` (cameras face
    ``target``) or ``"free"`` (yaw and pitch are searched as well).
    """

    mode: str = "finite"
    poses: Tuple[CameraPose, ...] = ()
    ids: Tuple[int, ...] = ()
    box_min: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    box_max: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: str = "look-at-center"
    target: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mode == "finite":
            poses = tuple(self.poses)
            ids = tuple(int(i) for i in self.ids) if self.ids else tuple(range(len(poses)))
            if len(ids) != len(poses):
                raise ValueError("one id per pose required")
            if len(set(ids)) != len(ids):
                raise ValueError("candidate ids must be unique")
            object.__setattr__(self, "poses", poses)
            object.__setattr__(self, "ids", ids)
        elif self.mode == "continuous":
            lo = tuple(float(v) for v in self.box_min)
            hi = tuple(float(v) for v in self.box_max)
            if not all(a < b for a, b in zip(lo, hi)):
                raise ValueError("continuous box must be nonempty")
            if self.orientation not in ("look-at-center", "free"):
                raise ValueError("orientation must be 'look-at-center' or 'free'")
            object.__setattr__(self, "box_min", lo)
            object.__setattr__(self, "box_max", hi)
            object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        else:
            raise ValueError(f"unknown candidate mode {self.mode!r}")

    @classmethod
    def finite(cls, poses, ids=None) -> "CandidateSet":
        return cls("finite", tuple(poses), tuple(ids) if ids is not None else ())

    @classmethod
    def continuous(cls, box_min, box_max, target=(0.0, 0.0, 0.0), orientation="look-at-center") -> "CandidateSet":
        return cls("continuous", box_min=box_min, box_max=box_max, target=target, orientation=orientation)

    @property
    def is_finite(self) -> bool:
        return self.mode == "finite"

    def __len__(self) -> int:
        return len(self.poses)

    def pose_by_id(self, cid: int) -> CameraPose:
        return self.poses[self.ids.index(cid)]

    def without(self, ids) -> "CandidateSet":
        drop = set(ids)
        keep = [k for k, i in enumerate(self.ids) if i not in drop]
        return CandidateSet.finite([self.poses[k] for k in keep], [self.ids[k] for k in keep])

    # continuous-mode helpers
    @property
    def n_vars(self) -> int:
        return 3 if self.orientation == "look-at-center" else 5

    def var_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = np.array(self.box_min), np.array(self.box_max)
        if self.orientation == "free":
            lo = np.append(lo, [-math.pi, -math.pi / 2])
            hi = np.append(hi, [math.pi, math.pi / 2])
        return lo, hi

    def directions(self, v: np.ndarray) -> np.ndarray:
        """Unit view directions for ``(m, n_vars)`` search variables."""
        if self.orientation == "free":
            yaw, pitch = v[:, 3], v[:, 4]
            return np.stack([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)], axis=1)
        d = np.asarray(self.target) - v[:, :3]
        n = np.linalg.norm(d, axis=1, keepdims=True)
        fallback = np.array([1.0, 0.0, 0.0])
        return np.where(n > 1e-12, d / np.where(n > 1e-12, n, 1.0), fallback)

    def features(self, v: np.ndarray, direction_weight: float) -> np.ndarray:
        return np.hstack([v[:, :3], direction_weight * self.directions(v)])

    def pose_from_vars(self, v: np.ndarray) -> CameraPose:
        v = np.asarray(v, dtype=np.float64)
        pos = v[:3]
        d = self.directions(v[None])[0]
        return CameraPose.from_rotation(pos, look_at_rotation(pos, pos + d))


def _best_index(mean: np.ndarray, var: np.ndarray, ids: Sequence[int]) -> int:
    """Argmax of mean; ties by higher variance, then lowest id."""
    order = np.lexsort((np.asarray(ids), -var, -mean))
    return int(order[0])


def acquire_next(gp: GpSurrogate, cands: CandidateSet, slot: int, chosen_ids=(), chosen_positions=(),
                 direction_weight: float = 0.0, seed: int = 0) -> Candidate:
    """Pose maximising the posterior mean at ``slot``.

    Finite pools skip ``chosen_ids``; continuous boxes run a multi-start
    coordinate-wise golden-section ascent and avoid ``chosen_positions``.
    """
    if len(gp) == 0:
        raise ValueError("surrogate has no observations")
    if cands.is_finite:
        pool = cands.without(chosen_ids) if chosen_ids else cands
        if len(pool) == 0:
            raise EmptyCandidates("no candidate poses left")
        mean, var = gp.posterior(pose_features(pool.poses, direction_weight), slot)
        k = _best_index(mean, var, pool.ids)
        return Candidate(pool.ids[k], pool.poses[k])
    v = _continuous_argmax(gp, cands, slot, chosen_positions, direction_weight, seed)
    return Candidate(None, cands.pose_from_vars(v))


def _continuous_argmax(gp, cands: CandidateSet, slot, chosen_positions, direction_weight, seed,
                       sweeps: int = 3, golden_iters: int = 18) -> np.ndarray:
    lo, hi = cands.var_bounds()
    rng = np.random.default_rng([seed, int(slot)])

    def mu(v):
        return gp.posterior(cands.features(v, direction_weight), slot)[0]

    probes = rng.uniform(lo, hi, size=(N_PROBES, len(lo)))
    pm = mu(probes)
    best_probe = np.argsort(-pm, kind="stable")[:N_PROBE_STARTS]
    rest = np.setdiff1d(np.arange(N_PROBES), best_probe)[: N_STARTS - N_PROBE_STARTS]
    x = probes[np.concatenate([best_probe, rest])].copy()
    fx = mu(x)
    width = (hi - lo) / 2
    for s in range(sweeps):
        w = width * 0.5 ** s
        for i in range(len(lo)):
            a = np.maximum(lo[i], x[:, i] - w[i])
            b = np.minimum(hi[i], x[:, i] + w[i])
            xi = _golden_section(lambda c: _mu_coord(mu, x, i, c), a, b, golden_iters)
            trial = x.copy()
            trial[:, i] = xi
            ft = mu(trial)
            better = ft > fx
            x[better] = trial[better]
            fx[better] = ft[better]
    chosen = np.asarray(chosen_positions, dtype=np.float64).reshape(-1, 3)
    for k in np.argsort(-fx, kind="stable"):
        if len(chosen) == 0 or np.min(np.linalg.norm(chosen - x[k, :3], axis=1)) > 1e-9:
            return x[k]
    # every optimum sits on a chosen pose: fall back to the best fresh probe
    for k in np.argsort(-pm, kind="stable"):
        if np.min(np.linalg.norm(chosen - probes[k, :3], axis=1)) > 1e-9:
            return probes[k]
    raise EmptyCandidates("could not find an unchosen continuous pose")


def _mu_coord(mu, x, i, c):
    trial = x.copy()
    trial[:, i] = c
    return mu(trial)


def _golden_section(f, a, b, iters):
    """Vectorised golden-section maximisation on intervals ``[a, b]``."""
    for _ in range(iters):
        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
        left = f(c) > f(d)
        b = np.where(left, d, b)
        a = np.where(left, a, c)
    return (a + b) / 2


@dataclass(frozen=True)
class SlotRecord:
    slot: int
    pose: CameraPose
    candidate_id: Optional[int]
    y: float
    value: ObjectiveValue
    kernel: Optional[KernelConfig] = None
    wall_time: float = 0.0


@dataclass
class SelectionRun:
    method: str
    budget: int
    seed: int
    records: List[SlotRecord] = field(default_factory=list)
    gp: Optional[GpSurrogate] = None

    @property
    def views(self) -> List[CameraPose]:
        return [r.pose for r in self.records]

    @property
    def ids(self) -> List[Optional[int]]:
        return [r.candidate_id for r in self.records]

    @property
    def rq_trace(self) -> np.ndarray:
        return np.array([r.value.r_q for r in self.records])

    @property
    def final(self) -> ObjectiveValue:
        return self.records[-1].value

    def prefix(self, n_views: int) -> List[CameraPose]:
        return self.views[:n_views]


@dataclass(frozen=True)
class ActiveSettings:
    """Knobs for the active loop beyond the budget and seed."""

    direction_weight: float = 0.0
    kernel: Optional[KernelConfig] = None
    bounds: Optional[KernelBounds] = None
    refit_every: int = 1
    restarts: int = 4
    normalize_y: bool = False
    noise_sigma: float = 0.0
    density_normalizer: float = 1.0


def _feature(pose: CameraPose, w: float) -> np.ndarray:
    return pose_features([pose], w)[0]


def initial_pair(cands: CandidateSet) -> Tuple[Candidate, Candidate]:
    """Two starting views: farthest-apart pool members, or antipodes of the box sphere."""
    if cands.is_finite:
        if len(cands) < 2:
            raise EmptyCandidates("need two candidates to initialise")
        order = np.argsort(cands.ids, kind="stable")
        pos = np.array([cands.poses[k].position for k in order])
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
        i, j = divmod(int(np.argmax(d2)), len(pos))
        a, b = sorted((i, j))
        ka, kb = order[a], order[b]
        return Candidate(cands.ids[ka], cands.poses[ka]), Candidate(cands.ids[kb], cands.poses[kb])
    lo, hi = np.array(cands.box_min), np.array(cands.box_max)
    center = (lo + hi) / 2
    r = float(np.min(hi - lo)) / 2
    target = np.asarray(cands.target)
    out = []
    for sgn in (1.0, -1.0):
        pos = center + sgn * np.array([r, 0.0, 0.0])
        out.append(Candidate(None, CameraPose.look_at(pos, target)))
    return out[0], out[1]


def _slot_seed(seed: int, slot: int):
    return [int(seed), int(slot)]


def run_active(oracle: ReconstructionOracle, cands: CandidateSet, grid: VoxelGrid, budget: int,
               seed: int = 0, settings: ActiveSettings = ActiveSettings()) -> SelectionRun:
    """GP surrogate loop with posterior-mean acquisition.

    Slot 0 is recorded with observation 0; slot 1 scores the initial pair;
    each later slot refits the kernel, acquires the posterior-mean maximiser
    at the next slot and scores the cumulative view set.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if cands.is_finite and len(cands) < budget + 2:
        raise EmptyCandidates(f"pool of {len(cands)} cannot supply {budget + 2} views")
    w = settings.direction_weight
    kernel = settings.kernel or KernelConfig(spatial_lengthscale=grid.diagonal / 4)
    bounds = settings.bounds or KernelBounds.for_scene(grid.diagonal)
    run = SelectionRun("active", budget, seed)

    def score(views, slot):
        return evaluate_or_zero(views, oracle, grid, settings.noise_sigma, _slot_seed(seed, slot),
                                settings.density_normalizer)

    t0 = time.perf_counter()
    c0, c1 = initial_pair(cands)
    v0 = score([c0.pose], 0)
    v0 = ObjectiveValue(v0.density, v0.occupancy, v0.r_q, v0.noise_sigma, 0.0)
    run.records.append(SlotRecord(0, c0.pose, c0.id, 0.0, v0, None, time.perf_counter() - t0))
    views = [c0.pose, c1.pose]
    t0 = time.perf_counter()
    v1 = score(views, 1)
    run.records.append(SlotRecord(1, c1.pose, c1.id, v1.observation, v1, None, time.perf_counter() - t0))
    gp = GpSurrogate(pose_features(views, w), [0, 1], [0.0, v1.observation], kernel, bounds, settings.normalize_y)
    chosen_ids = [c for c in (c0.id, c1.id) if c is not None]
    for slot in range(2, budget + 2):
        t0 = time.perf_counter()
        if (slot - 2) % max(1, settings.refit_every) == 0:
            gp = gp.with_kernel(fit_hyperparameters(gp, restarts=settings.restarts, seed=_slot_seed(seed, slot)))
        cand = acquire_next(gp, cands, slot, chosen_ids, [v.position for v in views], w, seed)
        views.append(cand.pose)
        if cand.id is not None:
            chosen_ids.append(cand.id)
        v = score(views, slot)
        run.records.append(SlotRecord(slot, cand.pose, cand.id, v.observation, v, gp.kernel,
                                      time.perf_counter() - t0))
        gp = gp.with_observation(_feature(cand.pose, w), slot, v.observation)
        log.debug("active slot %d id=%s r_q=%.4g", slot, cand.id, v.r_q)
    run.gp = gp
    return run


def _score_sequence(method, picks: Sequence[Candidate], oracle, grid, budget, seed, noise_sigma=0.0,
                    normalizer=1.0) -> SelectionRun:
    run = SelectionRun(method, budget, seed)
    views = []
    for slot, cand in enumerate(picks):
        t0 = time.perf_counter()
        views.append(cand.pose)
        v = evaluate_or_zero(views, oracle, grid, noise_sigma, _slot_seed(seed, slot), normalizer)
        run.records.append(SlotRecord(slot, cand.pose, cand.id, v.observation, v, None, time.perf_counter() - t0))
    return run


def run_passive_random(oracle, cands: CandidateSet, grid: VoxelGrid, budget: int, seeds: Sequence[int],
                       noise_sigma: float = 0.0, normalizer: float = 1.0) -> List[SelectionRun]:
    """Uniform sampling without replacement, one run per seed."""
    n = budget + 2
    if len(cands) < n:
        raise EmptyCandidates(f"pool of {len(cands)} cannot supply {n} views")
    runs = []
    for s in seeds:
        perm = np.random.default_rng(s).permutation(len(cands))[:n]
        picks = [Candidate(cands.ids[k], cands.poses[k]) for k in perm]
        runs.append(_score_sequence("passive-random", picks, oracle, grid, budget, s, noise_sigma, normalizer))
    return runs


def run_passive_standard(oracle, cands: CandidateSet, grid: VoxelGrid, budget: int,
                         noise_sigma: float = 0.0, normalizer: float = 1.0) -> SelectionRun:
    """The first ``budget + 2`` candidates in their stored capture order."""
    n = min(budget + 2, len(cands))
    picks = [Candidate(cands.ids[k], cands.poses[k]) for k in range(n)]
    return _score_sequence("passive-standard", picks, oracle, grid, budget, 0, noise_sigma, normalizer)


def farthest_view_order(features: np.ndarray, start: int, count: int) -> List[int]:
    """Greedy max-min-distance ordering of feature rows; ties go to the lowest index."""
    n = len(features)
    count = min(count, n)
    order = [start]
    dmin = np.linalg.norm(features - features[start], axis=1)
    dmin[start] = -np.inf
    while len(order) < count:
        k = int(np.argmax(dmin))
        order.append(k)
        dmin = np.minimum(dmin, np.linalg.norm(features - features[k], axis=1))
        dmin[order] = -np.inf
    return order


def run_fvs(cands: CandidateSet, grid: VoxelGrid, oracle, budget: int, seed: int = 0,
            direction_weight: float = 0.0, noise_sigma: float = 0.0, normalizer: float = 1.0) -> SelectionRun:
    """Farthest view sampling from a seeded start, scored per slot for logging."""
    n = budget + 2
    if len(cands) < n:
        raise EmptyCandidates(f"pool of {len(cands)} cannot supply {n} views")
    by_id = np.argsort(cands.ids, kind="stable")
    poses = [cands.poses[k] for k in by_id]
    ids = [cands.ids[k] for k in by_id]
    start = int(np.random.default_rng(seed).integers(len(poses)))
    order = farthest_view_order(pose_features(poses, direction_weight), start, n)
    picks = [Candidate(ids[k], poses[k]) for k in order]
    return _score_sequence("fvs", picks, oracle, grid, budget, seed, noise_sigma, normalizer)


LOG_FIELDS = (
    "slot", "candidate_id", "px", "py", "pz", "qw", "qx", "qy", "qz", "y", "density", "occupancy", "r_q",
    "spatial_lengthscale", "spatial_variance", "time_lengthscale", "noise_variance", "wall_time",
)


def run_log_rows(run: SelectionRun) -> List[dict]:
    rows = []
    for r in run.records:
        row = {"slot": r.slot, "candidate_id": "" if r.candidate_id is None else r.candidate_id}
        row.update(zip(("px", "py", "pz", "qw", "qx", "qy", "qz"), (repr(float(v)) for v in r.pose.as_array())))
        row.update(y=repr(r.y), density=repr(r.value.density), occupancy=repr(r.value.occupancy),
                   r_q=repr(r.value.r_q))
        k = r.kernel.to_dict() if r.kernel else {}
        for name in ("spatial_lengthscale", "spatial_variance", "time_lengthscale", "noise_variance"):
            row[name] = repr(k[name]) if name in k else ""
        row["wall_time"] = f"{r.wall_time:.6f}"
        rows.append(row)
    return rows


def write_run_log(run: SelectionRun, path) -> None:
    """Per-slot CSV log; every method writes the same columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(run_log_rows(run))
