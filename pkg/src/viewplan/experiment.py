"""Benchmark runner: selection methods, splat training and held-out evaluation.

A config lists one or more scenes.  For each scene the candidate pool is
generated once; each test split holds out ``n_test`` poses, runs every
requested method on the rest, trains a splat model from each method's final
cloud and scores it on the held-out views.  The report is a JSON document
that is byte-identical across reruns of the same config apart from its
``wall_time`` block.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .errors import ConfigInvalid, IoFailure, ParseError, ViewplanError
from .geometry import CameraIntrinsics, CameraPose, PointCloud, VoxelGrid
from .gp import KernelBounds
from .io import read_point_cloud, write_point_cloud
from .metrics import psnr, ssim
from .render import TrainConfig, render, train
from .scene import GroundTruth, ReconstructionOracle, SceneSpec, generate_scene
from .selector import (ActiveSettings, CandidateSet, SelectionRun, run_active, run_fvs,
                       run_passive_random, run_passive_standard, write_run_log)
from .splats import InitConfig, init_from_cloud

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("active", "passive-random", "passive-standard", "fvs")
TRACE_METRICS = ("r_q", "psnr", "ssim")
PRESET_DIR = Path(__file__).parent / "presets"


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class PoolSpec:
    """Candidate poses on a (possibly jittered) horizontal ring.

    Pose ``k`` sits at azimuth ``2 pi k / count`` plus uniform jitter, with
    radius and height drawn uniformly from their ranges.  ``aim="center"``
    looks at the origin, ``aim="across"`` at the mirrored position (cameras
    inside a room looking at the far wall); both add uniform target jitter.
    Poses are stored in azimuth order, which is the capture order used by the
    sequential baseline.
    """

    count: int = 120
    radius: Tuple[float, float] = (3.0, 3.0)
    height: Tuple[float, float] = (0.0, 0.0)
    azimuth_jitter: float = 0.0
    look_jitter: float = 0.0
    aim: str = "center"
    seed: int = 0

    def poses(self) -> List[CameraPose]:
        rng = np.random.default_rng(self.seed)
        out = []
        for k in range(self.count):
            a = 2 * np.pi * k / self.count + rng.uniform(-self.azimuth_jitter, self.azimuth_jitter)
            r = rng.uniform(*self.radius)
            h = rng.uniform(*self.height)
            p = np.array([r * np.cos(a), r * np.sin(a), h])
            base = -p if self.aim == "across" else np.zeros(3)
            out.append(CameraPose.look_at(p, base + rng.uniform(-self.look_jitter, self.look_jitter, 3)))
        return out


@dataclass(frozen=True)
class ScenePlan:
    name: str
    scene: SceneSpec
    candidates: PoolSpec
    grid_resolution: Tuple[int, int, int] = (16, 16, 16)
    held_out: Optional[Tuple[Tuple[int, ...], ...]] = None  # explicit test ids per split


@dataclass(frozen=True)
class OracleSpec:
    min_observing_views: int = 2
    occlusion: bool = True
    occlusion_scale: float = 1.0
    dropout: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class IntrinsicsSpec:
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    near: float = 0.05
    far: float = 100.0

    def build(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.fov_deg, self.near, self.far)


@dataclass(frozen=True)
class ActiveSpec:
    direction_weight: float = 0.0
    restarts: int = 4
    refit_every: int = 1
    normalize_y: bool = False


@dataclass(frozen=True)
class TraceSpec:
    stride: int = 5
    render: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    scenes: Tuple[ScenePlan, ...]
    budget: int = 20
    n_test: int = 10
    n_splits: int = 3
    split_seed: int = 0
    methods: Tuple[str, ...] = METHODS
    random_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    intrinsics: IntrinsicsSpec = IntrinsicsSpec()
    oracle: OracleSpec = OracleSpec()
    density_normalizer: float = 1.0
    noise_sigma: float = 0.0
    active: ActiveSpec = ActiveSpec()
    kernel_bounds: Optional[Dict[str, Tuple[float, float]]] = None
    train: TrainConfig = TrainConfig()
    init: InitConfig = InitConfig()
    trace: TraceSpec = TraceSpec()
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """Hash of everything that can influence results (the output directory cannot)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def validate(cfg: ExperimentConfig) -> None:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigInvalid(f"schema_version must be {SCHEMA_VERSION}, got {cfg.schema_version}")
    if not cfg.scenes:
        raise ConfigInvalid("scenes: at least one scene is required")
    names = [s.name for s in cfg.scenes]
    if len(set(names)) != len(names):
        raise ConfigInvalid("scenes: names must be unique")
    if not cfg.methods:
        raise ConfigInvalid("methods: at least one method is required")
    unknown = [m for m in cfg.methods if m not in METHODS]
    if unknown:
        raise ConfigInvalid(f"methods: unknown method(s) {unknown}; known {list(METHODS)}")
    if len(set(cfg.methods)) != len(cfg.methods):
        raise ConfigInvalid("methods: duplicates are not allowed")
    if cfg.budget < 1:
        raise ConfigInvalid("budget must be >= 1")
    if cfg.n_test < 1:
        raise ConfigInvalid("n_test must be >= 1")
    if cfg.n_splits < 1:
        raise ConfigInvalid("n_splits must be >= 1")
    if "passive-random" in cfg.methods and not cfg.random_seeds:
        raise ConfigInvalid("random_seeds: passive-random needs at least one seed")
    if cfg.trace.stride < 1:
        raise ConfigInvalid("trace.stride must be >= 1")
    if cfg.density_normalizer <= 0:
        raise ConfigInvalid("density_normalizer must be positive")
    for plan in cfg.scenes:
        need = cfg.budget + 2 + cfg.n_test
        if need > plan.candidates.count:
            raise ConfigInvalid(
                f"scene {plan.name}: budget + 2 + n_test = {need} exceeds the candidate pool of "
                f"{plan.candidates.count}")
        if plan.held_out is not None:
            if len(plan.held_out) != cfg.n_splits:
                raise ConfigInvalid(f"scene {plan.name}: held_out needs one id list per split ({cfg.n_splits})")
            for ids in plan.held_out:
                if len(set(ids)) != cfg.n_test or not all(0 <= i < plan.candidates.count for i in ids):
                    raise ConfigInvalid(f"scene {plan.name}: each held_out list needs {cfg.n_test} distinct "
                                        f"ids below {plan.candidates.count}")
        if plan.candidates.aim not in ("center", "across"):
            raise ConfigInvalid(f"scene {plan.name}: candidates.aim must be 'center' or 'across'")


def _build(cls, data, where: str, nested: Dict[str, Any] = None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigInvalid(f"{where}: unknown key(s) {extra}")
    kw = {}
    for k, v in data.items():
        if nested and k in nested:
            v = nested[k](v, f"{where}.{k}")
        elif isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kw[k] = v
    try:
        return cls(**kw)
    except ConfigInvalid:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{where}: {exc}") from None


def _scene_plan(data, where):
    return _build(ScenePlan, data, where, {
        "scene": lambda v, w: _build(SceneSpec, v, w),
        "candidates": lambda v, w: _build(PoolSpec, v, w),
    })


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigInvalid("config: expected a mapping at the top level")
    if "schema_version" not in data:
        raise ConfigInvalid("schema_version is required")
    if "scenes" not in data or not isinstance(data["scenes"], list):
        raise ConfigInvalid("scenes: a list of scenes is required")
    return _build(ExperimentConfig, data, "config", {
        "scenes": lambda v, w: tuple(_scene_plan(s, f"{w}[{i}]") for i, s in enumerate(v)),
        "intrinsics": lambda v, w: _build(IntrinsicsSpec, v, w),
        "oracle": lambda v, w: _build(OracleSpec, v, w),
        "active": lambda v, w: _build(ActiveSpec, v, w),
        "trace": lambda v, w: _build(TraceSpec, v, w),
        "train": lambda v, w: _build(TrainConfig, v, w),
        "init": lambda v, w: _build(InitConfig, v, w),
        "kernel_bounds": lambda v, w: None if v is None else {k: tuple(x) for k, x in v.items()},
    })


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"{path}: not valid YAML: {exc}") from None
    return config_from_dict(data)


def preset_path(name: str) -> Path:
    path = PRESET_DIR / f"{name}.yaml"
    if not path.is_file():
        known = sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))
        raise ConfigInvalid(f"unknown preset {name!r}; available {known}")
    return path


def load_preset(name: str) -> ExperimentConfig:
    return load_config(preset_path(name))


# ---------------------------------------------------------------- report


@dataclass
class RunReport:
    """Deterministic results plus the wall-time block kept apart from them."""

    results: dict
    wall_time: Dict[str, float] = field(default_factory=dict)

    def to_json(self, include_wall_time: bool = True) -> str:
        doc = dict(self.results)
        if include_wall_time:
            doc["wall_time"] = self.wall_time
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def save(self, path) -> None:
        try:
            Path(path).write_text(self.to_json())
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunReport":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParseError(f"report is not valid JSON: {exc.msg}", exc.lineno) from None
        wall = doc.pop("wall_time", {})
        return cls(doc, wall)

    @property
    def scenes(self) -> Dict[str, dict]:
        return self.results["scenes"]


def trace_iterations(budget: int, stride: int) -> List[int]:
    """Iterations ``0, stride, 2 * stride, ...`` always ending at ``budget``."""
    its = list(range(0, budget + 1, stride))
    if its[-1] != budget:
        its.append(budget)
    return its


def iterations_to_fraction(trace: Sequence[float], frac: float = 0.95) -> int:
    """First iteration whose value reaches ``frac`` of the final one."""
    tr = np.asarray(trace, dtype=float)
    hit = np.nonzero(tr >= frac * tr[-1])[0]
    return int(hit[0])


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


# ---------------------------------------------------------------- runner


class _SceneContext:
    def __init__(self, cfg: ExperimentConfig, plan: ScenePlan):
        self.cfg = cfg
        self.plan = plan
        self.intr = cfg.intrinsics.build()
        self.model = generate_scene(plan.scene)
        lo, hi = (np.asarray(b) for b in plan.scene.bbox)
        self.grid = VoxelGrid(lo, hi, tuple(plan.grid_resolution))
        o = cfg.oracle
        self.oracle = ReconstructionOracle(self.model, self.intr, o.min_observing_views, o.occlusion,
                                           o.dropout, o.occlusion_scale, o.seed)
        self.gt = GroundTruth(self.model, self.intr)
        self.poses = plan.candidates.poses()

    def split(self, s: int) -> List[int]:
        if self.plan.held_out is not None:
            return sorted(int(i) for i in self.plan.held_out[s])
        rng = np.random.default_rng([self.cfg.split_seed, s])
        return sorted(int(i) for i in rng.choice(len(self.poses), self.cfg.n_test, replace=False))

    def evaluate(self, views: Sequence[CameraPose], tests: Sequence[CameraPose]) -> Dict[str, Optional[float]]:
        """Train a splat model from the views' cloud and score it on ``tests``."""
        cloud = self.oracle.reconstruct(views)
        model = init_from_cloud(cloud, dataclasses.replace(self.cfg.init, background=self.plan.scene.background))
        model = train(model, [(v, self.gt.image(v)) for v in views], self.intr, self.cfg.train)
        p, s = [], []
        for pose in tests:
            img, ref = render(model, pose, self.intr), self.gt.image(pose)
            p.append(psnr(img, ref))
            s.append(ssim(img, ref))
        return {"psnr": float(np.mean(p)), "ssim": float(np.mean(s)), "lpips": None}


def _selection(ctx: _SceneContext, method: str, cands: CandidateSet, s: int) -> List[SelectionRun]:
    cfg = ctx.cfg
    T, norm, noise = cfg.budget, cfg.density_normalizer, cfg.noise_sigma
    if method == "active":
        bounds = KernelBounds.for_scene(ctx.grid.diagonal, **(cfg.kernel_bounds or {}))
        a = cfg.active
        settings = ActiveSettings(a.direction_weight, None, bounds, a.refit_every, a.restarts, a.normalize_y,
                                  noise, norm)
        return [run_active(ctx.oracle, cands, ctx.grid, T, seed=s, settings=settings)]
    if method == "passive-standard":
        return [run_passive_standard(ctx.oracle, cands, ctx.grid, T, noise, norm)]
    if method == "fvs":
        return [run_fvs(cands, ctx.grid, ctx.oracle, T, seed=s, direction_weight=cfg.active.direction_weight,
                        noise_sigma=noise, normalizer=norm)]
    return run_passive_random(ctx.oracle, cands, ctx.grid, T, cfg.random_seeds, noise, norm)


def _run_result(ctx: _SceneContext, run: SelectionRun, tests, held_out: set) -> dict:
    cfg = ctx.cfg
    leaked = held_out.intersection(run.ids)
    if leaked:
        raise RuntimeError(f"held-out poses {sorted(leaked)} were selected")
    rq = [float(v) for v in run.rq_trace[1:]]  # iteration k is slot k + 1
    final = run.final
    res = {
        "seed": run.seed,
        "views": list(run.ids),
        "r_q_per_iteration": rq,
        "iterations_to_95": iterations_to_fraction(rq),
        "final": {"r_q": float(final.r_q), "density": float(final.density),
                  "occupancy": float(final.occupancy)},
    }
    res["final"].update(ctx.evaluate(run.views, tests))
    its = trace_iterations(cfg.budget, cfg.trace.stride)
    trace = {"iteration": its, "r_q": [rq[k] for k in its]}
    if cfg.trace.render:
        scores = [res["final"] if k == cfg.budget else _safe_eval(ctx, run.prefix(k + 2), tests) for k in its]
        trace["psnr"] = [sc["psnr"] for sc in scores]
        trace["ssim"] = [sc["ssim"] for sc in scores]
    else:
        trace["psnr"] = [None] * len(its)
        trace["ssim"] = [None] * len(its)
    res["trace"] = trace
    return res


def _safe_eval(ctx, views, tests):
    try:
        return ctx.evaluate(views, tests)
    except ViewplanError:
        return {"psnr": None, "ssim": None, "lpips": None}


def _log_name(method: str, seed: Optional[int] = None) -> str:
    return f"{method}.csv" if seed is None else f"{method}-seed{seed}.csv"


def _run_split(ctx: _SceneContext, s: int, outdir: Optional[Path], wall: Dict[str, float]) -> dict:
    cfg = ctx.cfg
    test_ids = ctx.split(s)
    held = set(test_ids)
    keep = [i for i in range(len(ctx.poses)) if i not in held]
    cands = CandidateSet.finite([ctx.poses[i] for i in keep], keep)
    tests = [ctx.poses[i] for i in test_ids]
    split_dir = None
    if outdir is not None:
        split_dir = outdir / ctx.plan.name / f"split{s}"
        split_dir.mkdir(parents=True, exist_ok=True)
    methods = {}
    for method in cfg.methods:
        t0 = time.perf_counter()
        try:
            runs = _selection(ctx, method, cands, s)
            results = []
            for run in runs:
                seed = run.seed if method == "passive-random" else None
                name = _log_name(method, seed)
                if split_dir is not None:
                    write_run_log(run, split_dir / name)
                r = _run_result(ctx, run, tests, held)
                r["log"] = f"{ctx.plan.name}/split{s}/{name}"
                results.append(r)
            if method == "passive-random":
                best = max(range(len(results)), key=lambda k: (results[k]["final"]["psnr"], -k))
                entry = dict(results[best])
                entry["best_seed"] = results[best]["seed"]
                entry["runs"] = results
                entry["mean_final_r_q"] = float(np.mean([r["final"]["r_q"] for r in results]))
                entry["mean_iterations_to_95"] = float(np.mean([r["iterations_to_95"] for r in results]))
            else:
                entry = results[0]
            entry["error"] = None
        except (ViewplanError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("%s split %d %s failed: %s", ctx.plan.name, s, method, exc)
            entry = {"error": f"{type(exc).__name__}: {exc}"}
        wall[f"{ctx.plan.name}/split{s}/{method}"] = time.perf_counter() - t0
        methods[method] = entry
    return {"split": s, "test_ids": test_ids, "methods": methods}


def _summarize(splits: List[dict], methods: Sequence[str]) -> dict:
    out = {}
    for m in methods:
        entries = [sp["methods"][m] for sp in splits if sp["methods"][m].get("error") is None]
        if not entries:
            out[m] = {"final_r_q": None, "psnr": None, "ssim": None, "lpips": None, "iterations_to_95": None}
            continue
        row = {
            "final_r_q": _median(e["final"]["r_q"] for e in entries),
            "psnr": _median(e["final"]["psnr"] for e in entries),
            "ssim": _median(e["final"]["ssim"] for e in entries),
            "lpips": None,
            "iterations_to_95": _median(e["iterations_to_95"] for e in entries),
        }
        if m == "passive-random":
            row["mean_final_r_q"] = _median(e["mean_final_r_q"] for e in entries)
            row["mean_iterations_to_95"] = _median(e["mean_iterations_to_95"] for e in entries)
        out[m] = row
    return out


def run_experiment(cfg: ExperimentConfig, outdir=None) -> RunReport:
    """Run every scene and split; write the report and run logs under ``outdir``.

    ``outdir`` defaults to ``cfg.output_dir``; pass ``False`` to skip writing.
    """
    validate(cfg)
    if outdir is None:
        outdir = cfg.output_dir
    out = Path(outdir) if outdir is not False else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create {out}: {exc}") from exc
    wall: Dict[str, float] = {}
    t_all = time.perf_counter()
    scenes = {}
    for plan in cfg.scenes:
        ctx = _SceneContext(cfg, plan)
        splits = [_run_split(ctx, s, out, wall) for s in range(cfg.n_splits)]
        scenes[plan.name] = {
            "generator": plan.scene.generator,
            "n_primitives": len(ctx.model),
            "pool_size": len(ctx.poses),
            "splits": splits,
            "summary": _summarize(splits, cfg.methods),
        }
        log.info("scene %s done", plan.name)
    wall["total"] = time.perf_counter() - t_all
    results = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.digest(),
        "config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
        "protocol": {
            "test_splits": cfg.n_splits,
            "held_out_per_split": cfg.n_test,
            "note": (f"metrics are medians over {cfg.n_splits} held-out test splits; the reference "
                     "protocol averages five splits of 20 views"),
            "passive_random": f"best of {len(cfg.random_seeds)} seeds by final PSNR",
            "lpips": "not computed (null)",
        },
        "methods": list(cfg.methods),
        "scenes": scenes,
    }
    report = RunReport(results, wall)
    if out is not None:
        report.save(out / "report.json")
    return report


# ---------------------------------------------------------------- outputs


def emit_trace_plots(report: RunReport, outdir) -> List[Path]:
    """Write ``<scene>_split<k>_<metric>.csv`` tables: iteration plus one column per method.

    Metrics with no values (render traces disabled) are skipped.
    """
    out = Path(outdir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for scene, body in report.scenes.items():
            for sp in body["splits"]:
                ok = [m for m in report.results["methods"] if sp["methods"][m].get("error") is None]
                if not ok:
                    continue
                its = sp["methods"][ok[0]]["trace"]["iteration"]
                for metric in TRACE_METRICS:
                    cols = {m: sp["methods"][m]["trace"][metric] for m in ok}
                    if all(v is None for c in cols.values() for v in c):
                        continue
                    path = out / f"{scene}_split{sp['split']}_{metric}.csv"
                    with open(path, "w", newline="") as fh:
                        w = csv.writer(fh)
                        w.writerow(["iteration"] + ok)
                        for row, it in enumerate(its):
                            w.writerow([it] + ["" if cols[m][row] is None else repr(cols[m][row]) for m in ok])
                    written.append(path)
    except OSError as exc:
        raise IoFailure(f"cannot write traces to {out}: {exc}") from exc
    return written


def ingest_external_cloud(path) -> PointCloud:
    """Load an externally produced ASCII PLY cloud for splat initialisation."""
    return read_point_cloud(path)


def scene_cloud(model) -> PointCloud:
    """Primitive centres and colors of a ground-truth scene as a point cloud."""
    return PointCloud(model.means, model.colors)


def export_scene(plan: ScenePlan, path) -> None:
    write_point_cloud(path, scene_cloud(generate_scene(plan.scene)))
