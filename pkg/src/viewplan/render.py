"""CPU forward rasteriser for Gaussian splats and an opacity/color trainer.

Each visible Gaussian is projected to a 2D Gaussian with the EWA local
affine approximation, its footprint is truncated at the 3-sigma ellipse, and
pixels composite their Gaussians front to back::

    c(p) = sum_i c_i a_i prod_{j<i} (1 - a_j) + background * prod_j (1 - a_j)

with ``a_i = min(0.999, alpha_i * G2D_i(p))``.  A pixel stops compositing as
soon as its transmittance drops below ``1e-4``.  Pixel ``(x, y)`` samples the
image plane at integer coordinates, so the principal point falls on a pixel
centre when it is integral.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .geometry import CameraIntrinsics, CameraPose
from .splats import Gaussian3D, SplatModel, covariances

log = logging.getLogger(__name__)

ALPHA_CLAMP = 0.999
T_MIN = 1e-4
DILATION = 0.3
SIGMA_CUTOFF = 3.0


@dataclass(frozen=True)
class Projected2DGaussian:
    center: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


def _project_arrays(means, covs, pose: CameraPose, intr: CameraIntrinsics, max_scale, dilation=DILATION):
    """Vectorised EWA projection; returns (keep mask, centers, cov2d, depth)."""
    W = pose.rotation
    cam = pose.world_to_camera(means)
    tx, ty, tz = cam[:, 0], cam[:, 1], cam[:, 2]
    ok = tz >= intr.near_plane
    z = np.where(ok, tz, 1.0)
    fx, fy = intr.focal_x, intr.focal_y
    cx, cy = intr.principal_point
    u = fx * tx / z + cx
    v = fy * ty / z + cy
    margin = SIGMA_CUTOFF * max_scale * max(fx, fy) / z
    ok &= (tz <= intr.far_plane)
    ok &= (u >= -margin) & (u <= intr.image_width + margin)
    ok &= (v >= -margin) & (v <= intr.image_height + margin)
    n = len(means)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * tx / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * ty / (z * z)
    M = J @ W
    cov2d = M @ covs @ np.swapaxes(M, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2)) + dilation * np.eye(2)
    return ok, np.stack([u, v], axis=1), cov2d, tz


def project(g: Gaussian3D, pose: CameraPose, intr: CameraIntrinsics,
            dilation: float = DILATION) -> Optional[Projected2DGaussian]:
    """Screen-space 2D Gaussian for ``g``, or ``None`` when culled."""
    cov = g.covariance[None]
    ok, centers, cov2d, depth = _project_arrays(np.array([g.mean]), cov, pose, intr,
                                                np.array([max(g.scale)]), dilation)
    if not ok[0]:
        return None
    return Projected2DGaussian(centers[0], cov2d[0], float(depth[0]), g.opacity, np.array(g.color))


@dataclass(frozen=True)
class RasterPlan:
    """Per-view list of (pixel, Gaussian, footprint value) entries.

    Entries are sorted by pixel, then depth, then Gaussian index;
    ``offsets[p]:offsets[p + 1]`` spans pixel ``p`` (row-major).
    """

    width: int
    height: int
    offsets: np.ndarray
    gid: np.ndarray
    gval: np.ndarray

    @property
    def n_entries(self) -> int:
        return len(self.gid)


def build_plan(model: SplatModel, pose: CameraPose, intr: CameraIntrinsics) -> RasterPlan:
    """Geometry-only rasterisation; valid while means/scales/rotations stay fixed."""
    H, Wd = intr.image_height, intr.image_width
    n_pix = H * Wd
    if len(model) == 0:
        return RasterPlan(Wd, H, np.zeros(n_pix + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
    covs = model.covariances()
    ok, centers, cov2d, depth = _project_arrays(model.means, covs, pose, intr, model.scales.max(axis=1))
    vis = np.flatnonzero(ok)
    c = centers[vis]
    S = cov2d[vis]
    det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] ** 2
    conic = np.stack([S[:, 1, 1] / det, -S[:, 0, 1] / det, S[:, 0, 0] / det], axis=1)
    mid = 0.5 * (S[:, 0, 0] + S[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    r = SIGMA_CUTOFF * np.sqrt(lam)
    x0 = np.maximum(0, np.ceil(c[:, 0] - r)).astype(np.int64)
    x1 = np.minimum(Wd - 1, np.floor(c[:, 0] + r)).astype(np.int64)
    y0 = np.maximum(0, np.ceil(c[:, 1] - r)).astype(np.int64)
    y1 = np.minimum(H - 1, np.floor(c[:, 1] + r)).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    count = bw * bh
    total = int(count.sum())
    owner = np.repeat(np.arange(len(vis)), count)
    local = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
    px = x0[owner] + local % bw[owner]
    py = y0[owner] + local // bw[owner]
    dx = px - c[owner, 0]
    dy = py - c[owner, 1]
    q = conic[owner]
    d2 = q[:, 0] * dx * dx + 2 * q[:, 1] * dx * dy + q[:, 2] * dy * dy
    keep = d2 <= SIGMA_CUTOFF ** 2
    owner, px, py, d2 = owner[keep], px[keep], py[keep], d2[keep]
    gid = vis[owner]
    pix = py * Wd + px
    order = np.lexsort((gid, depth[gid], pix))
    pix, gid, gval = pix[order], gid[order], np.exp(-0.5 * d2[order])
    offsets = np.zeros(n_pix + 1, dtype=np.int64)
    np.cumsum(np.bincount(pix, minlength=n_pix), out=offsets[1:])
    return RasterPlan(Wd, H, offsets, gid.astype(np.int64), gval)


@njit(cache=True)
def _composite(offsets, gid, gval, opac, colors, bg, out, t_before):
    n_pix = len(offsets) - 1
    for p in range(n_pix):
        T = 1.0
        r = 0.0
        g = 0.0
        b = 0.0
        for e in range(offsets[p], offsets[p + 1]):
            if T < 1e-4:
                t_before[e] = -1.0
                continue
            k = gid[e]
            a = min(0.999, opac[k] * gval[e])
            t_before[e] = T
            w = a * T
            r += colors[k, 0] * w
            g += colors[k, 1] * w
            b += colors[k, 2] * w
            T *= 1.0 - a
        out[p, 0] = r + bg[0] * T
        out[p, 1] = g + bg[1] * T
        out[p, 2] = b + bg[2] * T
        out[p, 3] = T


@njit(cache=True)
def _backward(offsets, gid, gval, opac, colors, bg, t_before, t_final, dl_dc, g_opac, g_col):
    n_pix = len(offsets) - 1
    for p in range(n_pix):
        s0 = bg[0] * t_final[p]
        s1 = bg[1] * t_final[p]
        s2 = bg[2] * t_final[p]
        d0 = dl_dc[p, 0]
        d1 = dl_dc[p, 1]
        d2 = dl_dc[p, 2]
        for e in range(offsets[p + 1] - 1, offsets[p] - 1, -1):
            T = t_before[e]
            if T < 0.0:
                continue
            k = gid[e]
            raw = opac[k] * gval[e]
            a = min(0.999, raw)
            inv = 1.0 / (1.0 - a)
            w = a * T
            c0 = colors[k, 0]
            c1 = colors[k, 1]
            c2 = colors[k, 2]
            ga = d0 * (c0 * T - s0 * inv) + d1 * (c1 * T - s1 * inv) + d2 * (c2 * T - s2 * inv)
            if raw < 0.999:
                g_opac[k] += ga * gval[e]
            g_col[k, 0] += d0 * w
            g_col[k, 1] += d1 * w
            g_col[k, 2] += d2 * w
            s0 += c0 * w
            s1 += c1 * w
            s2 += c2 * w


@njit(cache=True)
def _weights(offsets, gid, gval, opac, out):
    n_pix = len(offsets) - 1
    for p in range(n_pix):
        T = 1.0
        for e in range(offsets[p], offsets[p + 1]):
            if T < 1e-4:
                out[e] = 0.0
                continue
            a = min(0.999, opac[gid[e]] * gval[e])
            out[e] = a * T
            T *= 1.0 - a


def _forward(plan: RasterPlan, opacities, colors, background):
    buf = np.empty((plan.width * plan.height, 4))
    t_before = np.empty(plan.n_entries)
    _composite(plan.offsets, plan.gid, plan.gval, np.ascontiguousarray(opacities, dtype=np.float64),
               np.ascontiguousarray(colors, dtype=np.float64), np.asarray(background, dtype=np.float64),
               buf, t_before)
    return buf, t_before


def composite(plan: RasterPlan, opacities, colors, background) -> np.ndarray:
    """Image ``(H, W, 3)`` for a precomputed plan and per-Gaussian appearance."""
    buf, _ = _forward(plan, opacities, colors, background)
    return buf[:, :3].reshape(plan.height, plan.width, 3)


def compositing_weights(plan: RasterPlan, opacities) -> np.ndarray:
    """Weight ``a_i * T_i`` of every plan entry (0 after early termination)."""
    out = np.empty(plan.n_entries)
    _weights(plan.offsets, plan.gid, plan.gval, np.ascontiguousarray(opacities, dtype=np.float64), out)
    return out


def render(model: SplatModel, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    """Render ``model`` from ``pose``; returns an ``(H, W, 3)`` float image."""
    plan = build_plan(model, pose, intr)
    return composite(plan, model.opacities, model.colors, model.background)


# --- training -------------------------------------------------------------

TRAINABLE = ("opacity", "color")
OPACITY_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    """Full-batch gradient descent on the L1 photometric loss.

    A step that raises the loss is retried with half the learning rate (up to
    ``max_halvings`` times); accepted steps grow it by ``growth``.
    """

    iterations: int = 40
    learning_rate: float = 200.0
    loss: str = "l1"
    trainable: Tuple[str, ...] = TRAINABLE
    growth: float = 1.25
    max_halvings: int = 12

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss != "l1":
            raise ValueError("only the l1 loss is supported")
        bad = set(self.trainable) - set(TRAINABLE)
        if bad:
            raise ValueError(f"unknown trainable parameters: {sorted(bad)}")


def logit(p):
    p = np.clip(p, OPACITY_EPS, 1 - OPACITY_EPS)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def l1_loss(plans: Sequence[RasterPlan], targets: Sequence[np.ndarray], opacities, colors, background) -> float:
    total = 0.0
    count = 0
    for plan, tgt in zip(plans, targets):
        img = composite(plan, opacities, colors, background)
        total += float(np.abs(img - tgt).sum())
        count += img.size
    return total / count


def l1_loss_and_grad(plans, targets, theta, colors, background):
    """L1 loss with gradients w.r.t. opacity logits ``theta`` and colors."""
    opac = sigmoid(np.asarray(theta, dtype=np.float64))
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    count = sum(t.size for t in targets)
    g_opac = np.zeros(len(opac))
    g_col = np.zeros_like(colors)
    total = 0.0
    for plan, tgt in zip(plans, targets):
        buf, t_before = _forward(plan, opac, colors, bg)
        resid = buf[:, :3] - tgt.reshape(-1, 3)
        total += float(np.abs(resid).sum())
        dl_dc = np.sign(resid) / count
        _backward(plan.offsets, plan.gid, plan.gval, opac, colors, bg, t_before,
                  np.ascontiguousarray(buf[:, 3]), dl_dc, g_opac, g_col)
    return total / count, g_opac * opac * (1 - opac), g_col


def train(model: SplatModel, train_views: Sequence[Tuple[CameraPose, np.ndarray]], intr: CameraIntrinsics,
          cfg: TrainConfig = TrainConfig(), history: Optional[List[float]] = None) -> SplatModel:
    """Fit opacities and/or colors to ground-truth images.

    Geometry stays frozen, so one raster plan per view is reused across
    iterations.  The returned model's training loss never exceeds the
    initial loss.
    """
    if not train_views:
        raise ValueError("need at least one training view")
    if cfg.iterations == 0 or len(model) == 0:
        return model
    plans = [build_plan(model, pose, intr) for pose, _ in train_views]
    targets = [np.asarray(img, dtype=np.float64) for _, img in train_views]
    theta = logit(model.opacities)
    colors = model.colors.copy()
    bg = model.background
    do_opac = "opacity" in cfg.trainable
    do_col = "color" in cfg.trainable
    lr = cfg.learning_rate
    loss, g_t, g_c = l1_loss_and_grad(plans, targets, theta, colors, bg)
    if history is not None:
        history.append(loss)
    for it in range(cfg.iterations):
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            th_new = theta - lr * g_t if do_opac else theta
            c_new = np.clip(colors - lr * g_c, 0.0, 1.0) if do_col else colors
            new_loss = l1_loss(plans, targets, sigmoid(th_new), c_new, bg)
            if new_loss <= loss:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            log.debug("training stalled at iteration %d (loss %.6g)", it, loss)
            break
        theta, colors = th_new, c_new
        lr *= cfg.growth
        loss, g_t, g_c = l1_loss_and_grad(plans, targets, theta, colors, bg)
        if history is not None:
            history.append(loss)
    opac = np.clip(sigmoid(theta), OPACITY_EPS, 1.0)
    return model.replace(opacities=opac, colors=colors)
