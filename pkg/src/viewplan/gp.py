"""Exact Gaussian-process surrogate over (pose feature, slot) inputs.

The covariance is a product of a squared-exponential kernel on pose features
and a squared-exponential kernel on slot indices, so observations from
distant slots count for less.  The prior mean is zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .errors import SingularKernel

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_PARAMS = ("spatial_lengthscale", "spatial_variance", "time_lengthscale", "noise_variance")


@dataclass(frozen=True)
class KernelConfig:
    spatial_lengthscale: float = 1.0
    spatial_variance: float = 1.0
    time_lengthscale: float = 5.0
    noise_variance: float = 1e-6

    def __post_init__(self):
        if not (self.spatial_lengthscale > 0 and self.time_lengthscale > 0):
            raise ValueError("lengthscales must be positive")
        if self.spatial_variance < 0 or self.noise_variance < 0:
            raise ValueError("variances must be non-negative")

    def to_log(self) -> np.ndarray:
        return np.log([getattr(self, p) for p in _PARAMS])

    @classmethod
    def from_log(cls, theta) -> "KernelConfig":
        return cls(*(float(v) for v in np.exp(theta)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class KernelBounds:
    spatial_lengthscale: Tuple[float, float] = (1e-2, 1e2)
    spatial_variance: Tuple[float, float] = (1e-6, 1e4)
    time_lengthscale: Tuple[float, float] = (0.5, 100.0)
    noise_variance: Tuple[float, float] = (1e-8, 1.0)

    @classmethod
    def for_scene(cls, diameter: float, **overrides) -> "KernelBounds":
        """Lengthscale bounds of ``[1e-2, 1e2] * diameter / 10``."""
        unit = diameter / 10
        return cls(spatial_lengthscale=(1e-2 * unit, 1e2 * unit), **overrides)

    def log_bounds(self):
        return [(math.log(lo), math.log(hi)) for lo, hi in (getattr(self, p) for p in _PARAMS)]


def _sqdist(A, B) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def time_kernel(cfg: KernelConfig, tau, tau2) -> np.ndarray:
    dt = np.subtract.outer(np.atleast_1d(np.asarray(tau, dtype=np.float64)),
                           np.atleast_1d(np.asarray(tau2, dtype=np.float64)))
    return np.exp(-(dt * dt) / (2 * cfg.time_lengthscale ** 2))


def gram(cfg: KernelConfig, X1, s1, X2, s2) -> np.ndarray:
    """Cross-covariance matrix between two sets of (feature, slot) inputs."""
    ks = np.exp(-_sqdist(X1, X2) / (2 * cfg.spatial_lengthscale ** 2))
    return cfg.spatial_variance * ks * time_kernel(cfg, s1, s2)


def kernel_eval(cfg: KernelConfig, x, x2, tau, tau2) -> float:
    return float(gram(cfg, np.atleast_2d(x), [tau], np.atleast_2d(x2), [tau2])[0, 0])


def _factor(K: np.ndarray):
    """Cholesky factor of ``K`` with the smallest jitter that works."""
    for jitter in JITTER_LADDER:
        A = K + jitter * np.eye(len(K)) if jitter else K
        try:
            L = cholesky(A, lower=True, check_finite=False)
        except LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            return L, jitter
    raise SingularKernel("kernel matrix not positive definite after jitter 1e-6")


@dataclass(frozen=True, eq=False)
class GpSurrogate:
    """Training data, kernel settings and the cached Cholesky factor.

    Instances are immutable; :meth:`with_observation` and :meth:`with_kernel`
    return updated copies.
    """

    inputs: np.ndarray
    slots: np.ndarray
    y: np.ndarray
    kernel: KernelConfig = KernelConfig()
    bounds: KernelBounds = KernelBounds()
    normalize_y: bool = False
    _L: np.ndarray = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)
    jitter: float = field(default=0.0, repr=False)
    y_shift: float = field(default=0.0, repr=False)
    y_scale: float = field(default=1.0, repr=False)

    def __post_init__(self):
        X = np.array(self.inputs, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :] if X.size else X.reshape(0, 1)
        s = np.array(self.slots, dtype=np.float64).reshape(-1)
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        if not len(X) == len(s) == len(y):
            raise ValueError("inputs, slots and y must share a length")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        for a in (X, s, y):
            a.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "slots", s)
        object.__setattr__(self, "y", y)
        if len(y):
            shift, scale = 0.0, 1.0
            if self.normalize_y:
                shift = float(y.mean())
                sd = float(y.std())
                scale = sd if sd > 0 else 1.0
            L, jitter = _factor(self.noisy_gram())
            alpha = cho_solve((L, True), (y - shift) / scale, check_finite=False)
            object.__setattr__(self, "_L", L)
            object.__setattr__(self, "_alpha", alpha)
            object.__setattr__(self, "jitter", jitter)
            object.__setattr__(self, "y_shift", shift)
            object.__setattr__(self, "y_scale", scale)

    @classmethod
    def empty(cls, dim: int, kernel: KernelConfig = KernelConfig(), **kw) -> "GpSurrogate":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0), kernel, **kw)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def last_slot(self) -> float:
        return float(self.slots[-1])

    def noisy_gram(self, cfg: Optional[KernelConfig] = None) -> np.ndarray:
        cfg = cfg or self.kernel
        K = gram(cfg, self.inputs, self.slots, self.inputs, self.slots)
        return K + cfg.noise_variance * np.eye(len(K))

    def factor(self) -> np.ndarray:
        """Lower Cholesky factor of ``K_t + noise * I`` (plus any jitter)."""
        return self._L

    def with_observation(self, x, slot, y) -> "GpSurrogate":
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        X = np.vstack([self.inputs, x]) if len(self) else x
        return GpSurrogate(X, np.append(self.slots, slot), np.append(self.y, y),
                           self.kernel, self.bounds, self.normalize_y)

    def with_kernel(self, cfg: KernelConfig) -> "GpSurrogate":
        return GpSurrogate(self.inputs, self.slots, self.y, cfg, self.bounds, self.normalize_y)

    def posterior(self, x, slot):
        """Posterior mean and variance at features ``x`` queried at ``slot``.

        ``x`` may be a single feature vector or an ``(n, d)`` batch; scalars are
        returned for a single vector.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        Xq = np.atleast_2d(x)
        if len(self) == 0:
            raise ValueError("posterior needs at least one observation")
        cfg = self.kernel
        Kx = gram(cfg, Xq, np.full(len(Xq), float(slot)), self.inputs, self.slots)
        # row-wise sum keeps each candidate's mean independent of batch size
        mean = (Kx * self._alpha).sum(axis=1)
        V = solve_triangular(self._L, Kx.T, lower=True, check_finite=False)
        var = cfg.spatial_variance - np.einsum("ij,ij->j", V, V)
        low = var.min()
        if low < -1e-8:
            log.warning("posterior variance clamped from %.3g", low)
        var = np.maximum(var, 0.0)
        mean = mean * self.y_scale + self.y_shift
        var = var * self.y_scale ** 2
        if single:
            return float(mean[0]), float(var[0])
        return mean, var

    def log_marginal_likelihood(self, cfg: Optional[KernelConfig] = None) -> float:
        return _neg_lml(np.asarray((cfg or self.kernel).to_log()), self, grad=False) * -1.0

    def fit_hyperparameters(self, restarts: int = 4, seed: int = 0) -> KernelConfig:
        return fit_hyperparameters(self, restarts=restarts, seed=seed)


def _targets(gp: GpSurrogate) -> np.ndarray:
    return (gp.y - gp.y_shift) / gp.y_scale


def _neg_lml(theta, gp: GpSurrogate, grad: bool = True):
    cfg = KernelConfig.from_log(theta)
    t = len(gp)
    Ks = np.exp(-_sqdist(gp.inputs, gp.inputs) / (2 * cfg.spatial_lengthscale ** 2))
    dt = np.subtract.outer(gp.slots, gp.slots)
    Kt = np.exp(-(dt * dt) / (2 * cfg.time_lengthscale ** 2))
    Kf = cfg.spatial_variance * Ks * Kt
    try:
        L, _ = _factor(Kf + cfg.noise_variance * np.eye(t))
    except SingularKernel:
        return (np.inf, np.zeros(4)) if grad else np.inf
    y = _targets(gp)
    alpha = cho_solve((L, True), y, check_finite=False)
    nll = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * t * math.log(2 * math.pi)
    if not grad:
        return float(nll)
    Kinv = cho_solve((L, True), np.eye(t), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    Ds = _sqdist(gp.inputs, gp.inputs)
    dK = (
        Kf * Ds / cfg.spatial_lengthscale ** 2,
        Kf,
        Kf * (dt * dt) / cfg.time_lengthscale ** 2,
        cfg.noise_variance * np.eye(t),
    )
    g = np.array([-0.5 * np.sum(W * d) for d in dK])
    return float(nll), g


def fit_hyperparameters(gp: GpSurrogate, restarts: int = 4, seed: int = 0) -> KernelConfig:
    """Maximise the log marginal likelihood over log-parameters.

    Runs L-BFGS-B from the incumbent and ``restarts`` seeded random starts
    within the bounds.  The incumbent is returned if nothing beats it.
    """
    if len(gp) < 2:
        raise ValueError("need at least two observations to fit hyperparameters")
    bounds = gp.bounds.log_bounds()
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    incumbent = gp.kernel.to_log()
    best_theta, best_val = incumbent, _neg_lml(incumbent, gp, grad=False)
    rng = np.random.default_rng(seed)
    starts = [np.clip(incumbent, lo, hi)] + [rng.uniform(lo, hi) for _ in range(max(restarts, 4))]
    for x0 in starts:
        try:
            res = minimize(_neg_lml, x0, args=(gp,), jac=True, method="L-BFGS-B", bounds=bounds)
        except (ValueError, FloatingPointError, LinAlgError):
            continue
        if np.isfinite(res.fun) and res.fun < best_val:
            # re-evaluate: L-BFGS-B may report a value from a rejected step
            theta = np.clip(res.x, lo, hi)
            val = _neg_lml(theta, gp, grad=False)
            if val < best_val:
                best_theta, best_val = theta, val
    if best_theta is incumbent:
        return gp.kernel
    return KernelConfig.from_log(best_theta)
