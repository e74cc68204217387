"""GP-UCB search for the physics weight ``w`` over the balance metric."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

HYPER_GRID = np.logspace(-2, 2, 25)
MAX_KERNEL_COND = 1e12


def balance_metric(L_hb: float, L_ph: float, L_total: float) -> float:
    """``log[(L_hb/L_ph + L_ph/L_hb) * L_total]``; the ratio term is at least 2."""
    if L_hb <= 0 or L_ph <= 0 or L_total <= 0:
        raise ValueError("balance metric needs positive losses (discard this w)")
    return math.log((L_hb / L_ph + L_ph / L_hb) * L_total)


def se_kernel(a, b, sigma: float, length: float) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 1)
    b = np.asarray(b, dtype=float).reshape(1, -1)
    return sigma ** 2 * np.exp(-0.5 * ((a - b) / length) ** 2)


@dataclass
class GPSurrogate:
    w: np.ndarray
    m: np.ndarray
    sigma_m: float
    length: float
    noise: float = 1e-4
    jitter: float = 0.0
    _factor: tuple | None = field(default=None, repr=False)

    def gram(self) -> np.ndarray:
        n = self.w.size
        return se_kernel(self.w, self.w, self.sigma_m, self.length) + (
            self.noise ** 2 + self.jitter) * np.eye(n)

    def factor(self):
        if self._factor is None:
            self._factor = cho_factor(self.gram(), lower=True)
        return self._factor


def _log_marginal(w, m, sigma, length, noise):
    K = se_kernel(w, w, sigma, length) + noise ** 2 * np.eye(w.size)
    try:
        c, low = cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf
    alpha = cho_solve((c, low), m)
    return float(-0.5 * m @ alpha - np.log(np.diag(c)).sum() - 0.5 * w.size * np.log(2 * np.pi))


def _stabilize(gp: GPSurrogate) -> GPSurrogate:
    """Add diagonal jitter until the Gram matrix is comfortably invertible."""
    base = gp.sigma_m ** 2
    jitter = 0.0
    for k in range(12):
        gp.jitter = jitter
        if np.linalg.cond(gp.gram()) < MAX_KERNEL_COND:
            return gp
        jitter = base * 10.0 ** (k - 13)
    raise np.linalg.LinAlgError("GP kernel matrix is ill-conditioned even after jitter")


def gp_fit(observations, noise: float = 1e-4, default_length: float = 0.25) -> GPSurrogate:
    """Zero-mean GP with ``(sigma_m, l_m)`` picked by log marginal likelihood on a log grid."""
    obs = list(observations)
    if not obs:
        raise ValueError("need at least one observation")
    w = np.array([o[0] for o in obs], dtype=float)
    m = np.array([o[1] for o in obs], dtype=float)
    if w.size == 1:
        gp = GPSurrogate(w, m, max(abs(m[0]), 1.0), default_length, noise)
        return _stabilize(gp)
    best, arg = -np.inf, (1.0, default_length)
    for s in HYPER_GRID:
        for ell in HYPER_GRID:
            lml = _log_marginal(w, m, s, ell, max(noise, 1e-6 * s))
            if lml > best:
                best, arg = lml, (s, ell)
    return _stabilize(GPSurrogate(w, m, float(arg[0]), float(arg[1]), noise))


def gp_predict(gp: GPSurrogate, w_star) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at ``w_star`` (scalar or array)."""
    ws = np.atleast_1d(np.asarray(w_star, dtype=float))
    Ks = se_kernel(ws, gp.w, gp.sigma_m, gp.length)
    fac = gp.factor()
    mu = Ks @ cho_solve(fac, gp.m)
    var = gp.sigma_m ** 2 - np.sum(Ks * cho_solve(fac, Ks.T).T, axis=1)
    if np.any(var < -1e-10 * max(gp.sigma_m ** 2, 1.0)):
        raise ArithmeticError("negative posterior variance")
    var = np.maximum(var, 0.0)
    if np.ndim(w_star) == 0:
        return mu[0], var[0]
    return mu, var


@dataclass(frozen=True)
class TunerConfig:
    w_lo: float = 0.05
    w_hi: float = 1.0
    beta: float = 9.0
    grid_size: int = 512
    max_iter: int = 20
    tol: float = 1e-2
    noise: float = 1e-4
    beta_schedule: bool = False
    delta: float = 0.1
    w_init: float | None = None

    def __post_init__(self):
        if not 0 < self.w_lo < self.w_hi:
            raise ValueError("need 0 < w_lo < w_hi")
        if self.beta <= 0 and not self.beta_schedule:
            raise ValueError("beta must be positive")
        if self.grid_size < 2 or self.max_iter < 1:
            raise ValueError("grid size must be >= 2 and max_iter >= 1")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.w_lo, self.w_hi, self.grid_size)

    def beta_at(self, i: int) -> float:
        """Fixed beta, or the growing ``2 log(|A| i^2 pi^2 / (6 delta))`` schedule."""
        if not self.beta_schedule:
            return self.beta
        return 2.0 * math.log(self.grid_size * i * i * math.pi ** 2 / (6.0 * self.delta))


def acquisition(gp: GPSurrogate, grid, beta: float) -> np.ndarray:
    mu, var = gp_predict(gp, np.asarray(grid, dtype=float))
    return -mu + math.sqrt(beta) * np.sqrt(var)


def ucb_select(gp: GPSurrogate, cfg: TunerConfig, beta: float | None = None) -> float:
    """Grid argmax of ``-mu + sqrt(beta) sigma``; ties go to the smallest ``w``."""
    grid = cfg.grid
    acq = acquisition(gp, grid, cfg.beta if beta is None else beta)
    return float(grid[int(np.argmax(acq))])


@dataclass
class TraceRow:
    iteration: int
    w: float
    L_hb: float
    L_ph: float
    L_total: float
    m: float
    converged: bool = False


def tune(objective: Callable, cfg: TunerConfig = TunerConfig()) -> tuple[float, list[TraceRow], bool]:
    """GP-UCB loop.  Returns ``(w_opt, trace, converged)``.

    ``objective(w)`` returns either an object with ``L_hb``, ``L_ph`` and
    ``L_total`` attributes (scored by :func:`balance_metric`) or the metric
    value itself.  Without convergence the best observed ``w`` is returned.
    """
    w = cfg.w_init if cfg.w_init is not None else 0.5 * (cfg.w_lo + cfg.w_hi)
    trace: list[TraceRow] = []
    obs = []
    for i in range(1, cfg.max_iter + 1):
        res = objective(w)
        if hasattr(res, "L_total"):
            row = TraceRow(i, w, res.L_hb, res.L_ph, res.L_total,
                           balance_metric(res.L_hb, res.L_ph, res.L_total))
        else:
            row = TraceRow(i, w, math.nan, math.nan, math.nan, float(res))
        trace.append(row)
        obs.append((w, row.m))
        gp = gp_fit(obs, cfg.noise, 0.25 * (cfg.w_hi - cfg.w_lo))
        w_next = ucb_select(gp, cfg, cfg.beta_at(i))
        if abs(w_next - w) < cfg.tol:
            row.converged = True
            return w_next, trace, True
        w = w_next
    best = min(trace, key=lambda r: r.m)
    return best.w, trace, False


def write_trace(trace: list[TraceRow], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "w", "L_hb", "L_ph", "L_total", "m", "converged_flag"])
        for r in trace:
            wr.writerow([r.iteration, repr(r.w), repr(r.L_hb), repr(r.L_ph), repr(r.L_total),
                         repr(r.m), int(r.converged)])
