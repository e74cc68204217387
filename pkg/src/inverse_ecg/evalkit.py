"""Reconstruction metrics (RE, CC, MSE), trial aggregation and the Welch t-test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class MetricReport:
    RE: float
    CC: float
    MSE: float
    cc_rows_excluded: int = 0


def evaluate_metrics(estimate, truth) -> MetricReport:
    """RE over the whole field, row-averaged temporal correlation, and MSE.

    Rows (locations) where either series has zero variance have no defined
    correlation; they are skipped and counted in ``cc_rows_excluded``.
    """
    E = np.asarray(estimate, dtype=float)
    U = np.asarray(truth, dtype=float)
    if E.shape != U.shape:
        raise ValueError(f"shape mismatch {E.shape} vs {U.shape}")
    norm = np.linalg.norm(U)
    if norm == 0.0:
        raise ValueError("relative error undefined for an all-zero truth field")
    re = float(np.linalg.norm(E - U) / norm)
    mse = float(np.mean((E - U) ** 2))
    Ec = E - E.mean(axis=1, keepdims=True)
    Uc = U - U.mean(axis=1, keepdims=True)
    num = np.sum(Ec * Uc, axis=1)
    den = np.sqrt(np.sum(Ec ** 2, axis=1) * np.sum(Uc ** 2, axis=1))
    ok = den > 0
    cc = float(np.clip(np.mean(num[ok] / den[ok]), -1.0, 1.0)) if ok.any() else float("nan")
    return MetricReport(re, cc, mse, int((~ok).sum()))


@dataclass
class TrialSummary:
    method: str
    noise_sigma: float
    reports: list[MetricReport] = field(default_factory=list)

    def stats(self, name: str) -> dict:
        vals = [getattr(r, name) for r in self.reports]
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return {"mean": float(np.mean(vals)), "sd": sd, "per_trial": vals}

    def to_dict(self) -> dict:
        return {"method": self.method, "noise_sigma": self.noise_sigma,
                "trials": len(self.reports), "RE": self.stats("RE"), "CC": self.stats("CC"),
                "MSE": self.stats("MSE")}

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# ------------------------------------------------------------------ t-test

def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, nu: float) -> float:
    """Two-sided tail probability of Student's t with ``nu`` degrees of freedom."""
    if t == 0.0:
        return 1.0
    return min(1.0, max(0.0, regularized_incomplete_beta(nu / 2.0, 0.5, nu / (nu + t * t))))


def welch_t_test(mean_a, sd_a, n_a, mean_b, sd_b, n_b) -> tuple[float, float, float]:
    """Unequal-variance two-sample t-test from summary statistics: ``(t, nu, p)``."""
    if n_a < 2 or n_b < 2:
        raise ValueError("each sample needs at least two observations")
    if sd_a < 0 or sd_b < 0:
        raise ValueError("standard deviations must be nonnegative")
    va, vb = sd_a ** 2 / n_a, sd_b ** 2 / n_b
    if va + vb == 0.0:
        raise ZeroDivisionError("both sample variances are zero")
    t = (mean_a - mean_b) / math.sqrt(va + vb)
    nu = (va + vb) ** 2 / (va ** 2 / (n_a - 1) + vb ** 2 / (n_b - 1))
    return t, nu, t_two_sided_p(t, nu)
