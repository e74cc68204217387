"""Comparison solvers: Tikhonov (orders 0 and 1), spatiotemporal regularization
(STRE) and a physiology-constrained unscented Kalman filter (P-KF)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .forward_sim import APParameters, FieldSeries, ap_rhs
from .geometry import SpatialDomain, SparseOperator, edge_difference_operator, laplacian_operator

PKF_INITS = ("truth", "perturbed", "random_site", "zero")


class StreNotConverged(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"STRE conjugate gradient stopped after {iterations} iterations "
                         f"with relative residual {residual:.3e}")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class TikhonovConfig:
    order: int = 0
    lam: float = 1e-2

    def __post_init__(self):
        if self.order not in (0, 1):
            raise ValueError("Tikhonov order must be 0 or 1")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


@dataclass(frozen=True)
class StreConfig:
    lam_s: float = 1e-2
    lam_t: float = 1e-1
    window: int = 10
    tol: float = 1e-8
    max_iter: int = 5000

    def __post_init__(self):
        if self.lam_s <= 0 or self.lam_t < 0:
            raise ValueError("STRE needs lam_s > 0 and lam_t >= 0")
        if self.window < 2 or self.window % 2:
            raise ValueError("STRE window must be an even integer >= 2")


@dataclass(frozen=True)
class PkfConfig:
    init: str = "truth"
    init_sigma: float = 0.05     # spread for the "perturbed" initialization
    q_phi: float = 1e-5
    m_phi: float | None = None   # None: use the measurement noise variance
    p0: float = 1e-3
    kappa: float = 0.0
    p_ut: float = 1.0
    q_ut: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.init not in PKF_INITS:
            raise ValueError(f"P-KF init must be one of {PKF_INITS}")
        if self.q_phi <= 0 or (self.m_phi is not None and self.m_phi <= 0) or self.p0 <= 0:
            raise ValueError("P-KF noise scales must be positive")


def gamma_matrix(gamma, N: int) -> np.ndarray:
    """Dense regularization operator; ``None`` or ``"identity"`` means I."""
    if gamma is None or (isinstance(gamma, str) and gamma == "identity"):
        return np.eye(N)
    if isinstance(gamma, SparseOperator):
        return gamma.toarray()
    G = np.asarray(gamma, dtype=float)
    if G.shape[1] != N:
        raise ValueError("regularization operator has the wrong column count")
    return G


def tikhonov_gamma(domain: SpatialDomain, order: int):
    return None if order == 0 else edge_difference_operator(domain)


def tikhonov_solve(y, R, gamma, lam: float) -> np.ndarray:
    """Column-wise minimizer of ``|y_t - R u|^2 + lam^2 |Gamma u|^2``."""
    R = np.asarray(R, dtype=float)
    Y = np.asarray(y, dtype=float)
    vec = Y.ndim == 1
    Y = Y.reshape(R.shape[0], -1)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    G = gamma_matrix(gamma, R.shape[1])
    A = R.T @ R + lam ** 2 * (G.T @ G)
    try:
        fac = cho_factor(A)
    except LinAlgError as exc:
        raise LinAlgError("normal matrix is singular; use lam > 0") from exc
    U = cho_solve(fac, R.T @ Y)
    return U[:, 0] if vec else U


def temporal_laplacian(T: int, window: int) -> np.ndarray:
    """Graph Laplacian linking each step to the others within ``window/2`` (truncated at the ends)."""
    half = window // 2
    Lt = np.zeros((T, T))
    for t in range(T):
        lo, hi = max(0, t - half), min(T, t + half + 1)
        Lt[t, lo:hi] -= 1.0
        Lt[t, t] += hi - lo
    return Lt


def stre_objective(U, y, R, gamma, cfg: StreConfig) -> float:
    U = np.asarray(U, dtype=float)
    G = gamma_matrix(gamma, U.shape[0])
    fit = np.sum((y - R @ U) ** 2) + cfg.lam_s ** 2 * np.sum((G @ U) ** 2)
    half = cfg.window // 2
    T = U.shape[1]
    temporal = 0.0
    for t in range(T):
        for tau in range(max(0, t - half), min(T, t + half + 1)):
            temporal += np.sum((U[:, t] - U[:, tau]) ** 2)
    return float(fit + cfg.lam_t ** 2 * temporal)


def stre_solve(y, R, gamma, cfg: StreConfig) -> np.ndarray:
    """Joint minimizer over all time steps by preconditioned conjugate gradient.

    The normal equations read ``A U + 2 lam_t^2 U L_t = R^T Y`` with
    ``A = R^T R + lam_s^2 Gamma^T Gamma`` and ``L_t`` the windowed temporal
    graph Laplacian.  The preconditioner inverts ``A + 2 lam_t^2 deg(t) I``
    column by column through one eigendecomposition of ``A``.
    """
    R = np.asarray(R, dtype=float)
    Y = np.asarray(y, dtype=float)
    T = Y.shape[1]
    if T <= cfg.window:
        raise ValueError("STRE needs more time steps than the window length")
    G = gamma_matrix(gamma, R.shape[1])
    A = R.T @ R + cfg.lam_s ** 2 * (G.T @ G)
    Lt = temporal_laplacian(T, cfg.window)
    c = 2.0 * cfg.lam_t ** 2
    evals, Q = np.linalg.eigh(A)
    shift = c * np.diag(Lt)

    def apply(X):
        return A @ X + c * (X @ Lt)

    def precond(Rm):
        return Q @ ((Q.T @ Rm) / (evals[:, None] + shift[None, :]))

    B = R.T @ Y
    bnorm = np.linalg.norm(B)
    if bnorm == 0.0:
        return np.zeros((R.shape[1], T))
    X = precond(B)
    Res = B - apply(X)
    Z = precond(Res)
    P = Z.copy()
    rz = np.sum(Res * Z)
    for it in range(1, cfg.max_iter + 1):
        AP = apply(P)
        alpha = rz / np.sum(P * AP)
        X += alpha * P
        Res -= alpha * AP
        rel = np.linalg.norm(Res) / bnorm
        if rel < cfg.tol:
            return X
        Z = precond(Res)
        rz_new = np.sum(Res * Z)
        P = Z + (rz_new / rz) * P
        rz = rz_new
    raise StreNotConverged(cfg.max_iter, rel)


# ------------------------------------------------------------- unscented KF

def _jittered_cholesky(S: np.ndarray) -> tuple[np.ndarray, int]:
    """Lower Cholesky factor; adds growing diagonal jitter when ``S`` is not PD."""
    S = (S + S.T) / 2
    scale = max(np.trace(S) / S.shape[0], 1e-300)
    jitter = 0.0
    for attempt in range(10):
        try:
            return np.linalg.cholesky(S + jitter * np.eye(S.shape[0])), attempt
        except np.linalg.LinAlgError:
            jitter = scale * 1e-12 * 10 ** (attempt + 1)
    raise np.linalg.LinAlgError("covariance is not positive semi-definite even after jitter")


def ut_weights(N: int, kappa: float = 0.0, p_ut: float = 1.0, q_ut: float = 2.0):
    if N + kappa <= 0:
        raise ValueError("need N + kappa > 0")
    Wm = np.full(2 * N + 1, 1.0 / (2 * (N + kappa)))
    Wc = Wm.copy()
    Wm[0] = kappa / (N + kappa)
    Wc[0] = Wm[0] + (1 - p_ut ** 2 + q_ut)
    return Wm, Wc


def ut_sigma_points(mean, cov, kappa: float = 0.0, p_ut: float = 1.0, q_ut: float = 2.0):
    """``2N+1`` sigma points (rows) with mean and covariance weights."""
    mean = np.asarray(mean, dtype=float)
    N = mean.size
    Wm, Wc = ut_weights(N, kappa, p_ut, q_ut)
    L, _ = _jittered_cholesky((N + kappa) * np.asarray(cov, dtype=float))
    pts = np.empty((2 * N + 1, N))
    pts[0] = mean
    pts[1:N + 1] = mean + L.T
    pts[N + 1:] = mean - L.T
    return pts, Wm, Wc


def initial_field(cfg: PkfConfig, domain: SpatialDomain, truth0=None) -> np.ndarray:
    N = domain.node_count
    rng = np.random.default_rng(cfg.seed)
    if cfg.init == "zero":
        return np.zeros(N)
    if cfg.init == "random_site":
        site = rng.integers(N)
        u = np.zeros(N)
        lap = laplacian_operator(domain).csr
        u[lap.indices[lap.indptr[site]:lap.indptr[site + 1]]] = 1.0
        return u
    if truth0 is None:
        raise ValueError(f"P-KF init '{cfg.init}' needs the true initial field")
    truth0 = np.asarray(truth0, dtype=float)
    if cfg.init == "truth":
        return truth0.copy()
    return truth0 + rng.normal(0.0, cfg.init_sigma, N)


def pkf_solve(y, R, domain: SpatialDomain, params: APParameters, cfg: PkfConfig, dt: float,
              euler_dt: float | None = None, truth0=None, noise_sigma: float = 0.0) -> FieldSeries:
    """Unscented Kalman filter with the reaction-diffusion model as the prior.

    Each frame interval ``dt`` is covered by ``round(dt / euler_dt)`` Euler
    substeps (one step when ``euler_dt`` is None).  The recovery variable is
    carried as a shared mean and is not part of the filtered state.
    """
    R = np.asarray(R, dtype=float)
    Y = np.asarray(y, dtype=float)
    M, N = R.shape
    T = Y.shape[1]
    sub = 1 if euler_dt is None else max(1, int(round(dt / euler_dt)))
    h = dt / sub
    lap = laplacian_operator(domain).csr
    Q = cfg.q_phi * np.eye(N)
    m_phi = cfg.m_phi if cfg.m_phi is not None else max(noise_sigma ** 2, 1e-8)
    Mphi = m_phi * np.eye(M)
    Wm, Wc = ut_weights(N, cfg.kappa, cfg.p_ut, cfg.q_ut)

    u = initial_field(cfg, domain, truth0)
    vbar = np.zeros(N)
    P = cfg.p0 * np.eye(N)
    U = np.empty((N, T))
    V = np.empty((N, T))
    U[:, 0], V[:, 0] = u, vbar
    resym = jitters = 0
    for t in range(1, T):
        L, nj = _jittered_cholesky((N + cfg.kappa) * P)
        jitters += nj > 0
        S = np.hstack([u[:, None], u[:, None] + L, u[:, None] - L])    # (N, 2N+1)
        Vs = np.repeat(vbar[:, None], S.shape[1], axis=1)
        for _ in range(sub):
            du, dv = ap_rhs(S, Vs, params, lap)
            S = S + h * du
            Vs = Vs + h * dv
        if not np.all(np.isfinite(S)):
            raise FloatingPointError(f"P-KF sigma-point propagation diverged at frame {t}")
        ubar = S @ Wm
        vbar = Vs @ Wm
        D = S - ubar[:, None]
        Pm = (D * Wc) @ D.T + Q
        Sy = R @ Pm @ R.T + Mphi
        K = cho_solve(cho_factor(Sy), R @ Pm).T
        u = ubar + K @ (Y[:, t] - R @ ubar)
        P = Pm - K @ (R @ Pm)
        if np.abs(P - P.T).max() > 1e-6:
            resym += 1
        P = (P + P.T) / 2
        U[:, t], V[:, t] = u, vbar
    return FieldSeries(U, V, dt, np.arange(T) * dt,
                       {"source": "pkf", "resymmetrized": resym, "jittered": int(jitters),
                        "init": cfg.init, "substeps": sub})
