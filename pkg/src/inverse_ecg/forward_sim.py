"""Aliev-Panfilov forward model: explicit Euler integration and BSPM synthesis."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import SpatialDomain, SparseOperator, laplacian_operator

BLOWUP_LIMIT = 10.0
AP_PARAMETER_NAMES = ("a", "D", "k_r", "e0", "mu1", "mu2")


class SingularCouplingError(ArithmeticError):
    """u == -mu2 somewhere, so the recovery coupling xi(u, v) is undefined."""


class SimulationUnstable(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"blow-up at Euler step {step}: max |u| = {value:.3g} > {BLOWUP_LIMIT:g}; "
                         "reduce dt")
        self.step = step


@dataclass(frozen=True)
class APParameters:
    a: float = 0.1
    D: float = 10.0
    k_r: float = 8.0
    e0: float = 0.002
    mu1: float = 0.3
    mu2: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.a < 1.0:
            raise ValueError(f"excitability threshold a must lie in (0, 1), got {self.a}")
        for name in ("D", "k_r", "e0", "mu1", "mu2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"AP parameter {name} must be positive")

    def scaled(self, name: str, factor: float) -> "APParameters":
        """Copy with one parameter multiplied by ``factor`` (e.g. 1.1 for +10%)."""
        if name not in AP_PARAMETER_NAMES:
            raise KeyError(name)
        return replace(self, **{name: getattr(self, name) * factor})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StimulusSpec:
    nodes: tuple[int, ...] = ()
    onset: float = 1.0

    @classmethod
    def corner_patch(cls, domain: SpatialDomain, size: int = 3) -> "StimulusSpec":
        """``size`` x ``size`` block at the (0, 0) corner of a grid domain."""
        nx, _ = domain.grid_shape
        return cls(tuple(j * nx + i for j in range(size) for i in range(size)))


@dataclass
class FieldSeries:
    u: np.ndarray              # (N, T)
    v: np.ndarray | None       # (N, T); absent for purely algebraic solvers
    dt: float
    times: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=float)
            if self.v.shape != self.u.shape:
                raise ValueError("u and v shapes differ")
        if self.u.ndim != 2 or self.u.shape[1] != self.times.size:
            raise ValueError("u must be (N, T) with one column per time")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def save(self, directory) -> None:
        """Write ``u.csv`` (and ``v.csv``) plus a ``fields.json`` sidecar."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "u.csv", self.u, delimiter=",", fmt="%.17g")
        if self.v is not None:
            np.savetxt(d / "v.csv", self.v, delimiter=",", fmt="%.17g")
        side = {"dt": self.dt, "times": self.times.tolist(), "N": self.u.shape[0],
                "T": self.u.shape[1], **self.meta}
        (d / "fields.json").write_text(json.dumps(side, indent=2))

    @classmethod
    def load(cls, directory) -> "FieldSeries":
        d = Path(directory)
        side = json.loads((d / "fields.json").read_text())
        u = np.loadtxt(d / "u.csv", delimiter=",", ndmin=2)
        v = np.loadtxt(d / "v.csv", delimiter=",", ndmin=2) if (d / "v.csv").exists() else None
        meta = {k: val for k, val in side.items() if k not in ("dt", "times", "N", "T")}
        return cls(u.reshape(side["N"], side["T"]),
                   None if v is None else v.reshape(side["N"], side["T"]),
                   side["dt"], np.array(side["times"]), meta)


def ap_rhs(u, v, params: APParameters, lap):
    """Right-hand side of the two-variable model at every node.

    ``lap`` may be a :class:`SparseOperator`, a scipy sparse matrix or a dense
    array; ``u`` and ``v`` may carry extra trailing columns (batched states).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    denom = u + params.mu2
    if np.any(denom == 0.0):
        raise SingularCouplingError("u == -mu2: recovery coupling is singular")
    L = lap.csr if isinstance(lap, SparseOperator) else lap
    du = params.D * (L @ u) + params.k_r * u * (u - params.a) * (1.0 - u) - u * v
    xi = params.e0 + params.mu1 * v / denom
    dv = xi * (-v - params.k_r * u * (u - params.a - 1.0))
    return du, dv


def stable_dt(domain: SpatialDomain, params: APParameters, lap: SparseOperator | None = None) -> float:
    """Largest explicit-Euler step accepted by :func:`simulate`."""
    if domain.kind == "grid2d":
        return domain.spacing ** 2 / (8.0 * params.D)
    lap = laplacian_operator(domain) if lap is None else lap
    diag = np.abs(lap.csr.diagonal()).max()
    return 1.0 / (4.0 * params.D * diag)


def simulate(domain: SpatialDomain, params: APParameters, stim: StimulusSpec, steps: int,
             dt: float, seed: int = 0, record_every: int = 1,
             lap: SparseOperator | None = None) -> FieldSeries:
    """Forward-Euler trajectory starting from ``u = onset`` on the stimulated nodes.

    Returns ``steps`` snapshots (the initial state included) spaced
    ``record_every`` Euler steps apart.  The integrator itself is deterministic;
    ``seed`` is carried in the metadata for provenance.
    """
    if steps < 1 or record_every < 1:
        raise ValueError("steps and record_every must be positive")
    lap = laplacian_operator(domain) if lap is None else lap
    bound = stable_dt(domain, params, lap)
    if dt > bound * (1 + 1e-12):
        raise ValueError(f"dt = {dt:g} exceeds the explicit stability bound {bound:g}")
    N = domain.node_count
    u = np.zeros(N)
    v = np.zeros(N)
    idx = np.asarray(stim.nodes, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise IndexError("stimulus node outside the domain")
    u[idx] = stim.onset
    U = np.empty((N, steps))
    V = np.empty((N, steps))
    U[:, 0], V[:, 0] = u, v
    L = lap.csr
    n = 0
    for k in range(1, steps):
        for _ in range(record_every):
            du, dv = ap_rhs(u, v, params, L)
            u = u + dt * du
            v = v + dt * dv
            n += 1
            peak = np.abs(u).max()
            if peak > BLOWUP_LIMIT or not np.isfinite(peak):
                raise SimulationUnstable(n, peak)
        U[:, k], V[:, k] = u, v
    frame_dt = dt * record_every
    meta = {"seed": seed, "params": params.to_dict(), "euler_dt": dt,
            "record_every": record_every}
    return FieldSeries(U, V, frame_dt, np.arange(steps) * frame_dt, meta)


def make_bspm(fields: FieldSeries, transfer, sigma_eps: float, seed: int) -> np.ndarray:
    """Body-surface measurements ``R u + eps`` with i.i.d. Gaussian noise."""
    R = transfer.matrix if hasattr(transfer, "matrix") else np.asarray(transfer)
    if R.shape[1] != fields.u.shape[0]:
        raise ValueError(f"transfer has {R.shape[1]} columns but the field has "
                         f"{fields.u.shape[0]} nodes")
    if sigma_eps < 0:
        raise ValueError("noise level must be nonnegative")
    y = R @ fields.u
    if sigma_eps > 0:
        y = y + np.random.default_rng(seed).normal(0.0, sigma_eps, size=y.shape)
    return y
