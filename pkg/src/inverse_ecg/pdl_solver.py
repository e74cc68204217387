"""Physics-constrained network solver: loss assembly, training and prediction.

The loss is ``L_total = L_hb + w * (L_bc + L_f)``.  ``L_hb`` fits body-surface
data through the transfer matrix, ``L_f`` penalizes the reaction-diffusion
residuals at collocation points, and ``L_bc`` the no-flux boundary residual.
"""

from __future__ import annotations

import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape, Var, gradient, gradient_as_graph
from .forward_sim import APParameters, FieldSeries, SingularCouplingError
from .geometry import SpatialDomain, laplacian_operator
from .neuralnet import (AdamConfig, NetworkSpec, NetworkState, accumulate_sharded, adam_step,
                        forward, forward_tape, init_network, parameter_inputs)

MODES = ("discrete", "continuous")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, breakdown: "LossBreakdown"):
        super().__init__(f"non-finite loss at epoch {epoch}: {breakdown}")
        self.epoch = epoch
        self.breakdown = breakdown


@dataclass(frozen=True)
class LossBreakdown:
    L_hb: float
    L_bc: float
    L_f: float
    w: float

    @property
    def L_ph(self) -> float:
        return self.L_bc + self.L_f

    @property
    def L_total(self) -> float:
        return self.L_hb + self.w * self.L_ph

    def as_record(self) -> dict:
        return {"L_hb": self.L_hb, "L_bc": self.L_bc, "L_f": self.L_f, "L_ph": self.L_ph,
                "L_total": self.L_total, "w": self.w}


def total_loss(L_hb: float, L_bc: float, L_f: float, w: float) -> LossBreakdown:
    if w < 0:
        raise ValueError("physics weight w must be nonnegative")
    return LossBreakdown(float(L_hb), float(L_bc), float(L_f), float(w))


@dataclass
class CollocationSet:
    """Interior and boundary space-time points.

    Interior points carry a node index in discrete mode (sampled as
    ``(node, continuous time)`` pairs) and ``-1`` in continuous mode, where the
    spatial coordinates are drawn from the whole rectangle.
    """

    interior_coords: np.ndarray     # (N_f, dim)
    interior_times: np.ndarray      # (N_f,)
    interior_nodes: np.ndarray      # (N_f,) int
    boundary_coords: np.ndarray     # (N_bc, dim)
    boundary_times: np.ndarray
    boundary_nodes: np.ndarray
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def n_interior(self) -> int:
        return int(self.interior_times.size)

    @property
    def n_boundary(self) -> int:
        return int(self.boundary_times.size)


def sample_collocation(domain: SpatialDomain, t_max: float, N_f: int, N_bc: int, seed: int,
                       mode: str = "discrete") -> CollocationSet:
    if N_f < 0 or N_bc < 0:
        raise ValueError("collocation counts must be nonnegative")
    if mode not in MODES:
        raise ValueError(f"unknown derivative mode {mode!r}")
    rng = np.random.default_rng(seed)
    dim = domain.dim
    if mode == "continuous":
        if domain.kind != "grid2d":
            raise ValueError("continuous mode needs a flat grid domain")
        lo, hi = domain.bounding_box()
        icoords = lo + (hi - lo) * rng.random((N_f, dim))
        inodes = np.full(N_f, -1, dtype=np.int64)
    else:
        inodes = rng.integers(0, domain.node_count, N_f)
        icoords = domain.node_coords[inodes]
    itimes = t_max * rng.random(N_f)
    notes = []
    if N_bc > 0 and domain.is_closed:
        notes.append("closed surface has no boundary; boundary collocation set left empty")
        warnings.warn(notes[-1])
        N_bc = 0
    bsel = rng.integers(0, domain.boundary_nodes.size, N_bc) if N_bc else np.zeros(0, np.int64)
    bnodes = domain.boundary_nodes[bsel] if N_bc else np.zeros(0, np.int64)
    return CollocationSet(icoords.reshape(N_f, dim), itimes, inodes,
                          domain.node_coords[bnodes].reshape(-1, dim), t_max * rng.random(N_bc),
                          bsel, seed, notes)


# ------------------------------------------------------------- problem context

@dataclass
class Problem:
    domain: SpatialDomain
    R: np.ndarray            # (M, N)
    y: np.ndarray            # (M, T)
    times: np.ndarray        # (T,)
    params: APParameters = field(default_factory=APParameters)


class _Context:
    """Input normalization, Laplacian neighbor tables and output selectors."""

    def __init__(self, node_coords, times, R=None, y=None, domain: SpatialDomain | None = None):
        coords = np.asarray(node_coords, dtype=float)
        self.node_coords = coords
        self.domain = domain
        self.times = np.asarray(times, dtype=float)
        self.dim = coords.shape[1]
        lo, hi = coords.min(axis=0), coords.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        self.center = lo + span / 2
        self.half = span / 2
        self.t_max = float(self.times[-1]) if self.times[-1] > 0 else 1.0
        # d(normalized input) / d(physical coordinate), per input column
        self.scale = np.r_[1.0 / self.half, 2.0 / self.t_max]
        width = self.dim + 1
        self.pick = [np.eye(width)[:, [k]] for k in range(width)]
        self.pick_u = np.array([[1.0], [0.0]])
        self.pick_v = np.array([[0.0], [1.0]])
        if R is not None:
            self.Rt = np.asarray(R, dtype=float).T.copy()
            self.yT = np.asarray(y, dtype=float).T.copy()
        self._tables = None

    @classmethod
    def for_problem(cls, problem: "Problem") -> "_Context":
        return cls(problem.domain.node_coords, problem.times, problem.R, problem.y, problem.domain)

    def neighbor_tables(self):
        """Padded Laplacian rows: ``(self_w, nbr, nbr_w)``; padding has weight 0."""
        if self._tables is None:
            lap = laplacian_operator(self.domain).csr
            N = self.domain.node_count
            K1 = int(np.diff(lap.indptr).max()) - 1
            nbr = np.tile(np.arange(N)[:, None], (1, K1))
            nbr_w = np.zeros((N, K1))
            self_w = np.zeros(N)
            for r in range(N):
                cols = lap.indices[lap.indptr[r]:lap.indptr[r + 1]]
                vals = lap.data[lap.indptr[r]:lap.indptr[r + 1]]
                off = cols != r
                self_w[r] = vals[~off].sum()
                n = int(off.sum())
                nbr[r, :n] = cols[off]
                nbr_w[r, :n] = vals[off]
            self._tables = (self_w, nbr, nbr_w)
        return self._tables

    def inputs(self, coords, times) -> np.ndarray:
        coords = np.asarray(coords, dtype=float).reshape(-1, self.dim)
        times = np.asarray(times, dtype=float).reshape(-1)
        return np.column_stack([(coords - self.center) / self.half,
                                2.0 * times / self.t_max - 1.0])


def _uv(out: Var, ctx: _Context) -> tuple[Var, Var]:
    return out @ ctx.pick_u, out @ ctx.pick_v


# --------------------------------------------------------------- loss pieces

def _data_sq_sum(pvars, spec, ctx: _Context, tidx) -> Var:
    """Sum of squared sensor residuals over the sampled time slices."""
    N = ctx.node_coords.shape[0]
    coords = np.tile(ctx.node_coords, (len(tidx), 1))
    tt = np.repeat(ctx.times[tidx], N)
    u, _ = _uv(forward_tape(pvars, ctx.inputs(coords, tt), spec), ctx)
    U_T = u.reshape(len(tidx), N)                     # rows are time slices
    resid = ctx.yT[tidx] - U_T @ ctx.Rt
    return resid.square().sum()


def pde_residuals(u, v, u_t, v_t, lap_u, params: APParameters):
    """Residuals ``(r_u, r_v)`` of the two-variable model; arrays or tape values."""
    p = params
    u_val = u.value if isinstance(u, Var) else np.asarray(u)
    if np.any(u_val + p.mu2 == 0.0):
        raise SingularCouplingError("network output hits u == -mu2 at a collocation point")
    r_u = u_t - p.D * lap_u - p.k_r * u * (u - p.a) * (1.0 - u) + u * v
    xi = p.e0 + p.mu1 * v / (u + p.mu2)
    r_v = v_t - xi * (-v - p.k_r * u * (u - p.a - 1.0))
    return r_u, r_v


def _interior_residual_sq(pvars, spec, ctx: _Context, params: APParameters, coords, times,
                          nodes, mode: str) -> Var:
    """Per-point ``r_u^2 + r_v^2`` as a ``(B, 1)`` tape value."""
    tape = pvars[0].tape
    X = tape.input(ctx.inputs(coords, times))
    out = forward_tape(pvars, X, spec)
    u, v = _uv(out, ctx)
    tcol = ctx.dim
    u_t = (gradient_as_graph(u.sum(), X) @ ctx.pick[tcol]) * ctx.scale[tcol]
    v_t = (gradient_as_graph(v.sum(), X) @ ctx.pick[tcol]) * ctx.scale[tcol]
    if mode == "discrete":
        self_w, nbr, nbr_w = ctx.neighbor_tables()
        B, K1 = len(nodes), nbr.shape[1]
        Xn = ctx.inputs(ctx.node_coords[nbr[nodes].reshape(-1)], np.repeat(times, K1))
        un, _ = _uv(forward_tape(pvars, Xn, spec), ctx)
        lap = u * self_w[nodes][:, None] + (un.reshape(B, K1) * nbr_w[nodes]).sum(
            axis=1, keepdims=True)
    else:
        g = gradient_as_graph(u.sum(), X)
        lap = None
        for k in range(ctx.dim):
            second = gradient_as_graph((g @ ctx.pick[k]).sum(), X) @ ctx.pick[k]
            term = second * ctx.scale[k] ** 2
            lap = term if lap is None else lap + term
    r_u, r_v = pde_residuals(u, v, u_t, v_t, lap, params)
    return r_u.square() + r_v.square()


def _boundary_residual_sq(pvars, spec, ctx: _Context, coords, times, normals) -> Var:
    tape = pvars[0].tape
    X = tape.input(ctx.inputs(coords, times))
    u, _ = _uv(forward_tape(pvars, X, spec), ctx)
    g = gradient_as_graph(u.sum(), X)
    r = None
    for k in range(ctx.dim):
        term = (g @ ctx.pick[k]) * (normals[:, [k]] * ctx.scale[k])
        r = term if r is None else r + term
    return r.square()


def data_loss(state: NetworkState, R, y, heart_coords, times, sample=None, tape=None) -> Var:
    """Mean squared sensor residual over all sensors and the sampled time slices."""
    R = np.asarray(R, dtype=float)
    y = np.asarray(y, dtype=float)
    coords = np.asarray(heart_coords, dtype=float)
    if R.shape[0] != y.shape[0] or R.shape[1] != coords.shape[0] or y.shape[1] != len(times):
        raise ValueError("transfer, measurements, heart nodes and times disagree in size")
    sample = np.arange(y.shape[1]) if sample is None else np.asarray(sample)
    tape = Tape() if tape is None else tape
    ctx = _Context(coords, times, R, y)
    pvars = parameter_inputs(tape, state)
    return _data_sq_sum(pvars, state.spec, ctx, sample) * (1.0 / (R.shape[0] * len(sample)))


def physics_loss(state: NetworkState, colloc: CollocationSet, params: APParameters, mode: str,
                 domain: SpatialDomain, t_max: float, tape=None) -> tuple[Var, Var]:
    """``(L_f, L_bc)`` over the whole collocation set; empty sets give exact zeros."""
    tape = Tape() if tape is None else tape
    ctx = _Context(domain.node_coords, np.array([0.0, t_max]), domain=domain)
    pvars = parameter_inputs(tape, state)
    return _physics_terms(pvars, state.spec, ctx, params, colloc,
                          np.arange(colloc.n_interior), np.arange(colloc.n_boundary), mode)


def _physics_terms(pvars, spec, ctx, params, colloc, fi, bi, mode):
    tape = pvars[0].tape
    if len(fi):
        nodes = colloc.interior_nodes[fi]
        Lf = _interior_residual_sq(pvars, spec, ctx, params, colloc.interior_coords[fi],
                                   colloc.interior_times[fi], nodes, mode).sum() * (1.0 / len(fi))
    else:
        Lf = tape.constant(0.0)
    if len(bi):
        normals = ctx.domain.boundary_normals[colloc.boundary_nodes[bi]]
        Lbc = _boundary_residual_sq(pvars, spec, ctx, colloc.boundary_coords[bi],
                                    colloc.boundary_times[bi], normals).sum() * (1.0 / len(bi))
    else:
        Lbc = tape.constant(0.0)
    return Lf, Lbc


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    """Training settings.  One epoch is one Adam step on a fresh mini-batch."""

    epochs: int = 2000
    batch_times: int = 32
    batch_colloc: int = 2048
    batch_boundary: int = 256
    w: float = 0.1
    mode: str = "discrete"
    N_f: int = 50000
    N_bc: int = 1000
    seed: int = 0
    colloc_seed: int = 1
    network: NetworkSpec = field(default_factory=NetworkSpec)
    adam: AdamConfig = field(default_factory=AdamConfig)
    output_init_scale: float = 0.01
    shards: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if min(self.batch_times, self.batch_colloc, self.batch_boundary, self.shards,
               self.workers) <= 0:
            raise ValueError("batch sizes, shards and workers must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown derivative mode {self.mode!r}")
        if self.w < 0:
            raise ValueError("physics weight w must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MiniBatch:
    times: np.ndarray       # indices into the measurement columns
    interior: np.ndarray    # indices into the collocation interior set
    boundary: np.ndarray    # indices into the collocation boundary set


def draw_minibatch(cfg: TrainConfig, problem: Problem, colloc: CollocationSet, epoch: int) -> MiniBatch:
    """Mini-batch for ``epoch``; a pure function of ``(cfg.seed, epoch)`` so resuming is exact."""
    rng = np.random.default_rng([cfg.seed, epoch])
    T = problem.y.shape[1]
    tidx = np.sort(rng.choice(T, min(cfg.batch_times, T), replace=False))
    fi = (rng.integers(0, colloc.n_interior, cfg.batch_colloc) if colloc.n_interior and cfg.w > 0
          else np.zeros(0, np.int64))
    bi = (rng.integers(0, colloc.n_boundary, cfg.batch_boundary) if colloc.n_boundary and cfg.w > 0
          else np.zeros(0, np.int64))
    return MiniBatch(tidx, fi, bi)


def _shard_gradient(state, ctx, params, colloc, mode, w, tidx, fi, bi, norms, n_total):
    """Gradient of this shard's share of ``n_total * L_total`` plus its raw sums."""
    tape = Tape()
    pvars = parameter_inputs(tape, state)
    n_hb, n_f, n_bc = norms
    zero = tape.constant(0.0)
    hb = _data_sq_sum(pvars, state.spec, ctx, tidx) if len(tidx) else zero
    f_sum, bc_sum = zero, zero
    if len(fi):
        f_sum = _interior_residual_sq(pvars, state.spec, ctx, params, colloc.interior_coords[fi],
                                      colloc.interior_times[fi], colloc.interior_nodes[fi],
                                      mode).sum()
    if len(bi):
        normals = ctx.domain.boundary_normals[colloc.boundary_nodes[bi]]
        bc_sum = _boundary_residual_sq(pvars, state.spec, ctx, colloc.boundary_coords[bi],
                                       colloc.boundary_times[bi], normals).sum()
    share = hb * (1.0 / n_hb)
    if w > 0 and len(fi):
        share = share + f_sum * (w / n_f)
    if w > 0 and len(bi):
        share = share + bc_sum * (w / n_bc)
    scaled = share * float(n_total)
    grads = gradient(scaled, pvars)
    return grads, (float(hb.value), float(f_sum.value), float(bc_sum.value))


def loss_and_gradient(state: NetworkState, problem: Problem, colloc: CollocationSet, w: float,
                      batch: MiniBatch, mode: str = "discrete", shards: int = 1, workers: int = 1,
                      ctx: _Context | None = None) -> tuple[LossBreakdown, list[np.ndarray]]:
    """Mini-batch ``L_total`` and its parameter gradient, reduced over ``shards`` shards."""
    ctx = _Context.for_problem(problem) if ctx is None else ctx
    M = problem.y.shape[0]
    norms = (M * max(len(batch.times), 1), max(len(batch.interior), 1),
             max(len(batch.boundary), 1))
    parts = [np.array_split(a, shards) for a in (batch.times, batch.interior, batch.boundary)]
    n_total = len(batch.times) + len(batch.interior) + len(batch.boundary)

    def run(k):
        return _shard_gradient(state, ctx, problem.params, colloc, mode, w, parts[0][k],
                               parts[1][k], parts[2][k], norms, n_total)

    if workers > 1 and shards > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(shards)))
    else:
        results = [run(k) for k in range(shards)]
    sizes = [len(parts[0][k]) + len(parts[1][k]) + len(parts[2][k]) for k in range(shards)]
    grads = accumulate_sharded([(g, n) for (g, _), n in zip(results, sizes)])
    sums = np.sum([s for _, s in results], axis=0)
    breakdown = total_loss(sums[0] / norms[0], sums[2] / norms[2] if len(batch.boundary) else 0.0,
                           sums[1] / norms[1] if len(batch.interior) else 0.0, w)
    return breakdown, grads


def train(cfg: TrainConfig, problem: Problem, state: NetworkState | None = None,
          colloc: CollocationSet | None = None, log_path=None, callback=None):
    """Run Adam until ``state.step == cfg.epochs``; returns ``(state, history)``.

    Passing a checkpointed ``state`` resumes where it stopped.  Mini-batches
    depend only on ``(cfg.seed, epoch)``, so split runs match a single run.
    """
    if problem.R.shape != (problem.y.shape[0], problem.domain.node_count):
        raise ValueError("transfer matrix does not match measurements and domain")
    if problem.y.shape[1] != problem.times.size:
        raise ValueError("measurement columns do not match the time vector")
    spec = cfg.network
    if spec.input_width != problem.domain.dim + 1:
        raise ValueError(f"network input width must be {problem.domain.dim + 1} for this domain")
    if state is None:
        state = init_network(spec, cfg.seed, cfg.output_init_scale)
    if colloc is None:
        colloc = sample_collocation(problem.domain, float(problem.times[-1]),
                                    cfg.N_f if cfg.w > 0 else 0, cfg.N_bc if cfg.w > 0 else 0,
                                    cfg.colloc_seed, cfg.mode)
    ctx = _Context.for_problem(problem)
    history = []
    log = open(log_path, "a") if log_path else None
    try:
        for epoch in range(state.step, cfg.epochs):
            t0 = time.perf_counter()
            batch = draw_minibatch(cfg, problem, colloc, epoch)
            bd, grads = loss_and_gradient(state, problem, colloc, cfg.w, batch, cfg.mode,
                                          cfg.shards, cfg.workers, ctx)
            if not np.isfinite(bd.L_total):
                raise TrainingDiverged(epoch, bd)
            state = adam_step(state, grads, cfg.adam)
            rec = {"epoch": epoch + 1, **bd.as_record(),
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            history.append(rec)
            if log:
                log.write(json.dumps(rec) + "\n")
            if callback:
                callback(state, rec)
    finally:
        if log:
            log.close()
    return state, history


def history_without_timing(history) -> list[dict]:
    return [{k: v for k, v in rec.items() if k != "wall_ms"} for rec in history]


def predict_hsp(state: NetworkState, domain: SpatialDomain, times, t_max: float | None = None) -> FieldSeries:
    """Network estimate of ``(u, v)`` at every node and requested time.

    ``t_max`` must be the end of the training time window (defaults to
    ``times[-1]``, correct when predicting over the full training window).
    """
    times = np.asarray(times, dtype=float)
    t_end = float(times[-1]) if t_max is None else float(t_max)
    ctx = _Context(domain.node_coords, np.array([0.0, t_end]))
    N, T = domain.node_count, times.size
    X = ctx.inputs(np.tile(domain.node_coords, (T, 1)), np.repeat(times, N))
    out = forward(state, X)
    U = out[:, 0].reshape(T, N).T
    V = out[:, 1].reshape(T, N).T
    dt = float(times[1] - times[0]) if T > 1 else 0.0
    return FieldSeries(U, V, dt, times, {"source": "pdl"})
