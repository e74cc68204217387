"""Fully connected tanh network, Adam, and size-weighted shard reduction."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape, Var, tanh


@dataclass(frozen=True)
class NetworkSpec:
    input_width: int = 3
    hidden_layers: int = 5
    neurons: int = 10
    output_width: int = 2

    def __post_init__(self):
        if self.hidden_layers < 1:
            raise ValueError("need at least one hidden layer")
        if min(self.input_width, self.neurons, self.output_width) < 1:
            raise ValueError("layer widths must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.input_width] + [self.neurons] * self.hidden_layers + [self.output_width]

    @property
    def parameter_count(self) -> int:
        w = self.widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("Adam learning rate and epsilon must be positive")


@dataclass
class NetworkState:
    """Parameters in canonical order ``W1, b1, W2, b2, ...`` plus Adam moments.

    Weight matrices are stored ``(fan_in, fan_out)`` so a batch ``X`` of row
    vectors maps as ``X @ W + b``.
    """

    spec: NetworkSpec
    params: list[np.ndarray]
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    seed: int = 0

    @property
    def block_names(self) -> list[str]:
        return [f"{'W' if k % 2 == 0 else 'b'}{k // 2 + 1}" for k in range(len(self.params))]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def copy(self) -> "NetworkState":
        return NetworkState(self.spec, [p.copy() for p in self.params], [a.copy() for a in self.m],
                            [a.copy() for a in self.v], self.step, self.seed)


def _zeros_like(params):
    return [np.zeros_like(p) for p in params]


def init_network(spec: NetworkSpec, seed: int, output_scale: float = 1.0) -> NetworkState:
    """Glorot-uniform weights and zero biases.

    ``output_scale`` multiplies the last weight matrix after sampling; 1.0 is
    plain Glorot.  Shrinking it starts the network near the zero (rest) field.
    """
    rng = np.random.default_rng(seed)
    w = spec.widths
    params = []
    for k, (fan_in, fan_out) in enumerate(zip(w[:-1], w[1:])):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        if k == len(w) - 2:
            W = W * output_scale
        params += [W, np.zeros(fan_out)]
    return NetworkState(spec, params, _zeros_like(params), _zeros_like(params), 0, seed)


def _check_width(spec, X):
    if X.shape[-1] != spec.input_width:
        raise ValueError(f"input width {X.shape[-1]} does not match the network's {spec.input_width}")


def forward(state: NetworkState, coords) -> np.ndarray:
    """Plain numpy evaluation on a ``(B, input_width)`` batch; returns ``(B, output_width)``."""
    Z = np.atleast_2d(np.asarray(coords, dtype=float))
    _check_width(state.spec, Z)
    P = state.params
    for k in range(0, len(P) - 2, 2):
        Z = np.tanh(Z @ P[k] + P[k + 1])
    return Z @ P[-2] + P[-1]


def parameter_inputs(tape: Tape, state: NetworkState) -> list[Var]:
    """Register every parameter block as a tape input (canonical order)."""
    return [tape.input(p) for p in state.params]


def forward_tape(pvars: list[Var], coords, spec: NetworkSpec) -> Var:
    """Differentiable forward pass; ``coords`` may be an array or a tape ``Var``."""
    Z = coords
    _check_width(spec, Z.value if isinstance(Z, Var) else np.asarray(Z))
    if not isinstance(Z, Var):
        Z = pvars[0].tape.constant(Z)
    for k in range(0, len(pvars) - 2, 2):
        Z = tanh(Z @ pvars[k] + pvars[k + 1])
    return Z @ pvars[-2] + pvars[-1]


def adam_step(state: NetworkState, grads: list[np.ndarray], cfg: AdamConfig) -> NetworkState:
    """One bias-corrected Adam update; returns a new state (the input is untouched)."""
    if len(grads) != len(state.params):
        raise ValueError("gradient list does not match the parameter blocks")
    for name, g, p in zip(state.block_names, grads, state.params):
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name}")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p.append(p - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps))
        new_m.append(m)
        new_v.append(v)
    return NetworkState(state.spec, new_p, new_m, new_v, t, state.seed)


def accumulate_sharded(shard_grads) -> list[np.ndarray]:
    """Combine ``(summed_gradient_blocks, shard_size)`` pairs into the batch mean.

    Shards are reduced in list order so the result is reproducible.
    """
    shard_grads = list(shard_grads)
    if not shard_grads:
        raise ValueError("no shards to accumulate")
    total = sum(size for _, size in shard_grads)
    if total <= 0:
        raise ValueError("total shard size must be positive")
    acc = [np.array(g, dtype=float, copy=True) for g in shard_grads[0][0]]
    for blocks, _ in shard_grads[1:]:
        if len(blocks) != len(acc):
            raise ValueError("shards disagree on the number of parameter blocks")
        for a, g in zip(acc, blocks):
            if a.shape != np.shape(g):
                raise ValueError("shards disagree on parameter shapes")
            a += g
    return [a / total for a in acc]


# ---------------------------------------------------------------- checkpoints

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".csv") else p
    return stem.with_suffix(".json"), stem.with_suffix(".csv")


def save_checkpoint(state: NetworkState, path) -> None:
    """JSON header plus a CSV with one value per line: parameters, then Adam m, then v."""
    head, body = _paths(path)
    head.parent.mkdir(parents=True, exist_ok=True)
    header = {"spec": asdict(state.spec), "seed": state.seed, "step": state.step,
              "shapes": [list(p.shape) for p in state.params],
              "layout": ["params", "adam_m", "adam_v"]}
    head.write_text(json.dumps(header, indent=2))
    flat = np.concatenate([np.concatenate([a.ravel() for a in blocks])
                           for blocks in (state.params, state.m, state.v)])
    np.savetxt(body, flat, fmt="%.17g")


def load_checkpoint(path) -> NetworkState:
    head, body = _paths(path)
    header = json.loads(head.read_text())
    spec = NetworkSpec(**header["spec"])
    shapes = [tuple(s) for s in header["shapes"]]
    flat = np.atleast_1d(np.loadtxt(body))
    sizes = [int(np.prod(s)) for s in shapes]
    n = sum(sizes)
    if flat.size != 3 * n:
        raise ValueError(f"{body}: expected {3 * n} values, found {flat.size}")

    def unflatten(chunk):
        out, k = [], 0
        for s, size in zip(shapes, sizes):
            out.append(chunk[k:k + size].reshape(s).copy())
            k += size
        return out

    return NetworkState(spec, unflatten(flat[:n]), unflatten(flat[n:2 * n]),
                        unflatten(flat[2 * n:]), header["step"], header["seed"])
