"""Heart-to-torso transfer matrices: synthetic kernels and CSV loading."""

from __future__ import annotations

import gzip
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import SpatialDomain

ZERO_SINGULAR_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class TransferModel:
    matrix: np.ndarray
    sensor_coords: np.ndarray | None
    condition_number: float
    provenance: str          # "synthetic" | "loaded"

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def condition_number(R) -> float:
    """sigma_max / sigma_min over the numerically nonzero singular values."""
    R = np.asarray(R, dtype=float)
    s = np.linalg.svd(R, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("condition number of an all-zero matrix is undefined")
    s = s[s >= ZERO_SINGULAR_RTOL * s[0]]
    return float(s[0] / s[-1])


def kernel_transfer(node_coords, sensor_coords) -> TransferModel:
    """Row-normalized free-space kernel ``1 / (4 pi d)`` from nodes to sensors."""
    X = np.asarray(node_coords, dtype=float)
    S = np.asarray(sensor_coords, dtype=float)
    if X.shape[1] < S.shape[1]:
        X = np.pad(X, ((0, 0), (0, S.shape[1] - X.shape[1])))
    d = np.linalg.norm(S[:, None, :] - X[None, :, :], axis=2)
    if np.any(d == 0.0):
        raise ValueError("a sensor coincides with a heart node")
    R = 1.0 / (4.0 * np.pi * d)
    R /= R.sum(axis=1, keepdims=True)
    return TransferModel(R, S, condition_number(R), "synthetic")


def sensor_layout(domain: SpatialDomain, sensor_count: int, standoff: float,
                  seed: int = 0, jitter: float = 0.0) -> np.ndarray:
    """Sensor positions ``standoff`` away from the domain.

    Flat grids get a lattice on the parallel plane ``z = standoff`` spanning the
    bounding box; surfaces get a Fibonacci lattice on a sphere enclosing the
    bounding box with the same clearance.  ``jitter`` (a fraction of the sensor
    spacing) perturbs positions with the seeded generator.
    """
    lo, hi = domain.bounding_box()
    M = sensor_count
    rng = np.random.default_rng(seed)
    if domain.kind == "grid2d":
        cols = int(np.ceil(np.sqrt(M)))
        rows = int(np.ceil(M / cols))
        gx = np.linspace(lo[0], hi[0], cols) if cols > 1 else np.array([(lo[0] + hi[0]) / 2])
        gy = np.linspace(lo[1], hi[1], rows) if rows > 1 else np.array([(lo[1] + hi[1]) / 2])
        pts = np.array([(x, y, standoff) for y in gy for x in gx])[:M]
        spacing = max((hi[0] - lo[0]) / max(cols - 1, 1), (hi[1] - lo[1]) / max(rows - 1, 1))
        if jitter:
            pts[:, :2] += rng.uniform(-jitter, jitter, (M, 2)) * spacing
        return pts
    center = (lo + hi) / 2
    radius = np.linalg.norm(hi - lo) / 2 + standoff
    k = np.arange(M) + 0.5
    polar = np.arccos(1 - 2 * k / M)
    azim = np.pi * (1 + 5 ** 0.5) * k
    pts = np.column_stack([np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim),
                           np.cos(polar)])
    if jitter:
        pts += rng.normal(0.0, jitter / np.sqrt(M), pts.shape)
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return center + radius * pts


def synth_transfer(domain: SpatialDomain, sensor_count: int, standoff: float,
                   seed: int = 0, jitter: float = 0.0) -> TransferModel:
    if standoff <= 0:
        raise ValueError("standoff must be positive (a sensor on a node gives an infinite entry)")
    if not 0 < sensor_count < domain.node_count:
        raise ValueError("synthetic transfer needs 0 < M < N (underdetermined system)")
    return kernel_transfer(domain.node_coords,
                           sensor_layout(domain, sensor_count, standoff, seed, jitter))


def _open_text(path: Path, mode: str):
    if path.name.endswith(".gz"):
        return gzip.open(path, mode + "t")
    return open(path, mode)


def save_transfer(model: TransferModel | np.ndarray, path) -> None:
    R = model.matrix if isinstance(model, TransferModel) else np.asarray(model)
    path = Path(path)
    buf = io.StringIO()
    buf.write(f"{R.shape[0]} {R.shape[1]}\n")
    np.savetxt(buf, R, delimiter=",", fmt="%.17g")
    with _open_text(path, "w") as fh:
        fh.write(buf.getvalue())


def load_transfer(path) -> TransferModel:
    """Read ``M N`` header plus M comma-separated rows (``.csv`` or ``.csv.gz``)."""
    path = Path(path)
    with _open_text(path, "r") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: line 1 must be 'M N'")
        M, N = int(header[0]), int(header[1])
        R = np.loadtxt(fh, delimiter=",", ndmin=2)
    if R.shape != (M, N):
        raise ValueError(f"{path}: header says {M}x{N}, data is {R.shape[0]}x{R.shape[1]}")
    return TransferModel(R, None, condition_number(R), "loaded")
