"""Experiment configuration: dataclasses with JSON round-tripping and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .forward_sim import AP_PARAMETER_NAMES, APParameters

METHOD_KINDS = ("tikh0", "tikh1", "stre", "pkf", "pdl")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class DomainConfig:
    kind: str = "grid2d"          # "grid2d" | "mesh"
    nx: int = 16
    ny: int = 16
    h: float = 3.0
    mesh_path: str | None = None


@dataclass
class StimulusConfig:
    corner_size: int = 3           # grid corner patch; ignored when ``nodes`` is given
    nodes: list[int] | None = None
    onset: float = 1.0


@dataclass
class SimConfig:
    dt: float = 0.003125           # Euler step
    steps: int = 401               # recorded frames, the initial one included
    record_every: int = 32         # Euler steps per recorded frame


@dataclass
class TransferConfig:
    sensors: int = 64
    standoff: float = 24.0
    seed: int = 0
    jitter: float = 0.0
    path: str | None = None        # CSV / CSV.GZ matrix; overrides the synthetic generator


@dataclass
class MethodConfig:
    kind: str
    label: str | None = None
    options: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.label or self.kind


@dataclass
class ExperimentConfig:
    domain: DomainConfig = field(default_factory=DomainConfig)
    ap: dict = field(default_factory=lambda: APParameters().to_dict())
    stimulus: StimulusConfig = field(default_factory=StimulusConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    noise_levels: list[float] = field(default_factory=lambda: [0.01])
    methods: list[MethodConfig] = field(default_factory=lambda: [MethodConfig("tikh0")])
    trials: int = 1
    seed_base: int = 100
    physics_override: dict = field(default_factory=dict)   # {AP name: factor} for solver models
    output_dir: str = "runs/experiment"
    workers: int = 1

    @property
    def ap_params(self) -> APParameters:
        return APParameters(**self.ap)

    @property
    def model_params(self) -> APParameters:
        """AP parameters seen by physics-based solvers (data use :attr:`ap_params`)."""
        p = self.ap_params
        for name, factor in self.physics_override.items():
            p = p.scaled(name, factor)
        return p

    def trial_seed(self, trial: int) -> int:
        return self.seed_base + trial

    @property
    def calibration_seed(self) -> int:
        """Noise seed for hyperparameter calibration; never equal to a trial seed."""
        return self.seed_base - 1

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        try:
            cfg = cls(
                domain=_build(DomainConfig, raw.get("domain", {}), "domain"),
                ap={**APParameters().to_dict(), **raw.get("ap", {})},
                stimulus=_build(StimulusConfig, raw.get("stimulus", {}), "stimulus"),
                sim=_build(SimConfig, raw.get("sim", {}), "sim"),
                transfer=_build(TransferConfig, raw.get("transfer", {}), "transfer"),
                methods=[_build(MethodConfig, m, "methods[]") for m in raw.get("methods", [{"kind": "tikh0"}])],
                **{k: raw[k] for k in ("noise_levels", "trials", "seed_base", "physics_override",
                                       "output_dir", "workers") if k in raw},
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.validate(base_dir)
        return cfg

    def validate(self, base_dir: Path | None = None) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.noise_levels or any(s < 0 for s in self.noise_levels):
            raise ConfigError("noise levels must be a nonempty list of nonnegative numbers")
        if self.domain.kind not in ("grid2d", "mesh"):
            raise ConfigError(f"unknown domain kind {self.domain.kind!r}")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("method labels must be unique")
        for m in self.methods:
            if m.kind not in METHOD_KINDS:
                raise ConfigError(f"unknown method kind {m.kind!r}; choose from {METHOD_KINDS}")
        for name in list(self.ap) + list(self.physics_override):
            if name not in AP_PARAMETER_NAMES:
                raise ConfigError(f"unknown AP parameter {name!r}")
        try:
            self.model_params
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.sim.dt <= 0 or self.sim.steps < 2 or self.sim.record_every < 1:
            raise ConfigError("sim needs dt > 0, steps >= 2 and record_every >= 1")
        for label, p in (("domain.mesh_path", self.domain.mesh_path),
                         ("transfer.path", self.transfer.path)):
            if p is not None:
                path = Path(p) if base_dir is None or Path(p).is_absolute() else base_dir / p
                if not path.exists():
                    raise ConfigError(f"{label}: file {path} does not exist")
        if self.domain.kind == "mesh" and not self.domain.mesh_path:
            raise ConfigError("mesh domain needs domain.mesh_path")

    def resolve(self, p: str | None, base_dir: Path | None) -> Path | None:
        if p is None:
            return None
        return Path(p) if base_dir is None or Path(p).is_absolute() else base_dir / p


def _build(kind, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(kind)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return kind(**raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = ExperimentConfig.from_dict(raw, path.parent)
    # pin relative file references to the config's directory
    if cfg.domain.mesh_path:
        cfg.domain.mesh_path = str(cfg.resolve(cfg.domain.mesh_path, path.parent).resolve())
    if cfg.transfer.path:
        cfg.transfer.path = str(cfg.resolve(cfg.transfer.path, path.parent).resolve())
    return cfg
