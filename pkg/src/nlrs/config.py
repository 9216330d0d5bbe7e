"""Experiment configuration loaded from a TOML file."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .spectral import UNIFORM, Box1D, DistributionSpec, check_geometry

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class PotentialConfig:
    distribution: str = UNIFORM
    density_table: list = field(default_factory=list)
    box_radius: int = 128

    def spec(self) -> DistributionSpec:
        table = tuple(tuple(float(v) for v in row) for row in self.density_table)
        return DistributionSpec(self.distribution, table)

    @property
    def box(self) -> Box1D:
        return Box1D.centered(self.box_radius)


@dataclass
class ModesConfig:
    L: int = 8
    betas: list = field(default_factory=lambda: [-90, 90])
    amplitudes: list = field(default_factory=lambda: [1.5, 1.3])

    @property
    def b(self) -> int:
        return len(self.betas)


@dataclass
class ModelConfig:
    delta: float = 1e-3
    p: int = 1


@dataclass
class AuditSection:
    n_box_radius: int | None = None
    j_box_radius: int | None = None
    q1: float = 6.0
    threshold_exponent: float = 0.125
    s_exponent: float = 2.0
    small_scale_factor: float = 2.0
    harmonic_factor: float = 4.0
    near_factor: float = 1.0
    m_radius: int = 10
    max_violations: int = 1000
    theta_points: int = 10_000
    near_box_radius: int | None = None


@dataclass
class SolverSection:
    initial_radius: int | None = None
    growth: int = 2
    max_radius: int | None = None
    tol: float = 1e-11
    max_iter: int = 20
    pivot_floor: float = 1e-12
    override_audits: bool = False


@dataclass
class DynamicsSection:
    t_end: float = 50.0
    h: float = 1e-3
    record_every: int = 1000
    residual_times: list = field(default_factory=lambda: [0.0, 1.0, 10.0, 50.0])
    field_dump_every: int = 0
    mismatch_tol: float = 1e-4
    drift_tol: float = 1e-12
    residual_tol: float = 1e-9


@dataclass
class McSection:
    trials: int = 10_000
    box_size: int = 64
    energy: float = 0.5
    eps: list = field(default_factory=lambda: [1e-2, 3e-3, 1e-3, 3e-4, 1e-4])
    density_box_size: int = 4096
    density_L: int = 64
    density_trials: int = 20
    density_band: list = field(default_factory=lambda: [0.7, 1.3])
    density_target_fraction: float = 0.9

    @staticmethod
    def box_of(size: int) -> Box1D:
        lo = -(size // 2)
        return Box1D(lo, lo + size - 1)


@dataclass
class LdtSection:
    N: int = 12
    theta_points: int = 10_000
    j0: list = field(default_factory=list)
    c_tilde: float | None = None
    norm_exponent: float = 0.9
    background: int = 8
    fit_radius: int = 2


@dataclass
class SweepSection:
    deltas: list = field(default_factory=list)
    amplitudes: list = field(default_factory=list)
    amplitude_points: int = 0
    max_points: int = 10_000
    initial_radius: int | None = 4


@dataclass
class ScheduleSection:
    M: float = 10.0
    nu: float = 0.125
    C: float = 1.0
    c: float = 1.0
    r_max: int = 30


SECTIONS = {
    "potential": PotentialConfig,
    "modes": ModesConfig,
    "model": ModelConfig,
    "audit": AuditSection,
    "solver": SolverSection,
    "dynamics": DynamicsSection,
    "mc": McSection,
    "ldt": LdtSection,
    "sweep": SweepSection,
    "schedule": ScheduleSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    modes: ModesConfig = field(default_factory=ModesConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    audit: AuditSection = field(default_factory=AuditSection)
    solver: SolverSection = field(default_factory=SolverSection)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    mc: McSection = field(default_factory=McSection)
    ldt: LdtSection = field(default_factory=LdtSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)

    def validate(self):
        if self.potential.box_radius < 1:
            raise ConfigError("potential.box_radius must be >= 1")
        self.potential.spec()
        m = self.modes
        if m.b < 1:
            raise ConfigError("modes.betas must name at least one box")
        if len(m.amplitudes) != m.b:
            raise ConfigError("modes.amplitudes needs one entry per beta")
        check_geometry(m.betas, m.L)
        for k, bk in enumerate(m.betas):
            if abs(bk) + m.L > self.potential.box_radius:
                raise ConfigError(f"mode box {k + 1} around {bk} leaves the potential box")
        if any(not 1 <= a <= 2 for a in m.amplitudes):
            raise ConfigError("amplitudes must lie in [1, 2]")
        if not 0 <= self.model.delta < 1:
            raise ConfigError("model.delta must lie in [0, 1)")
        if self.model.p < 1:
            raise ConfigError("model.p must be a positive integer")
        if self.dynamics.h <= 0 or self.dynamics.t_end < 0:
            raise ConfigError("dynamics.h must be positive and t_end nonnegative")
        for d in self.sweep.deltas:
            if not 0 <= d < 1:
                raise ConfigError("sweep.deltas must lie in [0, 1)")
        for a in self.sweep.amplitudes:
            if len(a) != m.b or any(not 1 <= x <= 2 for x in a):
                raise ConfigError("sweep.amplitudes entries must be points of [1, 2]^b")
        lo, hi = self.mc.density_band
        if not 0 <= lo <= hi:
            raise ConfigError("mc.density_band must be [lo, hi] with 0 <= lo <= hi")
        if self.sweep.amplitude_points < 0:
            raise ConfigError("sweep.amplitude_points must be nonnegative")
        return self

    def to_dict(self):
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = SECTIONS.get(k) if cls is ExperimentConfig else None
        if sub is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"[{k}] must be a table")
            kwargs[k] = _build(sub, v, k)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "top level").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = tomllib.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e
    return from_dict(data)


def derive_seed(base: int, tag: str) -> int:
    """Independent 64-bit seed for a named stream of a run."""
    h = hashlib.sha256(f"{int(base)}:{tag}".encode()).digest()
    return int.from_bytes(h[:8], "little")

