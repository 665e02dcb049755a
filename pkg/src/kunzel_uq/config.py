"""Strict YAML run configuration.

Every section and key must be present; unknown keys are rejected.  Errors
name the offending entry as ``section.key``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .coefficients import PARAM_NAMES, MaterialParams
from .fem.assembly import BoundaryConditions, Discretization
from .fem.mesh import build_mesh
from .fem.timestepping import HOUR, NewtonSettings, TimeIntegration
from .random_field import ExponentialKernel, LogNormalSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MeshConfig:
    nx: int
    ny: int
    lx: float
    ly: float
    exterior_side: str


@dataclass(frozen=True)
class BoundaryConfig:
    kind: str
    theta_ext: float
    phi_ext: float
    theta_int: float
    phi_int: float
    theta_in: float
    phi_in: float
    h_theta: float
    h_phi: float


@dataclass(frozen=True)
class TimeConfig:
    gamma: float
    horizon_hours: float
    steps: int
    startup_steps: int


@dataclass(frozen=True)
class NewtonConfig:
    tol: float
    max_iter: int
    max_halvings: int
    newton_switch: float


@dataclass(frozen=True)
class RandomFieldConfig:
    lx: float
    ly: float
    modes: int


@dataclass(frozen=True)
class SurrogateConfig:
    degree: int
    level: int | None
    tol: float
    error_samples: int
    study_modes: list
    study_degrees: list


@dataclass(frozen=True)
class ObservationConfig:
    probes: list | None
    times: list | None
    sigma_theta: float
    sigma_phi: float
    covariance: str
    replicates: int


@dataclass(frozen=True)
class McmcConfig:
    samples: int
    warmup: int
    proposal_scale: float
    burn_in: float
    prior_samples: int
    density_points: int


@dataclass(frozen=True)
class SeedConfig:
    truth: int
    noise: int
    mcmc: int
    error_samples: int


_SECTIONS = {
    "mesh": MeshConfig,
    "boundary": BoundaryConfig,
    "time": TimeConfig,
    "newton": NewtonConfig,
    "random_field": RandomFieldConfig,
    "surrogate": SurrogateConfig,
    "observations": ObservationConfig,
    "mcmc": McmcConfig,
    "seeds": SeedConfig,
}


@dataclass(frozen=True)
class RunConfig:
    mesh: MeshConfig
    boundary: BoundaryConfig
    time: TimeConfig
    newton: NewtonConfig
    prior: dict  # name -> (mean, std)
    random_field: RandomFieldConfig
    surrogate: SurrogateConfig
    observations: ObservationConfig
    mcmc: McmcConfig
    seeds: SeedConfig
    raw: dict

    # builders -------------------------------------------------------
    def build_mesh(self):
        m = self.mesh
        return build_mesh(m.nx, m.ny, m.lx, m.ly, m.exterior_side)

    def boundary_conditions(self) -> BoundaryConditions:
        return BoundaryConditions(**{f.name: getattr(self.boundary, f.name) for f in fields(BoundaryConfig)})

    def discretization(self, mesh=None) -> Discretization:
        return Discretization(mesh or self.build_mesh(), self.boundary_conditions())

    def time_integration(self) -> TimeIntegration:
        t = self.time
        return TimeIntegration(gamma=t.gamma, dt=t.horizon_hours * HOUR / (t.steps - 1), steps=t.steps,
                               startup_steps=t.startup_steps)

    def newton_settings(self) -> NewtonSettings:
        n = self.newton
        return NewtonSettings(n.tol, n.max_iter, n.max_halvings, n.newton_switch)

    def specs(self) -> dict:
        return {k: LogNormalSpec(*self.prior[k]) for k in PARAM_NAMES}

    def prior_means(self) -> MaterialParams:
        return MaterialParams(**{k: self.prior[k][0] for k in PARAM_NAMES})

    def kernel(self) -> ExponentialKernel:
        return ExponentialKernel(self.random_field.lx, self.random_field.ly)

    def with_seed(self, seed: int) -> "RunConfig":
        """Replace every named seed by a fixed offset from ``seed``."""
        raw = copy.deepcopy(self.raw)
        for k, name in enumerate(("truth", "noise", "mcmc", "error_samples")):
            raw["seeds"][name] = int(seed) + k
        return parse_config(raw)

    def with_overrides(self, section: str, **values) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in values.items():
            if k not in raw.get(section, {}):
                raise ConfigError(f"unknown key {section}.{k}")
            raw[section][k] = v
        return parse_config(raw)


def _section(raw: dict, name: str, cls):
    if name not in raw:
        raise ConfigError(f"missing config section '{name}'")
    body = raw[name]
    if not isinstance(body, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    names = [f.name for f in fields(cls)]
    for key in names:
        if key not in body:
            raise ConfigError(f"missing config key '{name}.{key}'")
    extra = sorted(set(body) - set(names))
    if extra:
        raise ConfigError(f"unknown config key '{name}.{extra[0]}'")
    return cls(**{k: body[k] for k in names})


def _require(cond, key, msg):
    if not cond:
        raise ConfigError(f"invalid '{key}': {msg}")


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    sections = {name: _section(raw, name, cls) for name, cls in _SECTIONS.items()}
    if "prior" not in raw or not isinstance(raw["prior"], dict):
        raise ConfigError("missing config section 'prior'")
    prior = {}
    for name in PARAM_NAMES:
        if name not in raw["prior"]:
            raise ConfigError(f"missing config key 'prior.{name}'")
        pair = raw["prior"][name]
        _require(isinstance(pair, (list, tuple)) and len(pair) == 2, f"prior.{name}", "expected [mean, std]")
        _require(pair[0] > 0 and pair[1] >= 0, f"prior.{name}", "mean must be positive, std nonnegative")
        prior[name] = (float(pair[0]), float(pair[1]))
    extra = sorted(set(raw["prior"]) - set(PARAM_NAMES))
    if extra:
        raise ConfigError(f"unknown config key 'prior.{extra[0]}'")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"prior"})
    if unknown:
        raise ConfigError(f"unknown config section '{unknown[0]}'")
    cfg = RunConfig(prior=prior, raw=copy.deepcopy(raw), **sections)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    m = cfg.mesh
    _require(m.nx >= 2, "mesh.nx", "need at least 2 columns")
    _require(m.ny >= 2, "mesh.ny", "need at least 2 rows")
    _require(m.lx > 0, "mesh.lx", "must be positive")
    _require(m.ly > 0, "mesh.ly", "must be positive")
    _require(m.exterior_side in ("left", "right", "top", "bottom"), "mesh.exterior_side", "unknown side")
    b = cfg.boundary
    _require(b.kind in ("dirichlet", "robin"), "boundary.kind", "must be dirichlet or robin")
    for key in ("phi_ext", "phi_int", "phi_in"):
        _require(0 < getattr(b, key) < 1, f"boundary.{key}", "relative humidity must lie in (0, 1)")
    for key in ("theta_ext", "theta_int", "theta_in"):
        _require(getattr(b, key) > -273.15, f"boundary.{key}", "below absolute zero")
    _require(b.h_theta > 0, "boundary.h_theta", "must be positive")
    _require(b.h_phi > 0, "boundary.h_phi", "must be positive")
    t = cfg.time
    _require(0 <= t.gamma <= 1, "time.gamma", "must lie in [0, 1]")
    _require(t.horizon_hours > 0, "time.horizon_hours", "must be positive")
    _require(t.steps >= 2, "time.steps", "need at least 2 stored steps")
    _require(t.startup_steps >= 0, "time.startup_steps", "must be nonnegative")
    n = cfg.newton
    _require(n.tol > 0, "newton.tol", "must be positive")
    _require(n.max_iter >= 1, "newton.max_iter", "must be at least 1")
    _require(n.max_halvings >= 0, "newton.max_halvings", "must be nonnegative")
    rf = cfg.random_field
    _require(rf.lx > 0, "random_field.lx", "must be positive")
    _require(rf.ly > 0, "random_field.ly", "must be positive")
    n_elem = 2 * (m.nx - 1) * (m.ny - 1)
    _require(1 <= rf.modes <= n_elem, "random_field.modes", f"must lie in [1, {n_elem}]")
    s = cfg.surrogate
    _require(s.degree >= 0, "surrogate.degree", "must be nonnegative")
    _require(s.level is None or s.level >= 1, "surrogate.level", "must be null or at least 1")
    _require(s.tol > 0, "surrogate.tol", "must be positive")
    _require(s.error_samples >= 1, "surrogate.error_samples", "must be at least 1")
    _require(all(1 <= k <= n_elem for k in s.study_modes), "surrogate.study_modes", f"entries in [1, {n_elem}]")
    _require(all(p >= 0 for p in s.study_degrees), "surrogate.study_degrees", "entries must be nonnegative")
    o = cfg.observations
    n_nodes = m.nx * m.ny
    _require(o.probes is None or all(0 <= p < n_nodes for p in o.probes), "observations.probes",
             "node index out of range")
    _require(o.times is None or all(0 <= k < t.steps for k in o.times), "observations.times",
             "step index out of range")
    _require(o.sigma_theta > 0, "observations.sigma_theta", "must be positive")
    _require(o.sigma_phi > 0, "observations.sigma_phi", "must be positive")
    _require(o.covariance in ("diagonal", "empirical"), "observations.covariance", "diagonal or empirical")
    _require(o.replicates >= 2, "observations.replicates", "need at least 2 replicates")
    c = cfg.mcmc
    _require(c.samples >= 1, "mcmc.samples", "must be at least 1")
    _require(c.warmup >= 0, "mcmc.warmup", "must be nonnegative")
    _require(c.proposal_scale > 0, "mcmc.proposal_scale", "must be positive")
    _require(0 <= c.burn_in < 1, "mcmc.burn_in", "must lie in [0, 1)")
    _require(c.prior_samples >= 2, "mcmc.prior_samples", "need at least 2 samples")
    _require(c.density_points >= 2, "mcmc.density_points", "need at least 2 grid points")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(raw)
