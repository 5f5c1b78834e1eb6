"""Run configuration: JSON in, validated dataclasses out.

Every section is optional; missing keys take the nominal model values.
Unknown keys are rejected, and errors name the offending key by its dotted
path (``model.noise_std``). Malformed JSON is reported with line and column.
"""
import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .forward import AUX_NAMES, ComplementaryParams, HeatProblem, default_sensors
from .hdsa import LowRankSettings, PipelineSettings
from .mesh import build_mesh
from .newton import SolverConfig
from .oracle1d import ScalarProblem
from .prior import PriorOperators, PriorSpec


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path, ``line`` the JSON line."""

    def __init__(self, message, key=None, line=None, column=None):
        self.key, self.line, self.column = key, line, column
        where = f"{key}: " if key else ""
        at = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{where}{message}{at}")


@dataclass
class MeshConfig:
    cells_per_side: int = 32


@dataclass
class PriorConfig:
    alpha: float = 5.0
    phi: float = 0.01


@dataclass
class ModelConfig:
    t_ambient: float = 22.0
    sigma_x: list = field(default_factory=lambda: [0.8, 0.1])
    aux_nominal: dict = field(default_factory=dict)
    aux_scale: float = 0.05
    experimental_scale: float = 1.0
    noise_std: float = 0.1
    sensors: Optional[list] = None


@dataclass
class SolverSection:
    grad_tol: float = 1e-8
    max_newton: int = 50
    max_cg: int = 200
    c_armijo: float = 1e-4
    max_backtrack: int = 30
    gauss_newton: bool = False
    floor_tol: float = 1e-6


@dataclass
class InverseConfig:
    method: str = "cg"
    rtol: float = 1e-12
    max_iter: int = 1000


@dataclass
class LowRankConfig:
    rank: int = 40
    threshold: float = 0.1
    gauss_newton: bool = False


@dataclass
class SamplingConfig:
    n_samples: int = 100
    truth: str = "prior_sample"
    noiseless: bool = False
    save_arrays: bool = True


@dataclass
class SpreadConfig:
    pool_size: int = 600
    group_sizes: list = field(default_factory=lambda: [20, 100, 500])
    n_groups: int = 10


@dataclass
class OracleConfig:
    prior_mean: float = 1.3
    prior_var: float = 0.1
    theta: float = -0.3
    perturbed_theta: float = -0.29
    noise_std: float = 26.0
    sensors: Optional[list] = None
    mode2_rate: float = 4.0
    consistent: bool = False
    m_true: Optional[float] = None
    n_samples: int = 10


@dataclass
class RunConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    solver: SolverSection = field(default_factory=SolverSection)
    inverse: InverseConfig = field(default_factory=InverseConfig)
    lowrank: LowRankConfig = field(default_factory=LowRankConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    spread: SpreadConfig = field(default_factory=SpreadConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0
    out: Optional[str] = None


# -- parsing -------------------------------------------------------------------


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError("expected a JSON object", key=path or "<root>")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError("unknown key", key=f"{path}.{key}" if path else key)
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), data[name], sub)
        else:
            kwargs[name] = _coerce(data[name], default, sub)
    return cls(**kwargs)


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("expected true or false", key=key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", key=key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", key=key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError("expected a string", key=key)
        return value
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError("expected a list", key=key)
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError("expected an object", key=key)
    return value


def _finite(value, key, lo=None, hi=None, lo_open=False):
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        raise ConfigError("must be a finite number", key=key)
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise ConfigError(f"must be {'>' if lo_open else '>='} {lo}, got {value}", key=key)
    if hi is not None and value > hi:
        raise ConfigError(f"must be <= {hi}, got {value}", key=key)


def validate(cfg):
    """Range checks; raises :class:`ConfigError` naming the key."""
    if cfg.mesh.cells_per_side < 2:
        raise ConfigError("must be at least 2", key="mesh.cells_per_side")
    _finite(cfg.prior.alpha, "prior.alpha", 0, lo_open=True)
    _finite(cfg.prior.phi, "prior.phi", 0, lo_open=True)
    m = cfg.model
    _finite(m.t_ambient, "model.t_ambient")
    if len(m.sigma_x) != 2:
        raise ConfigError("expected two spreads", key="model.sigma_x")
    for k, v in enumerate(m.sigma_x):
        _finite(v, f"model.sigma_x[{k}]", 0, lo_open=True)
    for name, v in m.aux_nominal.items():
        if name not in AUX_NAMES:
            raise ConfigError("unknown auxiliary parameter", key=f"model.aux_nominal.{name}")
        _finite(v, f"model.aux_nominal.{name}")
    _finite(m.aux_scale, "model.aux_scale", 0)
    _finite(m.experimental_scale, "model.experimental_scale", 0)
    # sigma = 0 would make the noise precision infinite; noiseless data is a sampling option
    _finite(m.noise_std, "model.noise_std", 0, lo_open=True)
    if m.sensors is not None:
        pts = np.asarray(m.sensors, dtype=float) if _is_points(m.sensors) else None
        if pts is None or pts.size == 0 or np.any(pts < 0) or np.any(pts > 1):
            raise ConfigError("expected a nonempty list of [x1, x2] points in the unit square",
                              key="model.sensors")
    s = cfg.solver
    _finite(s.grad_tol, "solver.grad_tol", 0, lo_open=True)
    _finite(s.floor_tol, "solver.floor_tol", 0, lo_open=True)
    _finite(s.c_armijo, "solver.c_armijo", 0, 1, lo_open=True)
    for key in ("max_newton", "max_cg", "max_backtrack"):
        if getattr(s, key) < 1:
            raise ConfigError("must be at least 1", key=f"solver.{key}")
    if cfg.inverse.method not in ("cg", "lowrank"):
        raise ConfigError("must be 'cg' or 'lowrank'", key="inverse.method")
    _finite(cfg.inverse.rtol, "inverse.rtol", 0, 1, lo_open=True)
    if cfg.inverse.max_iter < 1:
        raise ConfigError("must be at least 1", key="inverse.max_iter")
    if cfg.lowrank.rank < 1:
        raise ConfigError("must be at least 1", key="lowrank.rank")
    _finite(cfg.lowrank.threshold, "lowrank.threshold", 0)
    if cfg.sampling.n_samples < 1:
        raise ConfigError("must be at least 1", key="sampling.n_samples")
    if cfg.sampling.truth not in ("prior_sample", "prior_mean"):
        raise ConfigError("must be 'prior_sample' or 'prior_mean'", key="sampling.truth")
    sp = cfg.spread
    if sp.n_groups < 2:
        raise ConfigError("must be at least 2", key="spread.n_groups")
    if not sp.group_sizes or any(not isinstance(n, int) or n < 1 for n in sp.group_sizes):
        raise ConfigError("expected positive integers", key="spread.group_sizes")
    if max(sp.group_sizes) > sp.pool_size:
        raise ConfigError("largest group exceeds the pool", key="spread.pool_size")
    o = cfg.oracle
    _finite(o.noise_std, "oracle.noise_std", 0, lo_open=True)
    _finite(o.prior_var, "oracle.prior_var", 0, lo_open=True)
    for key in ("prior_mean", "theta", "perturbed_theta", "mode2_rate"):
        _finite(getattr(o, key), f"oracle.{key}")
    if o.sensors is not None:
        if not all(isinstance(v, (int, float)) and 0 < v < math.pi for v in o.sensors) or not o.sensors:
            raise ConfigError("sensors must lie strictly inside (0, pi)", key="oracle.sensors")
    if o.m_true is not None:
        _finite(o.m_true, "oracle.m_true")
    if o.n_samples < 1:
        raise ConfigError("must be at least 1", key="oracle.n_samples")
    if cfg.out is not None and not isinstance(cfg.out, str):
        raise ConfigError("expected a string", key="out")
    if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2**64:
        raise ConfigError("must be an unsigned 64-bit integer", key="seed")
    return cfg


def _is_points(v):
    return isinstance(v, list) and all(
        isinstance(p, list) and len(p) == 2 and all(isinstance(c, (int, float)) for c in p) for p in v)


def config_from_dict(data):
    return validate(_build(RunConfig, data, ""))


def parse_config_text(text):
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", line=exc.lineno, column=exc.colno) from None
    return config_from_dict(data)


def parse_config(path):
    """Read and validate a JSON config file."""
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def dump_config(cfg):
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


# -- builders ------------------------------------------------------------------


def build_params(cfg, n_y):
    m = cfg.model
    return ComplementaryParams.nominal(n_y=n_y, noise_std=m.noise_std, aux_scale=m.aux_scale,
                                       experimental_scale=m.experimental_scale,
                                       overrides=m.aux_nominal)


def build_problem(cfg):
    """The discretized heat problem described by ``cfg``."""
    mesh = build_mesh(cfg.mesh.cells_per_side)
    prior = PriorOperators(mesh, PriorSpec(cfg.prior.alpha, cfg.prior.phi))
    sensors = default_sensors() if cfg.model.sensors is None else np.asarray(cfg.model.sensors, dtype=float)
    params = build_params(cfg, len(sensors))
    return HeatProblem(mesh, prior, params, sensors, t_amb=cfg.model.t_ambient,
                       sigma_x=tuple(cfg.model.sigma_x))


def pipeline_settings(cfg):
    s = cfg.solver
    solver = SolverConfig(grad_tol=s.grad_tol, max_newton=s.max_newton, max_cg=s.max_cg,
                          c_armijo=s.c_armijo, max_backtrack=s.max_backtrack,
                          gauss_newton=s.gauss_newton, floor_tol=s.floor_tol)
    lr = cfg.lowrank
    return PipelineSettings(
        solver=solver, inverse=cfg.inverse.method, inverse_rtol=cfg.inverse.rtol,
        inverse_maxiter=cfg.inverse.max_iter,
        lowrank=LowRankSettings(lr.rank, lr.threshold, lr.gauss_newton) if cfg.inverse.method == "lowrank" else None,
        truth=cfg.sampling.truth, noiseless=cfg.sampling.noiseless,
    )


def scalar_problem(cfg):
    o = cfg.oracle
    kw = dict(prior_mean=o.prior_mean, prior_var=o.prior_var, theta=o.theta, noise_std=o.noise_std,
              mode2_rate=o.mode2_rate, consistent=o.consistent)
    if o.sensors is not None:
        kw["sensors"] = tuple(o.sensors)
    return ScalarProblem(**kw)


class ProblemFactory:
    """Picklable zero-argument callable that builds the problem for a config."""

    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self):
        return build_problem(self.cfg)

