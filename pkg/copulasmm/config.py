"""Configuration loader and defaults.

A run is described by one JSON file with nested sections; every field has a
default, so a partial file is valid. Only the output directory and the worker
count may be overridden from the environment.
"""
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Optional
import json
import os

from .errors import ConfigError

ENV_OUTPUT_DIR = "COPULASMM_OUTPUT_DIR"
ENV_WORKERS = "COPULASMM_WORKERS"


@dataclass
class DataConfig:
    path: Optional[str] = None
    date_column: Optional[str] = None
    columns: List[str] = field(default_factory=list)
    exog_column: Optional[str] = None
    factor_column: Optional[str] = None
    # outputs of a previous filter run
    residuals_path: Optional[str] = None
    factor_path: Optional[str] = None


@dataclass
class MarginsConfig:
    mean: str = "ar1"
    variance: str = "garch"
    innovations: str = "skewt"
    overrides: Dict[str, Dict[str, str]] = field(default_factory=dict)


@dataclass
class FactorSourceConfig:
    model: str = "ar1"
    lag: int = 0
    # likelihood of the log-abs GARCH/GJR factor fits
    innovations: str = "skewt"


@dataclass
class CopulaConfig:
    groups: Dict[str, Any] = field(default_factory=dict)
    p_alpha: int = 1
    factor_dist: str = "skewt"
    eps_dist: str = "skewt"
    z_dist: Optional[str] = None
    ties: Dict[str, str] = field(default_factory=dict)
    fixed: Dict[str, float] = field(default_factory=dict)
    bounds: Dict[str, List[float]] = field(default_factory=dict)
    start: Dict[str, float] = field(default_factory=dict)


@dataclass
class MomentsConfig:
    spearman: bool = True
    taus: List[float] = field(default_factory=lambda: [0.15, 0.25, 0.35, 0.65, 0.75, 0.85])
    kendall: bool = False
    per_group: bool = True


@dataclass
class EstimationConfig:
    S: int = 25
    B: int = 500
    pi_T: float = 0.05
    n_draws: int = 1000
    seed: int = 0
    two_step: bool = False
    n_starts: int = 64
    restarts: int = 1
    xatol: float = 1e-6
    fatol: float = 1e-10
    max_evals: Optional[int] = None
    bootstrap_mode: str = "joint"
    resample: bool = True
    j_mode: str = "auto"


@dataclass
class MonteCarloConfig:
    design: str = "design1"
    z_mode: str = "observable"
    n: Optional[int] = None
    T: int = 500
    S: int = 25
    reps: int = 100
    seed: int = 0
    B: int = 500
    n_draws: int = 1000
    n_starts: int = 64
    pi_T: float = 0.05
    two_step: bool = False
    burn: int = 500
    reference_draws: int = 200_000
    bootstrap_mode: str = "joint"


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    margins: MarginsConfig = field(default_factory=MarginsConfig)
    factor_source: FactorSourceConfig = field(default_factory=FactorSourceConfig)
    copula: CopulaConfig = field(default_factory=CopulaConfig)
    moments: MomentsConfig = field(default_factory=MomentsConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    montecarlo: MonteCarloConfig = field(default_factory=MonteCarloConfig)
    output_dir: str = "results"
    workers: int = 1
    # logging
    debug_level: str = "INFO"
    log_file: str = "copulasmm.log"
    log_max_bytes: int = 1000000
    log_backup_count: int = 5

    def to_dict(self) -> Dict[str, Any]:
        return _as_dict(self)


def _as_dict(obj) -> Dict[str, Any]:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        out[f.name] = _as_dict(value) if is_dataclass(value) else value
    return out


def _fill(target, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(target)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in {where}; expected one of {sorted(known)}")
        current = getattr(target, key)
        if is_dataclass(current):
            _fill(current, value, f"{where}.{key}")
        else:
            setattr(target, key, value)


def config_from_dict(data: Dict[str, Any]) -> Config:
    cfg = Config()
    _fill(cfg, data, "config")
    validate(cfg)
    return cfg


def validate(cfg: Config):
    if cfg.factor_source.lag < 0:
        raise ConfigError(f"factor_source.lag must be >= 0, got {cfg.factor_source.lag}")
    if cfg.factor_source.innovations not in ("gaussian", "skewt"):
        raise ConfigError(f"factor_source.innovations must be 'gaussian' or 'skewt', "
                          f"got {cfg.factor_source.innovations!r}")
    if cfg.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    for slot, pair in cfg.copula.bounds.items():
        if len(pair) != 2 or not pair[0] < pair[1]:
            raise ConfigError(f"bounds for {slot} must be [lo, hi] with lo < hi, got {pair}")
    est = cfg.estimation
    if est.S < 1 or est.B < 2 or est.n_draws < 1 or est.n_starts < 1 or not est.pi_T > 0:
        raise ConfigError("estimation needs S >= 1, B >= 2, n_draws >= 1, n_starts >= 1 and pi_T > 0")
    if cfg.debug_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise ConfigError(f"unknown debug_level {cfg.debug_level!r}")


def apply_env(cfg: Config, environ=None) -> Config:
    environ = os.environ if environ is None else environ
    if environ.get(ENV_OUTPUT_DIR):
        cfg.output_dir = environ[ENV_OUTPUT_DIR]
    if environ.get(ENV_WORKERS):
        try:
            cfg.workers = int(environ[ENV_WORKERS])
        except ValueError as exc:
            raise ConfigError(f"{ENV_WORKERS} must be an integer, got {environ[ENV_WORKERS]!r}") from exc
        if cfg.workers < 1:
            raise ConfigError(f"{ENV_WORKERS} must be >= 1")
    return cfg


def load_config(path: Optional[str] = None, environ=None) -> Config:
    if not path:
        return apply_env(Config(), environ)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(data)
    return apply_env(cfg, environ)
