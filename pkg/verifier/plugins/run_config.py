"""Run configuration: a versioned JSON document with strict keys.

Top level keys: schema_version, model, engine, estimation, suites, output_dir,
workers, seed. See README.md for the full key table.
"""
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../../simulation_integration')))

from errors import ConfigError
from model_core import DriftSpec, ModelParams, canonical_model, cycle_drift_constant, zero_model
from sde_engine import EngineConfig
from presets import PLACEHOLDER_M1_FACTOR, get_preset

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "SWITCHING_OUTPUT_DIR"
# Return-time horizons cover this many expected return times from the farthest start.
TAU_HORIZON_FACTOR = 10.0

KNOWN_SUITES = (
    "conditions", "engine", "lemma1", "lemma2", "lemma50", "lemma5-8", "lemma9",
    "lemma5a-8fr", "lemma9a", "corollary4", "lemma11", "martingale", "proposition1",
    "theorem2", "remark1", "remark2",
)
# "all" expands to every suite except the exploratory ones.
EXPLORATORY_SUITES = ("remark1",)

PARAM_KEYS = ("d", "lambda_minus", "lambda_plus", "r_minus", "r_plus", "R_minus", "R_plus", "M", "M1")
MODEL_KEYS = ("preset", "drift", "kappa_minus", "kappa_plus") + PARAM_KEYS
ENGINE_KEYS = ("dt", "horizon", "max_abs_state")
TOP_KEYS = ("schema_version", "model", "engine", "estimation", "suites", "output_dir", "workers", "seed")


@dataclass
class ModelSection:
    preset: Optional[str] = None
    drift: str = "canonical"
    kappa_minus: Optional[float] = None
    kappa_plus: Optional[float] = None
    overrides: Dict[str, float] = field(default_factory=dict)


@dataclass
class EngineSection:
    dt: Optional[float] = None
    horizon: Optional[float] = None
    max_abs_state: float = 1e9


@dataclass
class EstimationSection:
    replicas: int = 4000
    tau_replicas: Optional[int] = None
    confidence: float = 0.99
    radius_multipliers: List[float] = field(default_factory=lambda: [2.0, 5.0, 10.0])
    tau_radius_multipliers: List[float] = field(default_factory=lambda: [2.0, 4.0, 8.0, 16.0])
    t_grid: List[float] = field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0, 2.0])
    reference_time: float = 20.0
    bins: int = 64
    fit_tolerance_quadratic: float = 0.3
    fit_tolerance_sixth: float = 0.5
    coefficient_tolerance: float = 0.15
    epsilon_fraction: float = 0.5
    block_size: int = 1024
    audit_samples: int = 10000
    sweep_tuples: int = 10000
    tau_dt: Optional[float] = None
    max_replica_scale: int = 256

    @property
    def hitting_replicas(self) -> int:
        return self.tau_replicas or self.replicas


ESTIMATION_KEYS = tuple(f.name for f in dataclasses.fields(EstimationSection))


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    engine: EngineSection = field(default_factory=EngineSection)
    estimation: EstimationSection = field(default_factory=EstimationSection)
    suites: List[str] = field(default_factory=lambda: ["conditions"])
    output_dir: str = "results"
    workers: int = 1
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    @property
    def horizon_pinned(self) -> bool:
        return self.engine.horizon is not None

    @property
    def search_m1(self) -> bool:
        """M1 comes from the occupation-time search unless the config pins it."""
        if "M1" in self.model.overrides:
            return False
        if self.model.preset:
            return get_preset(self.model.preset).search_m1
        return True

    def build_params(self, m1: Optional[float] = None) -> ModelParams:
        values: Dict[str, Any] = {}
        kappa_minus, kappa_plus = self.model.kappa_minus, self.model.kappa_plus
        if self.model.preset:
            preset = get_preset(self.model.preset)
            values.update(preset.params.to_dict())
            kappa_minus = preset.kappa_minus if kappa_minus is None else kappa_minus
            kappa_plus = preset.kappa_plus if kappa_plus is None else kappa_plus
            if self.model.kappa_minus is not None:
                values.update(r_minus=kappa_minus, R_minus=kappa_minus)
            if self.model.kappa_plus is not None:
                values.update(r_plus=kappa_plus, R_plus=kappa_plus)
        else:
            if self.model.drift == "canonical":
                for key, kappa in (("kappa_minus", kappa_minus), ("kappa_plus", kappa_plus)):
                    if kappa is None:
                        raise ConfigError("required when no preset is named", f"model.{key}")
                values.update(r_minus=kappa_minus, R_minus=kappa_minus, r_plus=kappa_plus, R_plus=kappa_plus)
            values.setdefault("M", 1.0)
        values.update(self.model.overrides)
        for key in ("d", "lambda_minus", "lambda_plus", "r_minus", "r_plus", "R_minus", "R_plus"):
            if key not in values:
                raise ConfigError("required when no preset is named", f"model.{key}")
        if "M1" not in values:
            values["M1"] = PLACEHOLDER_M1_FACTOR * values["M"]
        if m1 is not None:
            values["M1"] = m1
        return ModelParams(**values)

    def build_spec(self, params: ModelParams) -> DriftSpec:
        if self.model.drift == "zero":
            return zero_model()
        kappa_minus, kappa_plus = self.model.kappa_minus, self.model.kappa_plus
        if self.model.preset:
            preset = get_preset(self.model.preset)
            kappa_minus = preset.kappa_minus if kappa_minus is None else kappa_minus
            kappa_plus = preset.kappa_plus if kappa_plus is None else kappa_plus
        return canonical_model(params, kappa_minus, kappa_plus)

    def engine_config(self, params: ModelParams) -> EngineConfig:
        dt = self.engine.dt if self.engine.dt is not None else EngineConfig.default_dt(params)
        horizon = self.engine.horizon if self.engine.horizon is not None else default_horizon(params)
        return EngineConfig(dt=dt, horizon=horizon, rng_seed=self.seed, stream_id=0,
                            max_abs_state=self.engine.max_abs_state)

    def expanded_suites(self) -> List[str]:
        out: List[str] = []
        for suite in self.suites:
            names = [s for s in KNOWN_SUITES if s not in EXPLORATORY_SUITES] if suite == "all" else [suite]
            for name in names:
                if name not in out:
                    out.append(name)
        return out

    def to_dict(self) -> Dict[str, Any]:
        model = {k: v for k, v in (("preset", self.model.preset), ("drift", self.model.drift),
                                   ("kappa_minus", self.model.kappa_minus),
                                   ("kappa_plus", self.model.kappa_plus)) if v is not None}
        model.update(self.model.overrides)
        return {
            "schema_version": self.schema_version,
            "model": model,
            "engine": dataclasses.asdict(self.engine),
            "estimation": dataclasses.asdict(self.estimation),
            "suites": list(self.suites),
            "output_dir": self.output_dir,
            "workers": self.workers,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        """Hash of everything that can change a number: worker count and output location are excluded."""
        payload = self.to_dict()
        payload.pop("workers")
        payload.pop("output_dir")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def default_horizon(params: ModelParams) -> float:
    return 1e4 * (1.0 / params.lambda_minus + 1.0 / params.lambda_plus)


def tau_horizon(params: ModelParams, epsilon: float, radius: float) -> float:
    """Horizon for return-time ensembles started at |x| = radius.

    |X|^2 loses about c per cycle of mean length c1, so E tau is of order |x|^2 c1 / c; the
    horizon is TAU_HORIZON_FACTOR times that, never below default_horizon."""
    c = cycle_drift_constant(params, epsilon)
    if not c > 0:
        return default_horizon(params)
    cycle = 1.0 / params.lambda_minus + 1.0 / params.lambda_plus
    return max(default_horizon(params), TAU_HORIZON_FACTOR * radius ** 2 * cycle / c)


def _reject_unknown(data: Dict[str, Any], allowed, path: str):
    for key in data:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key '{key}'", where)


def _number(value, path: str, positive: bool = False, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", path)
    if integer and not float(value).is_integer():
        raise ConfigError(f"expected an integer, got {value!r}", path)
    if not math.isfinite(value):
        raise ConfigError(f"expected a finite number, got {value!r}", path)
    if positive and value <= 0:
        raise ConfigError(f"must be positive, got {value!r}", path)
    return int(value) if integer else float(value)


def _number_list(value, path: str) -> List[float]:
    if not isinstance(value, list) or not value:
        raise ConfigError("expected a non-empty list of numbers", path)
    return [_number(v, f"{path}[{i}]", positive=True) for i, v in enumerate(value)]


def _parse_model(data: Dict[str, Any]) -> ModelSection:
    if not isinstance(data, dict):
        raise ConfigError("expected an object", "model")
    _reject_unknown(data, MODEL_KEYS, "model")
    section = ModelSection()
    if "preset" in data:
        get_preset(data["preset"])
        section.preset = data["preset"]
    if "drift" in data:
        if data["drift"] not in ("canonical", "zero"):
            raise ConfigError(f"expected 'canonical' or 'zero', got {data['drift']!r}", "model.drift")
        section.drift = data["drift"]
    for key in ("kappa_minus", "kappa_plus"):
        if key in data:
            setattr(section, key, _number(data[key], f"model.{key}"))
    for key in PARAM_KEYS:
        if key in data:
            section.overrides[key] = _number(data[key], f"model.{key}", integer=(key == "d"))
    return section


def _parse_engine(data: Dict[str, Any]) -> EngineSection:
    if not isinstance(data, dict):
        raise ConfigError("expected an object", "engine")
    _reject_unknown(data, ENGINE_KEYS, "engine")
    return EngineSection(**{k: _number(v, f"engine.{k}", positive=True) for k, v in data.items()})


def _parse_estimation(data: Dict[str, Any]) -> EstimationSection:
    if not isinstance(data, dict):
        raise ConfigError("expected an object", "estimation")
    _reject_unknown(data, ESTIMATION_KEYS, "estimation")
    values: Dict[str, Any] = {}
    for key, value in data.items():
        path = f"estimation.{key}"
        if key in ("radius_multipliers", "tau_radius_multipliers", "t_grid"):
            values[key] = _number_list(value, path)
        elif key in ("replicas", "tau_replicas", "bins", "block_size", "audit_samples", "sweep_tuples",
                     "max_replica_scale"):
            values[key] = _number(value, path, positive=True, integer=True)
        else:
            values[key] = _number(value, path, positive=True)
    section = EstimationSection(**values)
    if not 0.0 < section.confidence < 1.0:
        raise ConfigError(f"must lie in (0, 1), got {section.confidence}", "estimation.confidence")
    if not 0.0 < section.epsilon_fraction < 1.0:
        raise ConfigError(f"must lie in (0, 1), got {section.epsilon_fraction}", "estimation.epsilon_fraction")
    if max(section.t_grid) >= section.reference_time:
        raise ConfigError("must exceed every entry of estimation.t_grid", "estimation.reference_time")
    for key in ("radius_multipliers", "tau_radius_multipliers"):
        grid = getattr(section, key)
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("must be strictly increasing", f"estimation.{key}")
    return section


def parse_config(data: Dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    _reject_unknown(data, TOP_KEYS, "")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {version!r}, expected {SCHEMA_VERSION}", "schema_version")
    config = RunConfig(
        model=_parse_model(data.get("model", {})),
        engine=_parse_engine(data.get("engine", {})),
        estimation=_parse_estimation(data.get("estimation", {})),
    )
    if "suites" in data:
        suites = data["suites"]
        if not isinstance(suites, list) or not suites:
            raise ConfigError("expected a non-empty list of suite ids", "suites")
        for i, suite in enumerate(suites):
            if suite != "all" and suite not in KNOWN_SUITES:
                raise ConfigError(f"unknown suite '{suite}'", f"suites[{i}]")
        config.suites = list(suites)
    if "output_dir" in data:
        if not isinstance(data["output_dir"], str) or not data["output_dir"]:
            raise ConfigError("expected a non-empty string", "output_dir")
        config.output_dir = data["output_dir"]
    if "workers" in data:
        config.workers = _number(data["workers"], "workers", positive=True, integer=True)
    if "seed" in data:
        config.seed = _number(data["seed"], "seed", integer=True)
        if config.seed < 0:
            raise ConfigError("must be non-negative", "seed")

    # Validates the parameter invariants now so errors carry their key path.
    params = config.build_params()
    config.build_spec(params)
    config.engine_config(params)
    return config


def load_config(path: str) -> RunConfig:
    load_dotenv()
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
    config = parse_config(data)
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        logger.info(f"Output directory overridden by {OUTPUT_DIR_ENV}: {env_dir}")
        config.output_dir = env_dir
    logger.info(f"Loaded configuration {path} (hash {config.config_hash()})")
    return config
