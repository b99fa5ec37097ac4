"""Experiment configuration: one strict JSON document, validated before any work."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import jsonschema

from .errors import ConfigError, InvalidParams
from .processes import DEFAULT_MEMORY_CAP, KINDS, ProcessSpec
from .seq_analysis import RATE_METHODS

SUITES = ("section2", "section3", "all")
FORMATS = ("csv", "json", "svg")

_num_list = {"type": "array", "items": {"type": "number"}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "exporate experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["processes"],
    "properties": {
        "suite": {"enum": list(SUITES)},
        "seed": {"type": "integer", "minimum": 0},
        "n_traj": {"type": "integer", "minimum": 1},
        "processes": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind", "params", "horizon"],
                "properties": {
                    "kind": {"enum": list(KINDS)},
                    "params": {"type": "object"},
                    "seed": {"type": "integer", "minimum": 0},
                    "horizon": {"type": "integer", "minimum": 1},
                    "n_traj": {"type": "integer", "minimum": 1},
                    "name": {"type": "string"},
                },
            },
        },
        "eps_grid": _num_list,
        "b_grid": _num_list,
        "gamma_grid": _num_list,
        "R_grid": _num_list,
        "gamma": {"type": "number", "exclusiveMaximum": 0},
        "estimator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "A_method": {"enum": list(RATE_METHODS)},
                "A_window": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "traj_method": {"enum": list(RATE_METHODS)},
                "traj_window": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "tail_window": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_rel_se": {"type": "number", "exclusiveMinimum": 0},
                "methods": {"type": "array", "items": {"enum": list(RATE_METHODS)}, "minItems": 1},
            },
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                k: {"type": "number", "minimum": 0}
                for k in (
                    "rate",
                    "hitting_rel",
                    "risk_se",
                    "growth",
                    "growth_fraction",
                    "censor_max",
                    "vacuity_margin",
                    "pathwise_offset",
                    "optimization",
                    "barrier",
                    "barrier_margin",
                    "gamma_limit",
                )
            },
        },
        "memory_cap": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "formats": {"type": "array", "items": {"enum": list(FORMATS)}},
    },
}


@dataclass(frozen=True)
class Tolerances:
    rate: float = 0.05  # additive, on rates
    hitting_rel: float = 0.05  # relative, on hitting ratios
    risk_se: float = 2.0  # resampling SEs, on risk estimates
    growth: float = 0.01  # slack below C_hat for tail-min log-growth
    growth_fraction: float = 0.01  # admissible fraction of trajectories below it
    censor_max: float = 0.01
    vacuity_margin: float = 0.02  # A must be below 1 - margin for hitting checks
    pathwise_offset: float = 0.02  # C' = A + offset in the pathwise hitting bound
    optimization: float = 0.1  # additive on the optimization hitting constant
    barrier: float = 1.0  # additive on mean(T_b)/log b
    barrier_margin: float = 0.005  # C_hat must exceed this for barrier checks
    gamma_limit: float = 0.01  # extrapolated gamma -> 0- value vs mean log-growth


@dataclass(frozen=True)
class EstimatorConfig:
    A_method: str = "log_regression"
    A_window: float = 1.0
    traj_method: str = "tail_sup_root"
    traj_window: float = 0.2
    tail_window: float = 0.2
    max_rel_se: float = 0.5
    methods: tuple = ("log_regression", "tail_sup_root")


@dataclass(frozen=True)
class ProcessEntry:
    spec: ProcessSpec
    n_traj: int
    name: str


@dataclass(frozen=True)
class ExperimentConfig:
    processes: tuple
    suite: str = "all"
    seed: int = 0
    n_traj: int = 2000
    eps_grid: tuple = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
    b_grid: tuple = (math.exp(2), math.exp(5), math.exp(10))
    gamma_grid: tuple = (-2.0, -1.0, -0.5)
    R_grid: tuple = (0.6, 0.7, 0.8)
    gamma: float = -1.0
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    memory_cap: int = DEFAULT_MEMORY_CAP
    output_dir: Optional[str] = None
    formats: tuple = FORMATS

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override the master seed and every per-process seed."""
        procs = tuple(replace(p, spec=p.spec.with_seed(seed)) for p in self.processes)
        return replace(self, seed=seed, processes=procs)


def _check_grids(cfg: ExperimentConfig):
    if any(not 0 < e for e in cfg.eps_grid):
        raise ConfigError("entries must be positive", "eps_grid")
    if any(b >= a for a, b in zip(cfg.eps_grid, cfg.eps_grid[1:])):
        raise ConfigError("must be strictly decreasing", "eps_grid")
    if any(not 0 < b for b in cfg.b_grid) or any(b <= a for a, b in zip(cfg.b_grid, cfg.b_grid[1:])):
        raise ConfigError("must be positive and strictly increasing", "b_grid")
    if not cfg.gamma_grid:
        raise ConfigError("must be nonempty", "gamma_grid")
    if any(g >= 0 for g in cfg.gamma_grid) or any(b <= a for a, b in zip(cfg.gamma_grid, cfg.gamma_grid[1:])):
        raise ConfigError("must be negative and strictly increasing", "gamma_grid")
    if any(r <= 0 for r in cfg.R_grid):
        raise ConfigError("entries must be positive", "R_grid")


def _error_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        path = ".".join(filter(None, [path, extra[0] if extra else ""]))
    return path or "<root>"


def parse_config(obj: dict) -> ExperimentConfig:
    """Validate a config document and build an :class:`ExperimentConfig`.

    Raises:
        ConfigError: naming the offending field.
    """
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _error_path(err))

    seed = obj.get("seed", 0)
    n_traj = obj.get("n_traj", 2000)
    entries = []
    for i, p in enumerate(obj["processes"]):
        try:
            spec = ProcessSpec(p["kind"], p["params"], p.get("seed", seed), p["horizon"])
        except InvalidParams as exc:
            raise ConfigError(str(exc), f"processes.{i}") from exc
        entries.append(ProcessEntry(spec, p.get("n_traj", n_traj), p.get("name", f"{i}:{p['kind']}")))

    kwargs = {}
    for key in ("eps_grid", "b_grid", "gamma_grid", "R_grid"):
        if key in obj:
            kwargs[key] = tuple(float(v) for v in obj[key])
    for key in ("suite", "gamma", "memory_cap", "output_dir"):
        if key in obj:
            kwargs[key] = obj[key]
    if "formats" in obj:
        kwargs["formats"] = tuple(obj["formats"])
    est = dict(obj.get("estimator", {}))
    if "methods" in est:
        est["methods"] = tuple(est["methods"])
    cfg = ExperimentConfig(
        processes=tuple(entries),
        seed=seed,
        n_traj=n_traj,
        estimator=EstimatorConfig(**est),
        tolerances=Tolerances(**obj.get("tolerances", {})),
        **kwargs,
    )
    _check_grids(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", "--config") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "--config") from exc
    return parse_config(obj)
