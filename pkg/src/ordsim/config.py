"""Run configuration for ``ordsim simulate``.

A config is a TOML document (JSON with the same structure is accepted)::

    seed = 20240101
    out_dir = "runs/desk"
    jobs = 1

    [grid]
    n_obs = [1500]
    j = [3]
    shapes = ["symmetric"]
    n_sim = 20
    models = ["sep-logistic", "po", "ppo-u", "cppo-linear", "cppo-last"]
    scenarios = [{type = "s1", odds_ratio = 1.5, sigma = 0.0}]

    [sampler]
    chains = 4
    warmup = 500
    draws = 500

    [priors]
    sd_effect = 100.0
    sd_increment = 100.0

    [aggregate]
    exclude_divergent = false
    relbias = "mean-ratio"
    n_boot = 1000

``grid.scenarios`` may also be ``"all"`` (the twelve proportionality settings)
or ``"scenario1"`` (the nine random-perturbation settings).  Unknown keys are
rejected.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema

from .dgm import S1, S2, S3, SHAPES, standard_scenarios
from .errors import ConfigError
from .posterior import MODEL_LABELS
from .sampler import SamplerConfig
from .simstudy import RELBIAS_MODES, GridPlan

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml

__all__ = ["RunConfig", "load_config", "parse_config", "CONFIG_SCHEMA", "SEED_ENV"]

SEED_ENV = "ORDSIM_SEED"

_POS_INT = {"type": "integer", "minimum": 1}
_SCENARIO = {
    "type": "object",
    "oneOf": [
        {
            "properties": {"type": {"const": "s1"}, "odds_ratio": {"type": "number", "exclusiveMinimum": 0},
                           "sigma": {"type": "number", "minimum": 0}},
            "required": ["type", "odds_ratio", "sigma"],
            "additionalProperties": False,
        },
        {
            "properties": {"type": {"const": "s2"}, "zeta_odds_ratio": {"type": "number", "exclusiveMinimum": 0},
                           "gamma": {"type": "number"}},
            "required": ["type"],
            "additionalProperties": False,
        },
        {
            "properties": {"type": {"const": "s3"}, "odds_ratio": {"type": "number", "exclusiveMinimum": 0}},
            "required": ["type", "odds_ratio"],
            "additionalProperties": False,
        },
    ],
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["grid"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string", "minLength": 1},
        "jobs": _POS_INT,
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_obs": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                "j": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                "shapes": {"type": "array", "items": {"enum": sorted(SHAPES)}},
                "n_sim": _POS_INT,
                "models": {"type": "array", "minItems": 1, "items": {"enum": list(MODEL_LABELS)}},
                "scenarios": {
                    "oneOf": [
                        {"enum": ["all", "scenario1"]},
                        {"type": "array", "items": _SCENARIO},
                    ]
                },
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "chains": {"type": "integer", "minimum": 2},
                "warmup": {"type": "integer", "minimum": 150},
                "draws": {"type": "integer", "minimum": 4},
                "target_accept": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_treedepth": {"type": "integer", "minimum": 0},
                "divergence_energy_threshold": {"type": "number", "exclusiveMinimum": 0},
                "escalate": {"type": "boolean"},
                "init_jitter": {"type": "number", "minimum": 0},
            },
        },
        "priors": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sd_effect": {"type": "number", "exclusiveMinimum": 0},
                "sd_increment": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "aggregate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "exclude_divergent": {"type": "boolean"},
                "relbias": {"enum": list(RELBIAS_MODES)},
                "n_boot": {"type": "integer", "minimum": 10},
            },
        },
    },
}


@dataclass(frozen=True)
class RunConfig:
    plan: GridPlan
    out_dir: Path
    jobs: int
    seed: int
    exclude_divergent: bool = False
    relbias: str = "mean-ratio"
    n_boot: int = 1000
    config_hash: str = ""


def default_jobs() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def _scenarios(spec) -> tuple:
    if spec is None or spec == "all":
        return tuple(standard_scenarios())
    if spec == "scenario1":
        return tuple(p for p in standard_scenarios() if isinstance(p, S1))
    out = []
    for s in spec:
        if s["type"] == "s1":
            out.append(S1(math.log(s["odds_ratio"]), float(s["sigma"])))
        elif s["type"] == "s2":
            out.append(S2(math.log(s.get("zeta_odds_ratio", 0.8)), float(s.get("gamma", 0.06))))
        else:
            out.append(S3(math.log(s["odds_ratio"])))
    return tuple(out)


def parse_config(doc: dict, env: Optional[dict] = None, source: bytes = b"") -> RunConfig:
    """Validate a config mapping and turn it into a :class:`RunConfig`."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    env = os.environ if env is None else env
    seed = int(doc.get("seed", 0))
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    g = doc["grid"]
    smp = doc.get("sampler", {})
    pri = doc.get("priors", {})
    agg = doc.get("aggregate", {})
    try:
        sampler = SamplerConfig(**smp)
        plan = GridPlan(
            n_obs=tuple(g.get("n_obs", (1500, 4000, 10000))),
            j=tuple(g.get("j", (3, 7, 11))),
            shapes=tuple(g.get("shapes", ("symmetric", "skewed"))),
            props=_scenarios(g.get("scenarios")),
            n_sim=int(g.get("n_sim", 1000)),
            sampler=sampler,
            models=tuple(g.get("models", MODEL_LABELS)),
            seed=seed,
            prior_sd_effect=float(pri.get("sd_effect", 100.0)),
            prior_sd_increment=float(pri.get("sd_increment", 100.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    digest = hashlib.sha256(source or json.dumps(doc, sort_keys=True).encode()).hexdigest()
    return RunConfig(
        plan=plan,
        out_dir=Path(doc.get("out_dir", "ordsim_run")),
        jobs=int(doc.get("jobs", default_jobs())),
        seed=seed,
        exclude_divergent=bool(agg.get("exclude_divergent", False)),
        relbias=agg.get("relbias", "mean-ratio"),
        n_boot=int(agg.get("n_boot", 1000)),
        config_hash=digest,
    )


def load_config(path, env: Optional[dict] = None) -> RunConfig:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from None
    try:
        if p.suffix.lower() == ".json":
            doc = json.loads(raw.decode("utf-8"))
        else:
            doc = _toml.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p} must be a table/object at the top level")
    return parse_config(doc, env=env, source=raw)
