"""Strict experiment configs.

A config file is JSON::

    {"schema_version": 1, "kind": "train", "seed": 0, "params": {...}, "grid": {...}}

``params`` is validated against the dataclass for ``kind``; unknown keys and
wrong types are rejected before anything runs. ``grid`` (sweeps only) maps
dotted paths inside ``params`` to lists of values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import types
import typing
from dataclasses import dataclass, field

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DatasetCfg:
    n: int = 16
    d: int = 10
    delta: float = 0.05
    margin: float = 0.0
    seed: int = 11
    path: str | None = None


@dataclass
class AttackCfg:
    kind: str = "pgd"
    steps: int = 10
    step_size: float | None = None
    restarts: int = 1


@dataclass
class TrainPayload:
    arch: str = "two_layer"
    m: int = 4096
    H: int = 1
    activation: str = "softplus"
    init: str = "gaussian_identity"
    alpha: float = 1.0
    T: int = 3000
    R: float = 10.0
    project: bool | None = None
    attack: AttackCfg = field(default_factory=AttackCfg)
    dataset: DatasetCfg = field(default_factory=DatasetCfg)
    oracle_budget: int = 4
    save_params: bool = False


@dataclass
class AttackEvalPayload:
    arch: str = "deep"
    m: int = 256
    H: int = 2
    activation: str = "softplus"
    checkpoint: str | None = None
    dataset: DatasetCfg = field(default_factory=DatasetCfg)
    attacks: list[AttackCfg] = field(default_factory=lambda: [AttackCfg("identity"), AttackCfg("fgsm"), AttackCfg("pgd")])
    oracle_budget: int = 4


@dataclass
class GradcheckPayload:
    arch: str = "two_layer"
    m: int = 64
    d: int = 5
    H: int = 2
    activation: str = "softplus"
    cases: int = 50
    step: float = 1e-5
    threshold: float = 1e-7
    displace: float = 0.3


@dataclass
class DiagnosePayload:
    widths: list[int] = field(default_factory=lambda: [256, 1024, 4096])
    d: int = 10
    H: int = 3
    trials: int = 100


@dataclass
class NtkPayload:
    activation: str = "relu"
    init_law: str = "gaussian"
    mc_samples: int = 1_000_000
    d: int = 5
    angles: list[float] = field(default_factory=lambda: [0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4, math.pi])


@dataclass
class RfPayload:
    activation: str = "quad_relu"
    init_law: str = "sphere_sqrt_d"
    d: int = 3
    Ms: list[int] = field(default_factory=lambda: [64, 256, 1024, 4096])
    reps: int = 20
    probes: int = 256
    target: str = "single_anchor"
    dataset: DatasetCfg = field(default_factory=lambda: DatasetCfg(n=6, d=5))
    cap_samples: int = 20
    lam: float = 1e-6
    export_gram: bool = False


@dataclass
class CapacityPayload:
    n: int = 4
    d: int = 2
    delta: float = 0.05
    eps_ratio: float = 0.25
    probes_per_ball: int = 200
    interpolator: str = "ball"
    m: int = 4096
    T: int = 5000
    alpha: float = 32.0
    lift_scale: float = 4.0
    labelings: list[int] | None = None


PAYLOADS = {
    "train": TrainPayload,
    "attack-eval": AttackEvalPayload,
    "gradcheck": GradcheckPayload,
    "diagnose": DiagnosePayload,
    "ntk": NtkPayload,
    "rf": RfPayload,
    "capacity": CapacityPayload,
}

CHOICES = {
    "arch": ("deep", "two_layer"),
    "activation": ("relu", "softplus", "quad_relu"),
    "init": ("gaussian_identity", "sphere_sqrt_d"),
    "init_law": ("gaussian", "sphere_sqrt_d"),
    "kind": ("identity", "random", "fgsm", "pgd"),
    "target": ("single_anchor", "fit"),
    "interpolator": ("ball", "net", "constant"),
}

POSITIVE = {"m", "H", "T", "n", "d", "cases", "trials", "mc_samples", "reps", "probes", "restarts", "oracle_budget"}
NONNEGATIVE = {"alpha", "delta", "margin", "lam", "cap_samples", "probes_per_ball"}


def _check_value(tp, value, where):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errs = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _check_value(a, value, where)
            except ConfigError as e:
                errs.append(str(e))
        raise ConfigError(errs[0] if errs else f"{where}: bad value")
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_check_value(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def build(cls, data, where: str = "params"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}"
        v = _check_value(hints[key], value, path)
        if key in CHOICES and v is not None and v not in CHOICES[key]:
            raise ConfigError(f"{path}: must be one of {CHOICES[key]}")
        if key in POSITIVE and v is not None and v < 1:
            raise ConfigError(f"{path}: must be >= 1")
        if key in NONNEGATIVE and v is not None and v < 0:
            raise ConfigError(f"{path}: must be >= 0")
        kwargs[key] = v
    obj = cls(**kwargs)
    for key in ("R", "step", "threshold", "step_size", "lift_scale"):
        v = getattr(obj, key, None)
        if v is not None and not v > 0:
            raise ConfigError(f"{where}.{key}: must be > 0")
    return obj


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    params: object
    raw: dict
    grid: dict | None = None
    out: str | None = None

    def digest(self) -> str:
        return hashlib.sha256(canonical(self.raw).encode()).hexdigest()


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def parse_config(raw: dict, seed_override: int | None = None, allow_grid: bool = False) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"schema_version", "kind", "seed", "params", "grid", "out"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    kind = raw.get("kind")
    if kind not in PAYLOADS:
        raise ConfigError(f"kind must be one of {sorted(PAYLOADS)}")
    seed = raw.get("seed", 0)
    if seed_override is not None:
        seed = seed_override
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    grid = raw.get("grid")
    if grid is not None and not allow_grid:
        raise ConfigError("'grid' is only valid for sweeps")
    params_raw = raw.get("params", {})
    params = build(PAYLOADS[kind], params_raw)
    out = raw.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("out must be a string")
    resolved = dict(raw, seed=seed)
    return ExperimentConfig(kind, seed, params, resolved, grid, out)


def set_path(d: dict, dotted: str, value) -> dict:
    out = json.loads(json.dumps(d))
    cur = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"grid path {dotted!r} does not address an object")
    cur[keys[-1]] = value
    return out
