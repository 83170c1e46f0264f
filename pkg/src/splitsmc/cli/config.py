"""Strict experiment configuration read from YAML.

Every section is a dataclass; unknown keys, wrong types and missing
required fields are rejected with the offending path in the message.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..errors import InvalidInputError

COMMANDS = ("simulate", "loglik-scan", "mle", "pmmh", "explosion", "weak-order", "csmc-variance")


@dataclass
class ModelConfig:
    name: str
    params: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)


@dataclass
class ObservationConfig:
    regime: str = "full"
    observed: list = field(default_factory=lambda: [0])
    delta_obs: float = 0.1
    K: int = 1


@dataclass
class DataConfig:
    path: typing.Optional[str] = None
    delta_sim: float = 1e-5
    n_obs: int = 200
    x0: typing.Optional[list] = None
    scheme: str = "strang"


@dataclass
class CsmcConfig:
    method: str = "csmc"
    max_iters: int = 10
    tol: float = 1e-2
    warm_start: bool = True


@dataclass
class ScanConfig:
    parameter: str
    start: float
    stop: float
    step: float
    K: list = field(default_factory=lambda: [1])
    reps: int = 1


@dataclass
class SpsaSection:
    a: float = 1.0
    c: float = 0.1
    n_iter: int = 200
    A: typing.Optional[float] = None
    alpha: float = 0.602
    gamma: float = 0.101
    scaling: str = "adaptive"
    max_step: typing.Optional[float] = None
    block_tol: float = 1.0
    init: typing.Optional[dict] = None
    initialize_bridged: bool = True


@dataclass
class PmmhSection:
    n_iters: int = 1000
    proposal_sd: typing.Union[float, list] = 0.05
    init: typing.Optional[dict] = None
    prior_mean: float = 0.0
    prior_sd: float = 1.0
    burn_in: float = 0.1


@dataclass
class ExplosionSection:
    sigmas: list = field(default_factory=lambda: [20.0, 40.0, 60.0, 80.0, 100.0])
    K: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7, 8])
    schemes: list = field(default_factory=lambda: ["eum", "lt", "strang"])
    N: int = 20


@dataclass
class WeakOrderSection:
    deltas: list = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025, 0.0125])
    schemes: list = field(default_factory=lambda: ["lt", "strang"])
    x0: list = field(default_factory=lambda: [1.0])
    n_reps: int = 100_000
    refine: int = 128


@dataclass
class VarianceSection:
    n_reps: int = 100
    N_bpf: int = 125
    N_csmc: int = 10
    at: typing.Optional[dict] = None


@dataclass
class ExperimentConfig:
    experiment: str
    command: str
    model: ModelConfig
    scheme: str = "strang"
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    particles: int = 20
    seeds: list = field(default_factory=lambda: [0])
    output: str = "results"
    csmc: CsmcConfig = field(default_factory=CsmcConfig)
    scan: typing.Optional[ScanConfig] = None
    spsa: typing.Optional[SpsaSection] = None
    pmmh: typing.Optional[PmmhSection] = None
    explosion: typing.Optional[ExplosionSection] = None
    weak_order: typing.Optional[WeakOrderSection] = None
    variance: typing.Optional[VarianceSection] = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise InvalidInputError(f"command: unknown {self.command!r}; choose from {', '.join(COMMANDS)}")
        if not self.seeds or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in self.seeds):
            raise InvalidInputError("seeds: need a non-empty list of non-negative integers")
        if self.particles < 2:
            raise InvalidInputError("particles: need at least 2")
        needed = {"loglik-scan": "scan"}
        sec = needed.get(self.command)
        if sec and getattr(self, sec) is None:
            raise InvalidInputError(f"{sec}: section required by command {self.command!r}")

    def section(self, name, default):
        value = getattr(self, name)
        return default() if value is None else value


def _check_scalar(value, tp, where):
    if tp is typing.Any:
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInputError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidInputError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise InvalidInputError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise InvalidInputError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise InvalidInputError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if tp is dict:
        if not isinstance(value, dict) or not all(isinstance(k, str) for k in value):
            raise InvalidInputError(f"{where}: expected a mapping with string keys, got {value!r}")
        return dict(value)
    raise TypeError(f"unsupported field type {tp}")


def _convert(value, tp, where):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _convert(value, arg, where)
            except InvalidInputError as exc:
                errors.append(str(exc))
        raise InvalidInputError(errors[0] if len(errors) == 1 else f"{where}: invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    return _check_scalar(value, tp, where)


def from_dict(cls, data, where="config"):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise InvalidInputError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidInputError(f"{where}: unknown field(s) {', '.join(map(str, unknown))}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{where}.{f.name}"
        if f.name in data:
            kwargs[f.name] = _convert(data[f.name], hints[f.name], key)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise InvalidInputError(f"{key}: required field missing")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidInputError(f"{where}: {exc}") from None


def to_dict(cfg):
    """Plain-data form of a config; ``None`` sections are dropped."""
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        out[f.name] = to_dict(value) if dataclasses.is_dataclass(value) else value
    return out


def parse_config(text):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"config is not valid YAML: {exc}") from None
    return from_dict(ExperimentConfig, data)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def dump_config(cfg):
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg):
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
