"""Pipeline configuration: one JSON document, validated field by field."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .env import EnvConfig
from .ik import IkParams
from .keyboard import KeyGeometry
from .residual import CemConfig


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class Paths:
    midi_dir: str = ""
    fingertip_dir: str = ""
    output_dir: str = "pianobot_out"
    split: str = ""


@dataclass
class ResidualSpec:
    n_phase: int = 8
    slide_bound: float = 0.01
    rotary_bound: float = 0.05
    # added to the demonstrator fingertip heights before IK tracking
    nominal_z_bias: float = 0.0


@dataclass
class CodecSpec:
    encoder_sizes: tuple = (64, 32, 16)
    decoder_hidden: tuple = (32, 32)
    n_freq: int = 6
    lr: float = 3e-3
    epochs: int = 800
    states_per_batch: int = 8
    queries_per_state: int = 64
    inflate: float = 0.2
    d_max: float = 2.0
    include_single_keys: bool = True


@dataclass
class PolicySpec:
    hidden: tuple = (256, 256)
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 64


@dataclass
class DistillSpec:
    mode: str = "residual"
    high_level: PolicySpec = field(default_factory=PolicySpec)
    low_level: PolicySpec = field(default_factory=PolicySpec)
    tip_noise: float = 1.0
    postprocess: bool = True


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    geometry: dict = field(default_factory=dict)
    env: EnvConfig = field(default_factory=EnvConfig)
    ik: IkParams = field(default_factory=lambda: IkParams(max_inner_iters=10))
    cem: CemConfig = field(default_factory=CemConfig)
    residual: ResidualSpec = field(default_factory=ResidualSpec)
    codec: CodecSpec = field(default_factory=CodecSpec)
    distill: DistillSpec = field(default_factory=DistillSpec)
    base_dir: str = field(default=".", repr=False)

    def path(self, name: str) -> Path:
        value = getattr(self.paths, name)
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def key_geometry(self) -> KeyGeometry:
        return KeyGeometry(**self.geometry)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


_NESTED = {
    "paths": Paths,
    "env": EnvConfig,
    "ik": IkParams,
    "cem": CemConfig,
    "residual": ResidualSpec,
    "codec": CodecSpec,
    "distill": DistillSpec,
    "high_level": PolicySpec,
    "low_level": PolicySpec,
}


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        name = f"{prefix}.{key}" if prefix else key
        if key not in fields or key == "base_dir":
            raise ConfigError(name, "unknown field")
        default = _default(fields[key])
        if key in _NESTED and dataclasses.is_dataclass(_NESTED[key]):
            kwargs[key] = _build(_NESTED[key], value, name)
            continue
        kwargs[key] = _coerce(value, default, name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix or "config", str(exc)) from exc


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _coerce(value, default, name):
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, "expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, "expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, "expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(name, "expected a list of numbers")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(name, "expected an object")
        return value
    return value


def config_from_dict(data: dict, base_dir=".") -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "")
    cfg.base_dir = str(base_dir)
    if cfg.distill.mode not in ("direct", "residual"):
        raise ConfigError("distill.mode", "must be 'direct' or 'residual'")
    try:
        cfg.key_geometry()
    except TypeError as exc:
        raise ConfigError("geometry", str(exc)) from exc
    return cfg


def load_config(path=None) -> PipelineConfig:
    """Read a config file; relative paths resolve against its directory.

    Without a path the bundled synthetic corpus is used as input.
    """
    if path is None:
        corpus = resources.files("pianobot").joinpath("data/corpus")
        return config_from_dict(
            {"paths": {"midi_dir": str(corpus), "fingertip_dir": str(corpus),
                       "split": str(corpus / "split.json")}},
            base_dir=".",
        )
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    return config_from_dict(data, base_dir=p.parent)
