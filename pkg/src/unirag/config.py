"""Run configuration: defaults < TOML file < environment < command-line flags."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .embedders import EmbedderConfig
from .encoder import EncoderConfig
from .errors import ConfigError, InvalidConfig
from .evalharness import SynthBenchConfig
from .promptbank import BankConfig
from .trainer import TrainConfig

ENV_PREFIX = "UNIRAG_"


@dataclass(frozen=True)
class IndexSection:
    path: str = "index"


@dataclass(frozen=True)
class RagSection:
    k: int = 5
    budget: int = 4000
    retries: int = 3
    backoff: float = 0.5
    timeout: float = 30.0
    temperature: float = 0.0
    system_prompt: str = ""


@dataclass(frozen=True)
class RunConfig:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    index: IndexSection = field(default_factory=IndexSection)
    rag: RagSection = field(default_factory=RagSection)
    eval: SynthBenchConfig = field(default_factory=SynthBenchConfig)

    def validate(self) -> None:
        self.embedder.validate()
        self.bank.validate()
        self.encoder.validate()
        self.trainer.validate()
        self.eval.validate()
        dims = {
            "embedder.dimension": self.embedder.dimension,
            "bank.d": self.bank.d,
            "encoder.d": self.encoder.d,
            "eval.d": self.eval.d,
        }
        if len(set(dims.values())) != 1:
            raise InvalidConfig(f"latent dimensions disagree: {dims}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


SECTIONS = {f.name: f for f in fields(RunConfig)}


def _section_types(section: str) -> dict[str, object]:
    cls = type(getattr(RunConfig(), section))
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _coerce(section: str, key: str, value, from_text: bool):
    types = _section_types(section)
    if key not in types:
        raise InvalidConfig(f"unknown config key {section}.{key}")
    tp = types[key]
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            if from_text:
                value = [v.strip() for v in str(value).split(",") if v.strip()]
            return tuple(str(v) for v in value)
        if tp is bool:
            if from_text:
                return str(value).lower() in ("1", "true", "yes", "on")
            return bool(value)
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if tp is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise InvalidConfig(f"bad value for {section}.{key}: {value!r}") from e


def _apply(cfg: RunConfig, section: str, updates: dict) -> RunConfig:
    if section not in SECTIONS:
        raise InvalidConfig(f"unknown config section [{section}]")
    try:
        new_section = replace(getattr(cfg, section), **updates)
    except TypeError as e:
        raise InvalidConfig(str(e)) from e
    return replace(cfg, **{section: new_section})


def from_mapping(data: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for section, values in data.items():
        if section not in SECTIONS or not isinstance(values, dict):
            raise InvalidConfig(f"unknown config section [{section}]")
        updates = {k: _coerce(section, k, v, from_text=False) for k, v in values.items()}
        cfg = _apply(cfg, section, updates)
    return cfg


def from_env(env, base: RunConfig) -> RunConfig:
    """``UNIRAG_<SECTION>_<KEY>`` variables, e.g. ``UNIRAG_TRAINER_LR=1e-3``."""
    cfg = base
    for name, value in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        for section in SECTIONS:
            if rest.startswith(section + "_"):
                key = rest[len(section) + 1 :]
                cfg = _apply(cfg, section, {key: _coerce(section, key, value, from_text=True)})
                break
    return cfg


def from_overrides(pairs: list[str], base: RunConfig) -> RunConfig:
    cfg = base
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise InvalidConfig(f"override must look like section.key=value, got {pair!r}")
        dotted, value = pair.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise InvalidConfig(f"unknown config section {section!r}")
        cfg = _apply(cfg, section, {key: _coerce(section, key, value, from_text=True)})
    return cfg


def resolve(path=None, env=None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            cfg = from_mapping(tomli.loads(text), cfg)
        except tomli.TOMLDecodeError as e:
            raise InvalidConfig(f"{path}: {e}") from e
    cfg = from_env(os.environ if env is None else env, cfg)
    cfg = from_overrides(overrides or [], cfg)
    cfg.validate()
    return cfg
