"""Experiment configuration: ``[section]`` + ``key = value`` text files.

Every key has a default (the dataclass field defaults below). Unknown
sections or keys are rejected so typos cannot be silently ignored.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .evalkit import PckConfig
from .model import TrainConfig
from .ndgraph import ContractError
from .synthdata import SynthConfig
from .warp import WarpConfig


class ConfigError(ContractError):
    pass


@dataclass(frozen=True)
class DataSizes:
    seed: int = 0
    n_pos: int = 286          # 70% train split -> 200 training positives
    n_neg: int = 286


@dataclass(frozen=True)
class EvalSettings:
    split: str = "test"
    alphas: tuple = PckConfig().alphas
    reference: str = "image"


@dataclass(frozen=True)
class RunSettings:
    checkpoint_every: int = 500


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSizes = field(default_factory=DataSizes)
    synth: SynthConfig = field(default_factory=SynthConfig)
    warp: WarpConfig = field(default_factory=WarpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def replace(self, section, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **kw)})


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in (s.strip() for s in raw.split(",")) if p]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str    # keys are case-sensitive
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}] (known: {', '.join(SECTIONS)})")
        current = getattr(cfg, section)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        updates = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            updates[key] = _parse_value(raw, known[key], f"{source}: [{section}] {key}")
        try:
            cfg = cfg.replace(section, **updates)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{source}: [{section}] {e}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read(), str(path))


def echo_config(cfg: ExperimentConfig) -> str:
    """Resolved configuration, every key included; parses back to ``cfg``."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
