"""Run configuration: flat INI files with strict keys and a canonical form.

One [section] per config group, `key = value` entries only. Unknown sections
or keys are rejected so typos fail loudly. serialize_config emits a
canonical rendering (fixed section and key order, repr'd floats) that parses
back to an equal config; config_hash fingerprints that rendering.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import get_args, get_origin, get_type_hints

from .exceptions import ConfigError, ValidationError
from .heatmap import HeatmapConfig
from .losses import LossConfig
from .synth import SceneConfig
from .tracker import GapDistribution, TrainConfig


@dataclass(frozen=True)
class RunSection:
    """Process-wide knobs: global seed and worker thread count."""

    seed: int = 7
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")


@dataclass(frozen=True)
class ModelConfig:
    """Sizes of the rerank and refine heads."""

    d_emb: int = 64
    n_heads: int = 4
    d_k: int = 16
    hidden: int = 128
    pool: int = 7

    def __post_init__(self):
        for name in ("d_emb", "n_heads", "d_k", "hidden", "pool"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")


@dataclass(frozen=True)
class PathsConfig:
    """Default input/output locations; CLI flags override."""

    data: str = ""
    params: str = ""
    out: str = ""


@dataclass(frozen=True)
class RunConfig:
    run: RunSection
    heatmap: HeatmapConfig
    loss: LossConfig
    model: ModelConfig
    scene: SceneConfig
    gaps: GapDistribution
    train: TrainConfig
    paths: PathsConfig


SECTIONS = (
    ("run", RunSection),
    ("heatmap", HeatmapConfig),
    ("loss", LossConfig),
    ("model", ModelConfig),
    ("scene", SceneConfig),
    ("gaps", GapDistribution),
    ("train", TrainConfig),
    ("paths", PathsConfig),
)


def default_config() -> RunConfig:
    return RunConfig(**{name: cls() for name, cls in SECTIONS})


def _parse_value(raw: str, typ, section: str, key: str):
    origin = get_origin(typ)
    try:
        if origin is tuple:
            item_type = get_args(typ)[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(item_type(p) for p in parts)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}: {exc}") from exc
    raise ConfigError(f"[{section}] {key}: unsupported type {typ!r}")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse INI text on top of the defaults (or another base config)."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = base or default_config()
    known = dict(SECTIONS)
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        cls = known[section]
        hints = get_type_hints(cls)
        valid_keys = {f.name for f in fields(cls)}
        updates = {}
        for key, raw in cp.items(section):
            if key not in valid_keys:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            updates[key] = _parse_value(raw, hints[key], section, key)
        if updates:
            try:
                cfg = replace(cfg, **{section: replace(getattr(cfg, section), **updates)})
            except (ValidationError, ValueError) as exc:
                raise ConfigError(f"invalid [{section}] values: {exc}") from exc
    return cfg


def parse_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), base=base)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical INI rendering; parse(serialize(cfg)) round-trips exactly."""
    buf = io.StringIO()
    for name, _ in SECTIONS:
        section = getattr(cfg, name)
        buf.write(f"[{name}]\n")
        for f in fields(section):
            buf.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical rendering."""
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
