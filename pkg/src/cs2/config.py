"""INI run configuration: one section per stage, all defaults embedded.

Stage seeds are not stored; they are derived from ``[run] seed`` so a
single number pins the whole pipeline.
"""

from __future__ import annotations

import configparser
import io
import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Any

import numpy as np

from .adain_gan import GanConfig
from .ensemble_seg import EnsembleConfig
from .errors import ConfigError
from .maskgen import UnsupConfig
from .phantom import PhantomSpec


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    window_lo: float = -1024.0
    window_hi: float = 600.0


@dataclass(frozen=True)
class CorpusSettings:
    n: int = 200


@dataclass(frozen=True)
class SynthSettings:
    per_guidance: int = 4  # references paired with each guidance map
    min_size: int = 20  # connected-component clean-up threshold for predicted masks


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    maskgen: UnsupConfig = field(default_factory=UnsupConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    synth: SynthSettings = field(default_factory=SynthSettings)

    @property
    def window(self) -> tuple[float, float]:
        return (self.run.window_lo, self.run.window_hi)

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.run.seed, stage)

    def seeded(self) -> "RunConfig":
        """Copy with every stage seed filled in from the global seed."""
        return replace(
            self,
            phantom=replace(self.phantom, seed=self.stage_seed("phantom")),
            gan=replace(self.gan, seed=self.stage_seed("gan")),
            ensemble=replace(self.ensemble, seed=self.stage_seed("ensemble")),
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, run=replace(self.run, seed=seed))


def stage_seed(global_seed: int, stage: str) -> int:
    ss = np.random.SeedSequence([global_seed, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def _fmt(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default: Any, where: str) -> Any:
    try:
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(_parse(p, kind(), where) for p in parts)
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def _section_items(obj) -> list[tuple[str, Any]]:
    return [(f.name, getattr(obj, f.name)) for f in fields(obj) if not (f.name == "seed" and obj.__class__ is not RunSettings)]


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (M vs m)
    return parser


def to_ini(cfg: RunConfig) -> str:
    parser = _parser()
    for section in fields(cfg):
        obj = getattr(cfg, section.name)
        parser[section.name] = {k: _fmt(v) for k, v in _section_items(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str, source: str = "<config>") -> RunConfig:
    parser = _parser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    base = RunConfig()
    known = {f.name for f in fields(base)}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    updates = {}
    for section in fields(base):
        obj = getattr(base, section.name)
        if not parser.has_section(section.name):
            continue
        defaults = dict(_section_items(obj))
        kw = {}
        for key, raw in parser.items(section.name):
            if key not in defaults:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section.name}]")
            kw[key] = _parse(raw, defaults[key], f"{source} [{section.name}] {key}")
        try:
            updates[section.name] = replace(obj, **kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: invalid [{section.name}] settings: {exc}") from None
    return replace(base, **updates)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return from_ini(text, str(path))
