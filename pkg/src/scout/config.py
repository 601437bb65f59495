"""INI configuration files mapped onto the config dataclasses.

Sections: ``[train]`` (TrainConfig), ``[loss]`` (LossConfig), ``[synth]``
(SynthConfig) and ``[bench]`` (BenchConfig). Values are parsed according to
the type of each field's default; tuples are comma separated and ``none``
clears an optional field.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .synth import SynthConfig
from .trainer import ConfigError, LossConfig, TrainConfig


@dataclasses.dataclass
class BenchConfig:
    modes: tuple[str, ...] = ("random", "center")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_images: int = 200
    budget_fraction: float = 0.1


_TUPLE_TYPES = {
    "channels": int,
    "lr_milestones": float,
    "kappa_range": float,
    "families": str,
    "textures": str,
    "modes": str,
    "seeds": int,
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(name: str, default, text: str):
    text = text.strip()
    if name in _TUPLE_TYPES:
        if text.lower() == "none":
            return None
        return tuple(_TUPLE_TYPES[name](p.strip()) for p in text.split(",") if p.strip())
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def apply_section(obj, section: str, items: dict[str, str]):
    """Return a copy of dataclass ``obj`` with ``items`` applied; unknown keys raise ConfigError."""
    names = {f.name: f for f in dataclasses.fields(obj) if f.name != "loss"}
    updates = {}
    for key, text in items.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} in section [{section}]")
        try:
            updates[key] = coerce(key, getattr(obj, key), text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    return dataclasses.replace(obj, **updates)


@dataclasses.dataclass
class FileConfig:
    train: TrainConfig
    synth: SynthConfig
    bench: BenchConfig


SECTIONS = ("train", "loss", "synth", "bench")


def parse_config(text: str) -> FileConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for s in cp.sections():
        if s not in SECTIONS:
            raise ConfigError(f"unknown config section [{s}]")
    get = lambda s: dict(cp[s]) if cp.has_section(s) else {}  # noqa: E731
    train = apply_section(TrainConfig(), "train", get("train"))
    train.loss = apply_section(LossConfig(), "loss", get("loss"))
    synth = apply_section(SynthConfig(), "synth", get("synth"))
    bench = apply_section(BenchConfig(), "bench", get("bench"))
    try:
        train.validate()
        synth.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return FileConfig(train, synth, bench)


def load_config(path) -> FileConfig:
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def describe_keys() -> str:
    """One line per key, for --help."""
    lines = []
    for section, obj in (("train", TrainConfig()), ("loss", LossConfig()), ("synth", SynthConfig()), ("bench", BenchConfig())):
        for f in dataclasses.fields(obj):
            if f.name == "loss":
                continue
            v = getattr(obj, f.name)
            shown = ",".join(map(str, v)) if isinstance(v, tuple) else v
            lines.append(f"  [{section}] {f.name} = {shown}")
    return "\n".join(lines)
