"""Flat ``key = value`` run configuration with ``--set`` overrides.

Keys are :class:`TrainConfig` field names. Dotted aliases such as
``fusion.mode`` or ``train.lr`` are accepted, as is ``lambda`` for ``lam``.
Lines starting with ``#`` or ``;`` are comments.
"""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path
from typing import Iterable, Optional

from .trainer import TrainConfig

ALIASES = {
    "lambda": "lam",
    "fusion.mode": "fusion_mode",
    "fusion.k": "k",
    "fusion.k_a": "k_a",
    "fusion.k_t": "k_t",
    "fusion.paper_mode": "paper_mode",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def canonical_key(key: str) -> str:
    key = key.strip().lower()
    if key in ALIASES:
        return ALIASES[key]
    for prefix in ("train.", "trainer."):
        if key.startswith(prefix):
            return key[len(prefix):]
    return key


def _coerce(name: str, raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}") from None


def _types() -> dict[str, type]:
    defaults = TrainConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(TrainConfig)}


def parse_pairs(pairs: Iterable[tuple[str, str]]) -> dict:
    types = _types()
    out = {}
    for key, raw in pairs:
        name = canonical_key(key)
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = _coerce(name, raw, types[name])
    return out


def read_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + p.read_text())
    except configparser.Error as e:
        raise ConfigError(f"{p}: {e}") from None
    return parse_pairs(parser.items("run"))


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key, raw


def load_config(path=None, overrides: Optional[Iterable[str]] = None) -> TrainConfig:
    """Defaults, then the file, then ``--set`` overrides in order."""
    values = read_file(path) if path else {}
    values.update(parse_pairs(parse_override(o) for o in overrides or ()))
    try:
        return TrainConfig(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from None
