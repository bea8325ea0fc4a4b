"""Flat ``key = value`` experiment files with dotted names for nested fields.

Example::

    # non-iid sweep
    master_seed = 3
    fading = non-iid
    snr_grid_db = 5, 7.5, 10, 12.5
    fed.rounds = 5
    train.lr = 0.001
    quadrature.node_count = 96

Blank lines and ``#`` comments are ignored.  The environment variable
``FEDREC_SEED`` supplies ``master_seed`` when the file does not.
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Mapping

from .detectors import QuadratureConfig
from .fed import FedConfig
from .harness import ConfigError, ExperimentConfig
from .nn import TrainConfig

__all__ = ["SEED_ENV", "parse_config_text", "load_config", "config_from_mapping", "config_keys"]

SEED_ENV = "FEDREC_SEED"

_SECTIONS = {"fed": FedConfig, "train": TrainConfig, "quadrature": QuadratureConfig}
# fields that are derived from the top level and may not be set per section
_HIDDEN = {("fed", "U"), ("fed", "train"), ("train", "shuffle_seed")}


def config_keys() -> list[str]:
    """Every dotted key accepted in a config file."""
    keys = [f.name for f in dataclasses.fields(ExperimentConfig) if f.name not in _SECTIONS]
    for sec, cls in _SECTIONS.items():
        keys += [f"{sec}.{f.name}" for f in dataclasses.fields(cls) if (sec, f.name) not in _HIDDEN]
    return keys


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], (int, float)):
                conv = type(default[0])
                return tuple(conv(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_mapping(values: Mapping[str, str], env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from string values keyed by dotted name."""
    env = os.environ if env is None else env
    known = set(config_keys())
    for k in values:
        if k not in known:
            raise ConfigError(k, "unknown key")
    top_defaults = ExperimentConfig()
    top: dict = {}
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    for k, raw in values.items():
        if "." in k:
            sec, name = k.split(".", 1)
            default = getattr(getattr(top_defaults, sec), name)
            sections[sec][name] = _convert(k, raw, default)
        else:
            top[k] = _convert(k, raw, getattr(top_defaults, k))
    if "master_seed" not in top and env.get(SEED_ENV):
        top["master_seed"] = _convert(SEED_ENV, env[SEED_ENV], 0)

    def build(sec, cls, **extra):
        try:
            return cls(**extra, **sections[sec])
        except ValueError as exc:
            # section validators start their message with the field name
            name = str(exc).split()[0]
            key = f"{sec}.{name}" if name in sections[sec] else sec
            raise ConfigError(key, str(exc)) from None

    train = build("train", TrainConfig)
    quad = build("quadrature", QuadratureConfig)
    U = top.get("U", top_defaults.U)
    fed = build("fed", FedConfig, U=max(U, 1), train=train)
    return ExperimentConfig(fed=fed, train=train, quadrature=quad, **top)


def load_config(path, overrides: Mapping[str, str] | None = None,
                env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read a config file (``None`` for defaults) and apply ``overrides`` on top."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return config_from_mapping(values, env)
