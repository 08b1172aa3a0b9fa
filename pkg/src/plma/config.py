"""Key-value run configuration files and flag overrides.

One ``key = value`` (or ``key: value``) per line; ``#`` starts a comment.
Keys are the fields of :class:`~plma.training.TrainConfig`. Kernel sizes are
written ``1,2,3`` or as a range ``1-12``.
"""

from __future__ import annotations

import json
from dataclasses import fields, replace
from pathlib import Path

from .training import TrainConfig


class ConfigError(ValueError):
    pass


_FIELDS = {f.name: f for f in fields(TrainConfig)}
_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def parse_kernel_sizes(text: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out or min(out) < 1:
        raise ConfigError(f"bad kernel_sizes {text!r}")
    return tuple(out)


def coerce(key: str, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(TrainConfig(), key)
    try:
        if key == "kernel_sizes":
            return value if isinstance(value, tuple) else parse_kernel_sizes(value)
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            return _BOOL[str(value).strip().lower()]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split(sep, 1))
        out[key] = coerce(key, value)
    return out


def load_config(path=None, **overrides) -> TrainConfig:
    """Defaults, then the file, then non-None overrides; validated."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text()))
    for k, v in overrides.items():
        if v is not None:
            values[k] = coerce(k, v)
    cfg = replace(TrainConfig(), **values)
    validate(cfg)
    return cfg


def validate(cfg: TrainConfig) -> None:
    if cfg.head not in ("triplet", "softmax"):
        raise ConfigError(f"head must be triplet or softmax, not {cfg.head!r}")
    if cfg.batch_size < 1 or cfg.epochs < 1:
        raise ConfigError("batch_size and epochs must be positive")
    if cfg.max_lr <= 0:
        raise ConfigError("max_lr must be positive")
    if not 0.0 <= cfg.dropout < 1.0:
        raise ConfigError("dropout must be in [0, 1)")
    if not 0.0 < cfg.val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    if cfg.precision not in ("float32", "float64"):
        raise ConfigError("precision must be float32 or float64")


def dumps(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def from_dict(d: dict) -> TrainConfig:
    return load_config(**{k: (tuple(v) if k == "kernel_sizes" else v) for k, v in d.items() if k in _FIELDS})
