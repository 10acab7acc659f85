"""Flat ``section.key = value`` run configuration.

Sections mirror the configuration dataclasses::

    train.*    TrainConfig scalars (epochs, batch_size, base_lr, ...)
    aug.*      AugConfig (n, m, scale_global, out_local, ...)
    loss.*     LossConfig (gamma, alpha1..alpha3, eps, ...)
    encoder.*  EncoderConfig (patch_size, embed_dim, depth, ...)
    heads.*    HeadConfig (hidden_dim, bottleneck_ms, bottleneck_opt)
    teacher.*  frozen optical teacher (variant, seed, depth, path)
    data.*     dataset location and held-out split for probing

Lines starting with ``#`` are comments. Pairs are written ``lo, hi``; the
word ``none`` clears an optional value. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

from .errors import ValidationError
from .losses import LossConfig
from .model import EncoderConfig, HeadConfig
from .trainer import TrainConfig
from .views import AugConfig


@dataclass
class TeacherConfig:
    variant: str = "random"  # random | file | stub
    seed: int = 1
    depth: int = 0  # 0 = same depth as the student
    path: str = ""


@dataclass
class DataConfig:
    path: str = ""
    probe_train_fraction: float = 0.5


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    data: DataConfig = field(default_factory=DataConfig)


NESTED = ("aug", "loss", "encoder", "heads")


def _sections(cfg: RunConfig) -> dict[str, Any]:
    out = {"train": cfg.train, "teacher": cfg.teacher, "data": cfg.data}
    for name in NESTED:
        out[name] = getattr(cfg.train, name)
    return out


def _scalar_fields(obj) -> dict[str, type]:
    hints = get_type_hints(type(obj))
    # only TrainConfig holds sections; encoder.heads is the attention head count
    skip = NESTED if isinstance(obj, TrainConfig) else ()
    return {f.name: hints[f.name] for f in dataclasses.fields(obj) if f.name not in skip}


def _parse(text: str, typ, key: str):
    s = text.strip()
    origin = getattr(typ, "__origin__", None)
    args = getattr(typ, "__args__", ())
    try:
        if origin is tuple:
            parts = [p.strip() for p in s.split(",")]
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(a(p) for a, p in zip(args, parts))
        if type(None) in args:  # optional
            if s.lower() == "none":
                return None
            inner = next(a for a in args if a is not type(None))
            return _parse(s, inner, key)
        if typ is bool:
            low = s.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if typ is int:
            return int(s)
        if typ is float:
            return float(s)
        if typ is str:
            return s
    except ValueError as exc:
        raise ValidationError(f"bad value for {key}: {text!r} ({exc})") from None
    raise ValidationError(f"unsupported type for {key}")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_value(cfg: RunConfig, key: str, text: str) -> None:
    if "." not in key:
        raise ValidationError(f"config key {key!r} needs a section prefix")
    section, name = key.split(".", 1)
    sections = _sections(cfg)
    if section not in sections:
        raise ValidationError(f"unknown config section {section!r}")
    obj = sections[section]
    fields = _scalar_fields(obj)
    if name not in fields:
        raise ValidationError(f"unknown config key {key!r}")
    setattr(obj, name, _parse(text, fields[name], key))


def parse_config(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        set_value(cfg, key, value)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file (if any), then ``section.key=value`` overrides in order."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file {p} does not exist")
        parse_config(p.read_text(encoding="utf-8"), cfg)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Every key with its resolved value, in a form :func:`parse_config` reads back."""
    lines = []
    for section, obj in _sections(cfg).items():
        for name in _scalar_fields(obj):
            lines.append(f"{section}.{name} = {_format(getattr(obj, name))}")
    return "\n".join(lines) + "\n"
