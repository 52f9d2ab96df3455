"""Plain-text run configuration.

One ``section.field = value`` per line; ``#`` starts a comment. Sections are
``stft``, ``arch``, ``vq``, ``train`` and ``eval``; a top-level ``preset``
(``base`` or ``toy``) picks the starting defaults. Tuples are comma-separated
and ``none`` clears an optional integer. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .csrvq import CodecConfig, VQConfig
from .dsp import StftConfig
from .training import TrainConfig, toy_codec_config, toy_train_config
from .transformer import ArchConfig


@dataclass(frozen=True)
class EvalConfig:
    streams: tuple[int, ...] = ()   # empty means every stream count
    batch_size: int = 4
    max_clips: int = 0              # 0 means all


@dataclass(frozen=True)
class RunConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


SECTIONS = {"stft": StftConfig, "arch": ArchConfig, "vq": VQConfig, "train": TrainConfig, "eval": EvalConfig}
PRESETS = ("base", "toy")


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    text = raw.strip()
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            inner = [a for a in args if a is not type(None)]
            if text.lower() == "none":
                return None
            return _coerce(raw, inner[0], key)
        if origin is tuple:
            if not text:
                return ()
            return tuple(_coerce(part, args[0], key) for part in text.split(","))
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw.strip()!r} as {getattr(hint, '__name__', hint)}", key) from None
    raise ConfigError(f"{key}: unsupported field type {hint}", key)


def parse_config(text: str) -> RunConfig:
    entries: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    preset = "base"
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "preset":
            if value not in PRESETS:
                raise ConfigError(f"preset must be one of {PRESETS}, got {value!r}", key)
            preset = value
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}", key)
        if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            raise ConfigError(f"unknown config key {key!r}", key)
        entries[section][name] = value

    if preset == "toy":
        codec, train = toy_codec_config(), toy_train_config()
    else:
        codec, train = CodecConfig(), TrainConfig()
    base = {"stft": codec.stft, "arch": codec.arch, "vq": codec.vq, "train": train, "eval": EvalConfig()}
    built = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        updates = {name: _coerce(v, hints[name], f"{section}.{name}") for name, v in entries[section].items()}
        try:
            built[section] = replace(base[section], **updates)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}] {e}", f"{section}.{next(iter(updates), '')}") from None
    try:
        codec = CodecConfig(built["stft"], built["arch"], built["vq"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return RunConfig(codec, built["train"], built["eval"])


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    """Every field as ``section.field = value``; ``parse_config`` reads it back."""
    lines = []
    objs = {"stft": cfg.codec.stft, "arch": cfg.codec.arch, "vq": cfg.codec.vq, "train": cfg.train, "eval": cfg.eval}
    for section, obj in objs.items():
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
