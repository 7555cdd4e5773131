"""Layered run configuration: one key=value file plus command-line overrides.

A run is configured through dotted paths (``gan.lambda1=0.8``) applied on top
of the per-stage dataclass defaults. The flattened path view is canonical: it
feeds the config digest recorded in every run manifest, so equal digests mean
identical settings.

Seed policy: the top-level ``seed`` fans out to one derived seed per stage by
stable hashing of (seed, stage name). Stages therefore stay decoupled --
changing the run seed moves every stream, but no stage can alias another's.
An explicit ``<stage>.seed`` entry pins that stage and bypasses the fan-out.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import get_type_hints

from .augment import AugmentationPlan
from .downstream import DownstreamConfig
from .gan import GeneratorConfig
from .shape_prior import ShapePriorConfig
from .wss import WssConfig

__all__ = [
    "ConfigError",
    "DataConfig",
    "RunConfig",
    "parse_config_text",
    "parse_assignment",
    "build_config",
    "flatten_config",
    "config_digest",
    "derive_seed",
]


class ConfigError(ValueError):
    """A config entry failed schema validation; the message carries its path."""


@dataclass(frozen=True)
class DataConfig:
    """Procedural dataset shape: split sizes, image dims, class mix."""

    train: int = 200
    val: int = 0
    test: int = 50
    height: int = 64
    width: int = 64
    infected_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split counts must be >= 0")
        if self.height < 16 or self.width < 16:
            raise ValueError("image dims must be >= 16")
        if not 0.0 <= self.infected_fraction <= 1.0:
            raise ValueError("infected_fraction must lie in [0, 1]")


_SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "wss": WssConfig,
    "shape": ShapePriorConfig,
    "gan": GeneratorConfig,
    "augment": AugmentationPlan,
    "seg": DownstreamConfig,
    "cls": DownstreamConfig,
}

_SCALARS = (bool, int, float, str)


@dataclass(frozen=True)
class RunConfig:
    """All stage configs plus the run seed they fan out from."""

    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    wss: WssConfig = field(default_factory=WssConfig)
    shape: ShapePriorConfig = field(default_factory=ShapePriorConfig)
    gan: GeneratorConfig = field(default_factory=GeneratorConfig)
    augment: AugmentationPlan = field(default_factory=AugmentationPlan)
    seg: DownstreamConfig = field(default_factory=DownstreamConfig)
    cls: DownstreamConfig = field(default_factory=DownstreamConfig)
    explicit: frozenset[str] = frozenset()

    def stage_seed(self, stage: str) -> int:
        if f"{stage}.seed" in self.explicit:
            return getattr(self, stage).seed
        return derive_seed(self.seed, stage)

    def stage_config(self, stage: str):
        """Section config with its seed resolved by the fan-out policy."""
        return dataclasses.replace(
            getattr(self, stage), seed=self.stage_seed(stage)
        )


def derive_seed(seed: int, stage: str) -> int:
    """Stable 32-bit fan-out of the run seed to one named stage."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


# ------------------------------------------------------------------ parsing
def parse_assignment(pair: str) -> tuple[str, str]:
    if "=" not in pair:
        raise ConfigError(f"expected key=value, got {pair!r}")
    key, _, value = pair.partition("=")
    key, value = key.strip(), value.strip()
    if not key:
        raise ConfigError(f"expected key=value, got {pair!r}")
    return key, value


def parse_config_text(text: str) -> dict[str, str]:
    """key=value per line; blank lines and #-comments skipped; later wins."""
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigError:
            raise ConfigError(
                f"line {lineno}: expected key=value, got {line!r}"
            ) from None
        entries[key] = value
    return entries


_BOOLS = {"true": True, "false": False, "1": True, "0": False}


def _coerce(value: str, typ: type, path: str):
    if typ is bool:
        if value.lower() not in _BOOLS:
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return _BOOLS[value.lower()]
    try:
        return typ(value)
    except ValueError:
        raise ConfigError(
            f"{path}: expected {typ.__name__}, got {value!r}"
        ) from None


def build_config(entries: dict[str, str]) -> RunConfig:
    """Defaults overlaid with dotted-path entries, validated per section."""
    seed = 0
    per_section: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    for path, raw in entries.items():
        if path == "seed":
            seed = _coerce(raw, int, path)
            continue
        section, _, name = path.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key: {path}")
        hints = get_type_hints(_SECTIONS[section])
        if name not in hints:
            raise ConfigError(f"unknown config key: {path}")
        typ = next((t for t in _SCALARS if hints[name] is t), None)
        if typ is None:
            raise ConfigError(f"{path}: field is not settable from key=value")
        per_section[section][name] = _coerce(raw, typ, path)

    sections: dict[str, object] = {}
    for section, cls in _SECTIONS.items():
        try:
            sections[section] = cls(**per_section[section])
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from exc
    return RunConfig(seed=seed, explicit=frozenset(entries), **sections)


# ---------------------------------------------------------------- manifests
def _flatten(prefix: str, value, out: dict[str, object]) -> None:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        for f in dataclasses.fields(value):
            _flatten(f"{prefix}{f.name}.", getattr(value, f.name), out)
    else:
        out[prefix[:-1]] = value


def flatten_config(cfg: RunConfig) -> dict[str, object]:
    """Dotted-path view of every field, the canonical manifest form."""
    out: dict[str, object] = {"seed": cfg.seed}
    for section in _SECTIONS:
        _flatten(f"{section}.", getattr(cfg, section), out)
    return out


def config_digest(cfg: RunConfig) -> str:
    blob = json.dumps(flatten_config(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
