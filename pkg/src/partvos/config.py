"""Run configuration: dotted ``section.key = value`` text files plus overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

__all__ = [
    "ConfigError",
    "PartsConfig",
    "TrackConfig",
    "SegConfig",
    "AggConfig",
    "RefineConfig",
    "EvalConfig",
    "RunConfig",
    "load_config",
]

AGG_MODES = ("ave", "seg")


class ConfigError(ValueError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class PartsConfig:
    n_proposals: int = 5000
    iou_min: float = 0.3
    purity_min: float = 0.7
    nms_overlap: float = 0.8
    max_count: int = 300
    min_count: int = 10
    # "box": purity against the object's tight box; "pixel": against mask pixels
    purity_mode: str = "box"
    center_expand: float = 0.1
    side_min: float = 0.2
    side_max: float = 0.6

    def __post_init__(self):
        _check(self.n_proposals >= 1, "parts.n_proposals must be >= 1")
        _check(0.0 <= self.iou_min <= 1.0, "parts.iou_min must lie in [0, 1]")
        _check(0.0 <= self.purity_min < 1.0, "parts.purity_min must lie in [0, 1)")
        _check(0.0 < self.nms_overlap < 1.0, "parts.nms_overlap must lie in (0, 1)")
        _check(1 <= self.min_count <= self.max_count, "need 1 <= parts.min_count <= parts.max_count")
        _check(self.purity_mode in ("box", "pixel"), "parts.purity_mode must be box or pixel")
        _check(self.center_expand >= 0.0, "parts.center_expand must be >= 0")
        _check(0.0 < self.side_min <= self.side_max, "need 0 < parts.side_min <= parts.side_max")


@dataclass(frozen=True)
class TrackConfig:
    search_factor: float = 2.5
    peak_min: float = 0.55
    patience: int = 3
    # weight of the freshly tracked patch; the rest comes from the frame-0 template
    template_blend: float = 0.7

    def __post_init__(self):
        _check(self.search_factor >= 1.0, "track.search_factor must be >= 1")
        _check(0.0 <= self.peak_min <= 1.0, "track.peak_min must lie in [0, 1]")
        _check(self.patience >= 1, "track.patience must be >= 1")
        _check(0.0 <= self.template_blend <= 1.0, "track.template_blend must lie in [0, 1]")


@dataclass(frozen=True)
class SegConfig:
    patch_size: int = 80
    lr: float = 0.1
    epochs: int = 500
    batch: int = 100
    augment_copies: int = 8
    # pixels sampled per training patch
    pixels_per_patch: int = 256

    def __post_init__(self):
        _check(self.patch_size >= 16, "seg.patch_size must be >= 16")
        _check(self.lr > 0.0, "seg.lr must be > 0")
        _check(self.epochs >= 1, "seg.epochs must be >= 1")
        _check(self.batch >= 1, "seg.batch must be >= 1")
        _check(self.augment_copies >= 0, "seg.augment_copies must be >= 0")
        _check(self.pixels_per_patch >= 1, "seg.pixels_per_patch must be >= 1")


@dataclass(frozen=True)
class AggConfig:
    mode: str = "seg"
    strict_eq5: bool = False
    binarize_threshold: float = 0.5
    sigma_floor: float = 1e-6

    def __post_init__(self):
        _check(self.mode in AGG_MODES, f"agg.mode must be one of {AGG_MODES}")
        _check(0.0 <= self.binarize_threshold < 1.0, "agg.binarize_threshold must lie in [0, 1)")
        _check(self.sigma_floor > 0.0, "agg.sigma_floor must be > 0")


@dataclass(frozen=True)
class RefineConfig:
    gate: bool = False
    alpha: float = 0.3
    morph: bool = False
    radius: int = 2

    def __post_init__(self):
        _check(0.0 <= self.alpha <= 1.0, "refine.alpha must lie in [0, 1]")
        _check(self.radius >= 1, "refine.radius must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    # 0 means ceil(0.8% of the frame diagonal)
    tolerance: int = 0

    def __post_init__(self):
        _check(self.tolerance >= 0, "eval.tolerance must be >= 0")


_SECTIONS = {
    "parts": PartsConfig,
    "track": TrackConfig,
    "seg": SegConfig,
    "agg": AggConfig,
    "refine": RefineConfig,
    "eval": EvalConfig,
}
_TOP_LEVEL = ("rng_seed", "workers")


@dataclass(frozen=True)
class RunConfig:
    parts: PartsConfig = field(default_factory=PartsConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    agg: AggConfig = field(default_factory=AggConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    rng_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        _check(isinstance(self.rng_seed, int) and self.rng_seed >= 0, "rng_seed must be a non-negative integer")
        _check(self.workers >= 1, "workers must be >= 1")

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Return a copy with dotted keys (``"track.peak_min"``) replaced.

        String values are parsed according to the type of the field.
        """
        sections: dict[str, dict[str, Any]] = {}
        top: dict[str, Any] = {}
        for key, raw in overrides.items():
            if key in _TOP_LEVEL:
                top[key] = _coerce(key, raw, getattr(self, key))
                continue
            section, _, name = key.partition(".")
            if section not in _SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(self, section)
            if name not in {f.name for f in dataclasses.fields(current)}:
                raise ConfigError(f"unknown config key {key!r}")
            sections.setdefault(section, {})[name] = _coerce(key, raw, getattr(current, name))
        replaced = {s: dataclasses.replace(getattr(self, s), **kv) for s, kv in sections.items()}
        return dataclasses.replace(self, **replaced, **top)

    def items(self) -> list[tuple[str, Any]]:
        """All settings as ``(dotted_key, value)`` pairs in a stable order."""
        out = [(k, getattr(self, k)) for k in _TOP_LEVEL]
        for section in _SECTIONS:
            obj = getattr(self, section)
            out.extend((f"{section}.{f.name}", getattr(obj, f.name)) for f in dataclasses.fields(obj))
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        if isinstance(default, bool) and not isinstance(raw, bool):
            raise ConfigError(f"{key} expects a boolean, got {raw!r}")
        if isinstance(default, float) and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the config file at ``path``, then ``overrides``."""
    config = RunConfig()
    if path is not None:
        config = config.with_overrides(parse_config_text(Path(path).read_text()))
    if overrides:
        config = config.with_overrides(overrides)
    return config
