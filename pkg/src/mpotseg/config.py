"""Experiment configuration and its flat ``section.key=value`` text format.

Example::

    seed=3
    out=runs/demo
    world.n_classes=8
    sinkhorn.epsilon=0.05
    schedule.total_iters=3000
    pipeline.matcher=sinkhorn

Blank lines and lines starting with ``#`` are ignored. Unknown keys and
malformed values raise :class:`ConfigError`. :func:`format_config` writes every
field, and parsing its output gives back an equal :class:`ExperimentConfig`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

from .alignment import AlignmentError, PipelineConfig
from .ot import OTError, SinkhornConfig
from .synthetic import WorldConfig, WorldError
from .training import LossWeights, Schedule, TrainingError


class ConfigError(ValueError):
    pass


VARIANTS = ("sinkhorn", "hungarian", "none")


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    variants: tuple[str, ...] = VARIANTS

    def __post_init__(self):
        if len(self.variants) < 2:
            raise ConfigError("an ablation needs at least two variants")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown ablation variants {bad}")
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("ablation variants repeat")
        if not self.seeds:
            raise ConfigError("an ablation needs at least one seed")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    schedule: Schedule = field(default_factory=Schedule)
    loss: LossWeights = field(default_factory=LossWeights)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        # the experiment seed drives initialisation and scene sampling
        if self.schedule.seed != self.seed:
            object.__setattr__(self, "schedule", replace(self.schedule, seed=self.seed))
        if self.pipeline.sinkhorn != self.sinkhorn:
            object.__setattr__(self, "pipeline", replace(self.pipeline, sinkhorn=self.sinkhorn))
        if self.pipeline.start_layer > self.world.n_layers:
            raise ConfigError(
                f"pipeline.start_layer={self.pipeline.start_layer} exceeds world.n_layers={self.world.n_layers}"
            )

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seed=int(seed))

    def with_matcher(self, matcher: str) -> ExperimentConfig:
        return replace(self, pipeline=replace(self.pipeline, matcher=matcher))


# keys that exist on the dataclasses but are owned elsewhere
_HIDDEN = {("schedule", "seed"), ("pipeline", "sinkhorn")}
_SECTIONS = ("world", "sinkhorn", "schedule", "loss", "pipeline", "ablation")
_SCALARS = ("out", "seed")


def _section_fields(section: str):
    cls = type(getattr(ExperimentConfig(), section))
    return cls, {f.name: f for f in fields(cls) if (section, f.name) not in _HIDDEN}


def _field_kind(cls, name: str):
    default = getattr(cls(), name)
    if isinstance(default, bool):
        return bool
    if isinstance(default, tuple):
        return (tuple, type(default[0]) if default else float)
    return type(default)


def _parse_value(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(kind, tuple):
            inner = kind[1]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(inner(s) for s in items)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``section.key=value`` lines on top of ``base`` (defaults if omitted)."""
    base = base or ExperimentConfig()
    updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict = {}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        seen.add(key)
        if key in _SCALARS:
            top[key] = _parse_value(type(getattr(base, key)), raw, key)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key}")
        cls, known = _section_fields(section)
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key}")
        updates[section][name] = _parse_value(_field_kind(cls, name), raw, key)
    try:
        parts = {s: replace(getattr(base, s), **updates[s]) if updates[s] else getattr(base, s)
                 for s in _SECTIONS}
        return ExperimentConfig(**parts, **{k: top.get(k, getattr(base, k)) for k in _SCALARS})
    except (WorldError, OTError, TrainingError, AlignmentError) as exc:
        raise ConfigError(str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(cfg: ExperimentConfig) -> str:
    lines = [f"{k}={_format_value(getattr(cfg, k))}" for k in _SCALARS]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        _, known = _section_fields(section)
        lines.extend(f"{section}.{name}={_format_value(getattr(obj, name))}" for name in known)
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def as_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
