"""Pipeline configuration: defaults, key=value config files, and overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .corpus_filter import DEFAULT_GRID_THRESHOLD
from .dataset import LONG_LIMIT, SHORT_LIMIT, FinetuneConfig
from .preprocess import DEFAULT_MAX_SHIFT, DEFAULT_OVERLAP_THRESHOLD

ENV_PATHS = {"levels": "MIDIFILL_LEVELS", "drum_map": "MIDIFILL_DRUM_MAP"}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    grid_threshold: float = DEFAULT_GRID_THRESHOLD
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD
    max_shift_ticks: int = DEFAULT_MAX_SHIFT
    short_limit: int = SHORT_LIMIT
    long_limit: int = LONG_LIMIT
    pretrain_limit: int = SHORT_LIMIT
    noise_density: float = 0.15
    mean_span: float = 3.0
    polyphony_prob: float = 0.75
    truncate_prob: float = 0.15
    most_tracks_low: float = 0.6
    max_slice_measures: int = 0
    examples_per_song: int = 1
    slice_lens: str = "8,16"
    kinds: str = "random,track,lastbar"
    test_hints: bool = True
    seed: int = -1
    reference_parity: bool = True
    jobs: int = 1
    levels: str = ""
    drum_map: str = ""

    def validate(self) -> "PipelineConfig":
        for name in ("grid_threshold", "overlap_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        for name in ("short_limit", "long_limit", "pretrain_limit", "jobs", "examples_per_song"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_shift_ticks < 0:
            raise ConfigError("max_shift_ticks must be nonnegative")
        for name in ("polyphony_prob", "truncate_prob", "noise_density"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        return self

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(
            input_limit=self.long_limit, target_limit=self.long_limit,
            polyphony_prob=self.polyphony_prob, truncate_prob=self.truncate_prob,
            most_tracks_low=self.most_tracks_low,
            max_slice_measures=self.max_slice_measures or None,
        )

    def dump(self) -> str:
        return "\n".join(f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)) + "\n"

    def update(self, values: dict) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(raw, types[key], key))
        return self


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(raw, typ: str, key: str):
    if not isinstance(raw, str):
        return raw
    try:
        if typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {n}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then environment paths, then the config file, then ``overrides``."""
    cfg = PipelineConfig()
    for key, env in ENV_PATHS.items():
        if os.environ.get(env):
            setattr(cfg, key, os.environ[env])
    if path:
        try:
            with open(path) as fh:
                cfg.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()
