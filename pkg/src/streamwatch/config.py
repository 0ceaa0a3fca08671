"""Run configuration: one JSON document with a section per module.

Schema (every key optional; omitted keys keep their defaults)::

    {
      "stream":  StreamConfig fields (d1, k, s, q, extra_channels, seed, ...),
      "model":   ModelConfig fields (h1, h2, omega, lr, max_epoch, ...),
      "scoring": {"tau": null | float, "t_a": null | float, "t_n": null | float,
                  "preset": null | "inf" | "spe" | "ted" | "twi"},
      "ados":    AdosConfig fields (t1, t2, bound_variant, strict_paper_mode, n_sg, ...),
      "update":  UpdateConfig fields (l_s, tau_u, T, lam, update_epochs, ...),
      "run":     {"chunk": int, "calib_fraction": float}
    }

``model.d1``/``model.d2`` are taken from the stream section (or the data
header) and must agree with it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Sequence

from .clstm import ModelConfig
from .drift import UpdateConfig
from .errors import ConfigError
from .filtering import AdosConfig
from .scoring import TAU_PRESETS, ThresholdConfig
from .stream import StreamConfig


@dataclass(frozen=True)
class ScoringConfig:
    tau: float | None = None
    t_a: float | None = None
    t_n: float | None = None
    preset: str | None = None

    def thresholds(self, fallback_tau: float | None = None) -> ThresholdConfig:
        tau = self.tau
        if tau is None and self.preset is not None:
            if self.preset not in TAU_PRESETS:
                raise ConfigError(f"unknown tau preset {self.preset!r}; choose from {sorted(TAU_PRESETS)}")
            tau = TAU_PRESETS[self.preset]
        if tau is None:
            tau = fallback_tau
        if tau is None:
            raise ConfigError("no anomaly threshold: set scoring.tau, scoring.preset or calibrate during train")
        th = ThresholdConfig(float(tau), self.t_a, self.t_n)
        th.validate()
        return th


@dataclass(frozen=True)
class HarnessConfig:
    chunk: int = 256  # windows per forward pass in detect/stream
    calib_fraction: float = 0.25


_MODEL_DEFAULTS = {f.name: f.default for f in fields(ModelConfig) if f.name not in ("d1", "d2")}


@dataclass
class RunConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: dict = field(default_factory=lambda: dict(_MODEL_DEFAULTS))
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    ados: AdosConfig = field(default_factory=AdosConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)
    run: HarnessConfig = field(default_factory=HarnessConfig)

    def model_config(self, d1: int | None = None, d2: int | None = None) -> ModelConfig:
        d1 = self.stream.d1 if d1 is None else d1
        d2 = self.stream.d2 if d2 is None else d2
        cfg = ModelConfig(d1=d1, d2=d2, **self.model)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "stream": asdict(self.stream),
            "model": dict(self.model),
            "scoring": asdict(self.scoring),
            "ados": asdict(self.ados),
            "update": asdict(self.update),
            "run": asdict(self.run),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> None:
        self.stream.validate()
        self.model_config()
        self.ados.validate()
        self.update.validate()
        if self.run.chunk < 1 or not 0.0 < self.run.calib_fraction < 1.0:
            raise ConfigError("run.chunk must be >= 1 and run.calib_fraction in (0, 1)")
        if self.model["q"] != self.stream.q:
            raise ConfigError(f"model.q={self.model['q']} differs from stream.q={self.stream.q}")


_SECTIONS = {
    "stream": StreamConfig,
    "scoring": ScoringConfig,
    "ados": AdosConfig,
    "update": UpdateConfig,
    "run": HarnessConfig,
}


def _merge_section(name: str, current, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    if name == "model":
        unknown = set(values) - set(_MODEL_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)} (d1/d2 come from the stream)")
        return {**current, **values}
    known = {f.name for f in fields(_SECTIONS[name]) if not f.name.startswith("_")}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys {sorted(unknown)}")
    try:
        return replace(current, **values)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    unknown = set(doc) - {"model", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    for name, values in doc.items():
        setattr(cfg, name, _merge_section(name, getattr(cfg, name), values))
    return cfg


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, assignments: Sequence[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    for item in assignments:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        cfg = from_dict({section: {name: _parse_value(value)}}, cfg)
    return cfg


def load_config(path: str | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fp:
                doc = json.load(fp)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = from_dict(doc, cfg)
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg
