"""Run configuration: one JSON document covering training, shift sampling,
synthesis, and the serve mode."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .engine import TrainConfig
from .geometry import ShiftRange
from .synthesis import NORMAL_JSW_MM


@dataclass(frozen=True)
class SynthesisSettings:
    per_source: int = 4
    # One weight per severity bin 0..4; None means uniform.
    jsw_distribution: tuple[float, ...] | None = None
    normal_jsw_mm: float = NORMAL_JSW_MM

    def __post_init__(self) -> None:
        if self.per_source < 0:
            raise ValueError("SynthesisSettings: per_source must be >= 0")
        if self.jsw_distribution is not None and len(self.jsw_distribution) != 5:
            raise ValueError("SynthesisSettings: jsw_distribution needs 5 weights")
        if not math.isfinite(self.normal_jsw_mm) or self.normal_jsw_mm <= 0:
            raise ValueError("SynthesisSettings: normal_jsw_mm must be positive")


@dataclass(frozen=True)
class ServeSettings:
    host: str = "127.0.0.1"
    port: int = 8000
    annotations_path: str = "annotations.jsonl"

    def __post_init__(self) -> None:
        if not (0 < self.port < 65536):
            raise ValueError("ServeSettings: port out of range")


@dataclass(frozen=True)
class AppConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    shift_range: ShiftRange = field(default_factory=ShiftRange)
    synthesis: SynthesisSettings = field(default_factory=SynthesisSettings)
    serve: ServeSettings = field(default_factory=ServeSettings)

    def to_record(self) -> dict:
        return {
            "train": self.train.to_record(),
            "shift_range": {
                "theta_max_deg": math.degrees(self.shift_range.theta_max),
                "x_range": list(self.shift_range.x_range),
                "y_range": list(self.shift_range.y_range),
                "rng_seed": self.shift_range.rng_seed,
            },
            "synthesis": {
                "per_source": self.synthesis.per_source,
                "jsw_distribution": (
                    list(self.synthesis.jsw_distribution)
                    if self.synthesis.jsw_distribution is not None
                    else None
                ),
                "normal_jsw_mm": self.synthesis.normal_jsw_mm,
            },
            "serve": {
                "host": self.serve.host,
                "port": self.serve.port,
                "annotations_path": self.serve.annotations_path,
            },
        }


_SECTIONS = ("train", "shift_range", "synthesis", "serve")


def _build_section(name: str, raw: Mapping):
    if name == "train":
        return TrainConfig(**raw)
    if name == "shift_range":
        raw = dict(raw)
        if "theta_max_deg" in raw:
            raw["theta_max"] = math.radians(float(raw.pop("theta_max_deg")))
        if "x_range" in raw:
            raw["x_range"] = tuple(raw["x_range"])
        if "y_range" in raw:
            raw["y_range"] = tuple(raw["y_range"])
        return ShiftRange(**raw)
    if name == "synthesis":
        raw = dict(raw)
        if raw.get("jsw_distribution") is not None:
            raw["jsw_distribution"] = tuple(raw["jsw_distribution"])
        return SynthesisSettings(**raw)
    return ServeSettings(**raw)


def config_from_record(record: Mapping) -> AppConfig:
    unknown = set(record) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name in _SECTIONS:
        raw = record.get(name, {})
        if not isinstance(raw, Mapping):
            raise ValueError(f"config section {name} must be an object")
        try:
            sections[name] = _build_section(name, raw)
        except (TypeError, ValueError) as err:
            raise ValueError(f"config section {name}: {err}") from err
    return AppConfig(**sections)


def load_config(path: str | Path | None) -> AppConfig:
    """Read a config file; None or missing sections fall back to defaults."""
    if path is None:
        return AppConfig()
    path = Path(path)
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: not valid JSON: {err}") from err
    if not isinstance(record, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return config_from_record(record)
