"""Run configuration: one flat YAML mapping, unknown keys rejected.

Defaults follow the published full-scale setup where it gives a value; the
``desk`` preset shrinks everything to run on one core in seconds.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

OUTPUT_ROOT_ENV = "PYRQUANT_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_dir: str = "data"
    output_dir: str = "runs/default"
    protocol: str = "cub"
    holdout: int = 10
    D: int = 1536
    m_values: List[int] = field(default_factory=lambda: [2, 4, 6, 8])
    K: int = 256
    rho: List[float] = field(default_factory=lambda: [3.0, 2.0, 1.0])
    alpha: float = 16.0
    kappa: Optional[int] = 5
    tau: float = 0.5
    m_plus: float = 0.5
    m_minus: float = 3.0
    gamma: float = 1.0
    variant: str = "default"
    epochs: int = 70
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    data_init: bool = True
    kmeans_init: bool = True
    validate: bool = False
    select: str = "last"
    top_n: int = 0
    p_at_n: List[int] = field(default_factory=lambda: [1, 5, 10, 20, 50, 100])
    search_dtype: str = "float64"

    def validate_values(self) -> None:
        if self.protocol not in ("cub", "dogs"):
            raise ConfigError(f"protocol: expected 'cub' or 'dogs', got {self.protocol!r}")
        if self.select not in ("last", "best"):
            raise ConfigError(f"select: expected 'last' or 'best', got {self.select!r}")
        if self.search_dtype not in ("float64", "float32"):
            raise ConfigError(f"search_dtype: expected float64 or float32, got {self.search_dtype!r}")
        if len(self.rho) != 3:
            raise ConfigError("rho: expected three focus factors")
        if not self.m_values:
            raise ConfigError("m_values: need at least one codebook count")
        for m in self.m_values:
            if m < 1 or self.D % m:
                raise ConfigError(f"m_values: D={self.D} is not divisible by M={m}")
        if self.kappa is not None and not 1 <= self.kappa <= self.K:
            raise ConfigError(f"kappa: must lie in [1, K={self.K}]")
        if self.select == "best" and not self.validate:
            raise ConfigError("select: 'best' needs validate: true")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


PRESETS: Dict[str, Dict[str, Any]] = {
    "full-cub": {},
    "full-dogs": {"tau": 0.25, "protocol": "dogs"},
    "desk": {"D": 64, "K": 16, "m_values": [2, 4, 8], "epochs": 30, "lr": 1e-3},
}


def _coerce(name: str, value: Any) -> Any:
    """Parse a string override (from a flag) with YAML scalar rules."""
    if isinstance(value, str):
        return yaml.safe_load(value)
    return value


def make_config(values: Optional[Dict[str, Any]] = None, preset: Optional[str] = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    merged: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    values = dict(values or {})
    nested_preset = values.pop("preset", None)
    if nested_preset is not None:
        if nested_preset not in PRESETS:
            raise ConfigError(f"unknown preset {nested_preset!r}")
        merged = {**PRESETS[nested_preset], **merged}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged.update({k: _coerce(k, v) for k, v in values.items()})
    cfg = RunConfig(**merged)
    cfg.validate_values()
    return cfg


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None,
                preset: Optional[str] = None) -> RunConfig:
    values: Dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values.update(loaded)
    values.update(overrides or {})
    return make_config(values, preset)
