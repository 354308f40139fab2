"""Run configuration: a flat key = value file, presets, strict parsing.

Unknown keys are rejected. Every run writes its fully resolved
configuration next to its outputs so any result can be reproduced from
that file alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    # data
    dataset: str = "cifar10"          # cifar10 | separable | xor | random
    data_dir: str = ""
    train_size: int = 0               # 0 = all available
    val_size: int = 0
    data_seed: int = 0                # synthetic corpus generation seed
    augment: bool = True
    pad: int = 4
    hflip_prob: float = 0.5
    # network
    blocks_per_group: int = 3
    base_width: int = 16
    classes: int = 10
    epsilon: float | None = 2.5
    gate_realization: str = "exact"
    big_L: float = 1e9
    side_supervision: bool = True
    side_coefficient: float = 0.1
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    # optimizer / schedule
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    decay_bn: bool = True
    standard_milestones: tuple[int, ...] = (82, 123)
    adaptive_milestones: tuple[int, ...] = (41, 61)
    # training
    batch_size: int = 128
    epochs: int = 40
    seed: int = 1
    dtype: str = "f32"
    collapse_threshold: float = 1.0
    confirm_epochs: int = 2
    zero_tolerance: float = 1e-4
    execute_collapsed: bool = False
    # run management
    out_dir: str = ""

    def validate(self) -> None:
        if self.dataset not in ("cifar10", "separable", "xor", "random"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "cifar10" and not self.data_dir:
            raise ConfigError("dataset cifar10 needs data_dir")
        if self.epsilon is not None and not (self.epsilon > 0):
            raise ConfigError(f"epsilon must be positive, got {self.epsilon} "
                              "(use 'none' to disable gating)")
        if self.gate_realization not in ("exact", "circuit"):
            raise ConfigError(f"unknown gate_realization {self.gate_realization!r}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (train-mode batch norm)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


PRESETS: dict[str, dict[str, str]] = {
    # Full-scale settings: 110-layer network, the published hyperparameters.
    "cifar10-eps110": {
        "blocks_per_group": "18", "epsilon": "2.5", "epochs": "1000",
        "batch_size": "128", "base_lr": "0.1", "weight_decay": "0.0002",
        "momentum": "0.9", "standard_milestones": "82,123",
        "adaptive_milestones": "41,61",
    },
    # Desk-scale settings: 20-layer network on a small subset.
    "cifar10-eps20": {
        "blocks_per_group": "3", "epsilon": "2.5", "epochs": "40",
        "batch_size": "128", "base_lr": "0.1", "weight_decay": "0.0002",
        "momentum": "0.9", "standard_milestones": "82,123",
        "adaptive_milestones": "41,61", "train_size": "5000", "val_size": "1000",
    },
}


def _parse_value(name: str, raw: str, ftype):
    raw = raw.strip()
    if ftype == "float | None" or name == "epsilon":
        if raw.lower() in ("none", "inf"):
            return None if raw.lower() == "none" else float("inf")
        return float(raw)
    if ftype is bool or ftype == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if ftype is int or ftype == "int":
        return int(raw)
    if ftype is float or ftype == "float":
        return float(raw)
    if ftype == "tuple[int, ...]":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def _field_types() -> dict[str, object]:
    return {f.name: f.type for f in fields(RunConfig)}


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    types = _field_types()
    values = dataclasses.asdict(cfg)
    for key, raw in overrides.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, str(raw), types[key])
    for name in ("standard_milestones", "adaptive_milestones"):
        if isinstance(values[name], list):
            values[name] = tuple(values[name])
    return RunConfig(**values)


def from_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return apply_overrides(RunConfig(), PRESETS[name])


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    overrides: dict[str, str] = {}
    preset: str | None = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key, value = key.strip(), value.strip()
        if key == "preset":
            preset = value
        else:
            overrides[key] = value
    cfg = base if base is not None else (
        from_preset(preset) if preset else RunConfig())
    if base is not None and preset is not None:
        raise ConfigError("preset inside a config file cannot be combined with a base config")
    return apply_overrides(cfg, overrides)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def serialize(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
