"""Model and run configuration, backed by YAML files with nested sections.

Precedence for CLI runs: built-in defaults, then the config file, then
explicitly passed flags.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .anchors import REFERENCE_ANCHORS
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Topology of the canonical graph."""

    num_classes: int = 1
    stem_channels: int = 32
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    csp_m: tuple[int, ...] = (2, 2, 2, 2)
    csp_d: tuple[int, ...] = ()          # empty: half the stage width
    neck_channels: int = 128
    spp_bins: tuple[int, ...] = (3, 5, 7)
    rfp_steps: int = 2
    activation: str = "mish"
    anchors: tuple[tuple[float, float], ...] = tuple(map(tuple, REFERENCE_ANCHORS))

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ConfigError(f"stage_channels needs 4 entries, got "
                              f"{self.stage_channels}")
        if any(c <= 0 or c % 2 for c in self.stage_channels):
            raise ConfigError(f"stage channel widths must be positive and even, "
                              f"got {self.stage_channels}")
        if not self.csp_d:
            object.__setattr__(self, "csp_d",
                               tuple(c // 2 for c in self.stage_channels))
        for name in ("csp_m", "csp_d"):
            v = getattr(self, name)
            if isinstance(v, int):
                object.__setattr__(self, name, (v,) * 4)
            elif len(v) != 4:
                raise ConfigError(f"{name} needs 4 entries or a scalar, got {v}")
        if self.rfp_steps < 1:
            raise ConfigError(f"rfp_steps must be >= 1, got {self.rfp_steps}")
        if len(self.anchors) != 9:
            raise ConfigError(f"expected 9 anchors, got {len(self.anchors)}")


@dataclass(frozen=True)
class RunConfig:
    """Training / inference hyperparameters and paths."""

    input_size: int = 416
    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_momentum: float = 0.8
    warmup_bias_lr: float = 0.1
    warmup_epochs: int = 3
    lr_gamma: float = 0.1
    loss_weights: tuple[float, float, float] = (0.05, 1.0, 0.5)
    seed: int = 0
    conf_threshold: float = 0.25
    nms_threshold: float = 0.45
    iou_threshold: float = 0.5
    augment: bool = True

    def __post_init__(self):
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got "
                              f"{self.input_size}")
        for name in ("lr", "momentum", "warmup_momentum", "warmup_bias_lr",
                     "lr_gamma", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


def _from_section(cls, section: dict | None, where: str):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in (section or {}).items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section {where!r}; "
                              f"expected one of {sorted(known)}")
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | Path) -> tuple[ModelConfig, RunConfig]:
    """Parse a YAML config with ``model:`` and ``train:`` sections."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    model = _from_section(ModelConfig, doc.get("model"), "model")
    run = _from_section(RunConfig, doc.get("train"), "train")
    return model, run


def builtin_config_path(name: str) -> Path:
    """Path of a config shipped inside the package (``default``, ``smoke``)."""
    ref = resources.files("cspdet") / "configs" / f"{name}.yaml"
    return Path(str(ref))


def apply_overrides(run: RunConfig, **overrides) -> RunConfig:
    """Replace fields with explicitly passed (non-None) flag values."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    return replace(run, **clean) if clean else run


def update_anchors_in_config(path: str | Path, anchors: np.ndarray) -> None:
    """Rewrite the model.anchors entry of a YAML config file in place."""
    path = Path(path)
    doc = yaml.safe_load(path.read_text()) or {}
    doc.setdefault("model", {})["anchors"] = [[float(w), float(h)] for w, h in anchors]
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
