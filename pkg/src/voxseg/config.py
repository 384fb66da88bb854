"""Run configuration: a JSON key-tree with per-section dataclasses,
validated at load. Defaults mirror the training protocol (lr 0.001,
hard-voxel fraction 0.1, 1.5 mm spacing, crops (144, 250, 250), ~100
epochs, 3-fold cross-validation).

Presets name the shipped experiment variants:
- ``3d-single``: kidney task only (the single-task baseline);
- ``mt-dice``: both tasks, dice loss with smoothing enabled;
- ``mt-bootstrap``: both tasks, bootstrapped cross-entropy.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .losses import BOOTSTRAP_CE, DICE, LossConfig
from .network import TaskSpec

PRESET_NAMES = ("3d-single", "mt-dice", "mt-bootstrap")

_KIDNEY_TASK = {"name": "kidney", "num_classes": 3}
_LIVER_TASK = {"name": "liver", "num_classes": 2}


@dataclass
class NetworkSection:
    depth: int = 3
    base_channels: int = 8
    tasks: list = field(default_factory=lambda: [dict(_KIDNEY_TASK),
                                                 dict(_LIVER_TASK)])

    def task_specs(self) -> list:
        return [TaskSpec(name=t["name"], num_classes=t["num_classes"],
                         class_names=t.get("class_names"))
                for t in self.tasks]


@dataclass
class LossSection:
    kind: str = BOOTSTRAP_CE
    bootstrap_fraction: float = 0.1
    dice_smoothing: float = 0.0

    def loss_config(self) -> LossConfig:
        return LossConfig(kind=self.kind,
                          bootstrap_fraction=self.bootstrap_fraction,
                          dice_smoothing=self.dice_smoothing)


@dataclass
class OptimizerSection:
    lr: float = 0.001
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class DataSection:
    manifest: str = "manifest.jsonl"
    crop: tuple = (144, 250, 250)
    target_spacing: float = 1.5
    augment: bool = True
    max_angle_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)


@dataclass
class ScheduleSection:
    epochs: int = 100
    eval_interval: int = 10
    max_steps: int = 0  # 0 means no cap


@dataclass
class FoldsSection:
    k: int = 3
    seed: int = 0  # fold assignment seed, separate from the run seed


@dataclass
class TrainConfig:
    network: NetworkSection = field(default_factory=NetworkSection)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    folds: FoldsSection = field(default_factory=FoldsSection)
    seed: int = 0
    out_dir: str = "runs/out"

    def validate(self) -> None:
        """Range checks beyond what the section types enforce; the module
        contracts (network/loss/optimizer constructors) re-check their own."""
        if self.network.depth < 2:
            raise ConfigError(f"network.depth must be >= 2, got {self.network.depth}")
        if self.network.base_channels < 1:
            raise ConfigError("network.base_channels must be >= 1")
        if not self.network.tasks:
            raise ConfigError("network.tasks must not be empty")
        self.network.task_specs()
        self.loss.loss_config()
        if self.optimizer.lr <= 0:
            raise ConfigError(f"optimizer.lr must be positive, got {self.optimizer.lr}")
        if len(self.data.crop) != 3 or any(c < 1 for c in self.data.crop):
            raise ConfigError(f"data.crop must be three positive extents, got {self.data.crop}")
        if self.data.target_spacing <= 0:
            raise ConfigError("data.target_spacing must be positive")
        lo, hi = self.data.scale_range
        if not (0 < lo <= hi):
            raise ConfigError(f"data.scale_range invalid: {self.data.scale_range}")
        if self.schedule.epochs < 1:
            raise ConfigError("schedule.epochs must be >= 1")
        if self.schedule.eval_interval < 1:
            raise ConfigError("schedule.eval_interval must be >= 1")
        if self.schedule.max_steps < 0:
            raise ConfigError("schedule.max_steps must be >= 0 (0 = no cap)")
        if self.folds.k < 1:
            raise ConfigError("folds.k must be >= 1 (1 = train on all cases)")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"network": NetworkSection, "loss": LossSection,
             "optimizer": OptimizerSection, "data": DataSection,
             "schedule": ScheduleSection, "folds": FoldsSection}

_TUPLE_FIELDS = {("optimizer", "betas"), ("data", "crop"),
                 ("data", "scale_range")}


def _build_section(name: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object, got {type(values).__name__}")
    known = {f for f in cls.__dataclass_fields__}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {', '.join(unknown)}")
    coerced = {}
    for key, value in values.items():
        if (name, key) in _TUPLE_FIELDS:
            value = tuple(value)
        coerced[key] = value
    return cls(**coerced)


def config_from_dict(tree: dict) -> TrainConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config root must be an object")
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = sorted(set(tree) - known)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in tree:
            kwargs[name] = _build_section(name, cls, tree[name])
    for scalar in ("seed", "out_dir"):
        if scalar in tree:
            kwargs[scalar] = tree[scalar]
    config = TrainConfig(**kwargs)
    config.validate()
    return config


def preset(name: str) -> dict:
    """The config tree for a named experiment variant (defaults included)."""
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    tree = TrainConfig().to_dict()
    if name == "3d-single":
        tree["network"]["tasks"] = [dict(_KIDNEY_TASK)]
        tree["loss"] = {"kind": DICE, "bootstrap_fraction": 0.1,
                        "dice_smoothing": 1.0}
    elif name == "mt-dice":
        tree["loss"] = {"kind": DICE, "bootstrap_fraction": 0.1,
                        "dice_smoothing": 1.0}
    else:  # mt-bootstrap
        tree["loss"] = {"kind": BOOTSTRAP_CE, "bootstrap_fraction": 0.1,
                        "dice_smoothing": 0.0}
    return copy.deepcopy(tree)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Read a JSON config. A top-level ``"preset"`` key seeds the tree with
    that preset before the file's own keys apply. Relative paths in the file
    resolve against the file's directory; the manifest must exist."""
    path = os.fspath(path)
    try:
        with open(path) as fh:
            tree = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path!r}: {err}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}")
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: config root must be an object")
    preset_name = tree.pop("preset", None)
    if preset_name is not None:
        tree = _merge(preset(preset_name), tree)
    if overrides:
        tree = _merge(tree, overrides)
    config = config_from_dict(tree)

    base = os.path.dirname(os.path.abspath(path))
    config.data.manifest = os.path.normpath(
        os.path.join(base, config.data.manifest))
    if not os.path.isabs(config.out_dir):
        config.out_dir = os.path.normpath(os.path.join(base, config.out_dir))
    if not os.path.exists(config.data.manifest):
        raise ConfigError(f"manifest not found: {config.data.manifest}")
    return config
