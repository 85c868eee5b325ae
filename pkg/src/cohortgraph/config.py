"""Experiment configuration: YAML documents mapped onto dataclasses with strict key checking.

Schema (every key optional; unknown keys are errors)::

    seed: int
    profile: desk | paper
    cohort:
      path: directory written by ``cohortgraph synth`` (null: generate in memory)
      synth: {n_patients, shape, spacing_mm, prevalence_icu, prevalence_vent,
              prevalence_mort, burden_means, burden_sd, metadata_coupling,
              missing_rate, noise_sd, seed}
    model:
      arch: u-gat | u-gat-pretrained | mlp-metadata | conv-mlp | conv-gat |
            unet-pretrained-mlp | unet-pretrained-sage | unet-pretrained-knn |
            unet-pretrained-wknn
      base_filters, depth, input_size, fused_width, fusion (concat|average|maxpool),
      heads, hidden, dropout, dtype (float32|float64), sage_sample
      pretrained: run directory of a seg-only run (pretrained architectures)
    graph:
      k, p, weighting (mutual-information|pearson-abs|uniform), mi_neighbors,
      mi_reps, squared_kernel, context
    train:
      task: icu | vent | mort | multilabel | seg-only
      lr, weight_decay, batch, epoch_size, slices, stack_mode (strided|consecutive),
      min_epochs, min_epochs_pretrained, patience, max_epochs,
      lung_only_epochs, cls_start_epoch, eval_chunk,
      augment: {enabled, intensity, rotation_deg, zoom}
    runs:
      outer: list of outer folds to execute (null: all)
      inner: list of inner folds to execute (null: all)
      replicate: int reseeding every run on unchanged folds (0: default seeds)
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .synth import SynthConfig

ARCHS = (
    "u-gat",
    "u-gat-pretrained",
    "mlp-metadata",
    "conv-mlp",
    "conv-gat",
    "unet-pretrained-mlp",
    "unet-pretrained-sage",
    "unet-pretrained-knn",
    "unet-pretrained-wknn",
)
TASKS = ("icu", "vent", "mort", "multilabel", "seg-only")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class CohortConfig:
    path: Optional[str] = None
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class ModelConfig:
    arch: str = "u-gat"
    base_filters: int = 8
    depth: int = 3
    input_size: tuple = (32, 32)
    fused_width: int = 32
    fusion: str = "concat"
    heads: int = 5
    hidden: int = 64
    dropout: float = 0.10
    dtype: str = "float32"
    sage_sample: Optional[int] = None
    pretrained: Optional[str] = None

    def validate(self, path="model"):
        if self.arch not in ARCHS:
            raise ConfigError(f"{path}.arch", f"unknown architecture {self.arch!r}")
        if self.fusion not in ("concat", "average", "maxpool"):
            raise ConfigError(f"{path}.fusion", f"unknown aggregation {self.fusion!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"{path}.dtype", "must be float32 or float64")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"{path}.dropout", "must lie in [0, 1)")
        for name in ("base_filters", "depth", "fused_width", "heads", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{path}.{name}", "must be positive")

    @property
    def pretrained_backbone(self) -> bool:
        return self.arch.startswith("unet-pretrained") or self.arch == "u-gat-pretrained"


@dataclass
class GraphConfig:
    k: int = 7
    p: float = 2.0
    weighting: str = "mutual-information"
    mi_neighbors: int = 3
    mi_reps: int = 30
    squared_kernel: bool = False
    context: int = 18

    def validate(self, path="graph"):
        if self.k < 1:
            raise ConfigError(f"{path}.k", "must be positive")
        if self.p < 1:
            raise ConfigError(f"{path}.p", "Minkowski order must be >= 1")
        if self.weighting not in ("mutual-information", "pearson-abs", "uniform"):
            raise ConfigError(f"{path}.weighting", f"unknown method {self.weighting!r}")
        if self.context < self.k:
            raise ConfigError(f"{path}.context", "must be at least k")


@dataclass
class AugmentConfig:
    enabled: bool = True
    intensity: float = 0.15
    rotation_deg: float = 10.0
    zoom: tuple = (0.9, 1.2)

    @property
    def is_identity(self) -> bool:
        return (not self.enabled) or (
            self.intensity == 0 and self.rotation_deg == 0 and tuple(self.zoom) == (1.0, 1.0)
        )


@dataclass
class TrainConfig:
    task: str = "icu"
    lr: float = 2e-3
    weight_decay: float = 3e-5
    batch: int = 8
    epoch_size: int = 80
    slices: int = 4
    stack_mode: str = "strided"
    min_epochs: int = 25
    min_epochs_pretrained: int = 5
    patience: int = 5
    max_epochs: int = 45
    lung_only_epochs: int = 3
    cls_start_epoch: int = 15
    eval_chunk: int = 32
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self, path="train"):
        if self.task not in TASKS:
            raise ConfigError(f"{path}.task", f"unknown task {self.task!r}")
        for name in ("lr", "batch", "epoch_size", "slices", "min_epochs", "min_epochs_pretrained", "patience", "max_epochs", "eval_chunk"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{path}.{name}", "must be positive")
        if self.weight_decay < 0:
            raise ConfigError(f"{path}.weight_decay", "must be nonnegative")
        if self.patience > self.min_epochs:
            raise ConfigError(f"{path}.patience", "must not exceed min_epochs")
        if self.max_epochs < self.min_epochs:
            raise ConfigError(f"{path}.max_epochs", "must be at least min_epochs")
        if self.stack_mode not in ("strided", "consecutive"):
            raise ConfigError(f"{path}.stack_mode", f"unknown mode {self.stack_mode!r}")
        if not 0 <= self.lung_only_epochs <= self.cls_start_epoch:
            raise ConfigError(f"{path}.lung_only_epochs", "must lie in [0, cls_start_epoch]")


@dataclass
class RunsConfig:
    outer: Optional[list] = None
    inner: Optional[list] = None
    replicate: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    profile: str = "desk"
    cohort: CohortConfig = field(default_factory=CohortConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    runs: RunsConfig = field(default_factory=RunsConfig)

    def validate(self) -> "ExperimentConfig":
        if self.profile not in PROFILES:
            raise ConfigError("profile", f"unknown profile {self.profile!r}")
        self.model.validate()
        self.graph.validate()
        self.train.validate()
        if self.model.pretrained_backbone and self.train.task == "seg-only":
            raise ConfigError("model.arch", "seg-only runs train the U-Net itself")
        return self


# Overrides applied by ``profile``; explicit keys in the document win.
PROFILES = {
    "desk": {},
    "paper": {
        "model": {"base_filters": 32, "depth": 4, "input_size": (96, 96)},
        "train": {
            "lr": 5e-4,
            "batch": 18,
            "slices": 10,
            "min_epochs": 25,
            "patience": 5,
            "max_epochs": 100,
            "lung_only_epochs": 10,
            "cls_start_epoch": 20,
        },
        "cohort": {"synth": {"shape": (96, 96, 96)}},
    },
}


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        return build(tp, value, path)
    if tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return tuple(value)
    if tp is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return list(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {_type_name(tp)}")


def build(cls, data: dict, path: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in (data or {}).items():
        where = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(where, "unknown key")
        kwargs[key] = _coerce(value, hints[key], where)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(path or "<root>", str(exc)) from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def from_dict(data: Optional[dict]) -> ExperimentConfig:
    data = dict(data or {})
    profile = data.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {profile!r}")
    merged = _merge(PROFILES[profile], data)
    return build(ExperimentConfig, merged).validate()


def load(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("<document>", "top level must be a mapping")
    return from_dict(data)


def to_dict(cfg) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return plain(cfg)


def dump(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False), encoding="utf-8")
