"""Experiment configuration: nested dataclasses loaded strictly from YAML/JSON."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 384
    depth: int = 5
    heads: int = 12
    mlp_ratio: float = 4.0
    position_embedding: bool = True
    decoder_mlp_act: str = "none"
    # None: on for equal splits, off for a larger first task
    classifier_layernorm: bool | None = None
    mask_init: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-4
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_pfr: float = 0.001
    lambda_gcab: float = 0.05
    s_max: float = 800.0
    loss: str = "bce"
    augment: bool = False
    holdout_fraction: float = 0.0
    freeze_backbone_after_task1: bool = False
    binarize_at_accumulate: bool = False
    eval_batch_size: int = 256


@dataclass
class AblationConfig:
    gca: bool = True
    backbone_reg: str = "pfr2"
    fdc: bool = True


@dataclass
class DataConfig:
    source: str = "synth"
    path: str | None = None
    num_classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    difficulty: float = 0.5
    seed: int | None = None


@dataclass
class SplitConfig:
    scheme: str = "equal"
    num_tasks: int = 5
    first_task_classes: int | None = None


@dataclass
class DistillConfig:
    capacity: float = 1.0
    epochs: int = 200
    lr: float = 5e-3
    batch_size: int = 128
    temperature: float = 1.0
    seed: int = 0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    preset: str | None = None
    seed: int = 0
    precision: str = "float32"
    output_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    @property
    def classifier_layernorm(self) -> bool:
        if self.model.classifier_layernorm is not None:
            return self.model.classifier_layernorm
        return self.split.scheme == "equal"

    @property
    def uses_projector(self) -> bool:
        return self.ablation.backbone_reg in ("pfr1", "pfr2")

    @property
    def pfr_layers(self) -> int:
        return 2 if self.ablation.backbone_reg == "pfr2" else 1

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def config_hash(self) -> str:
        """Digest of everything that affects results (the output location does not)."""
        payload = self.to_dict()
        payload.pop("output_dir")
        payload.pop("name")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


PRESETS: dict[str, dict[str, Any]] = {
    "tiny10": {
        "name": "tiny10",
        "precision": "float64",
        "model": {
            "image_size": 16, "channels": 1, "patch_size": 4, "embed_dim": 64, "depth": 2, "heads": 4,
            "mlp_ratio": 4.0,
        },
        "train": {
            "epochs": 20, "lr": 1e-4, "batch_size": 32, "holdout_fraction": 0.1,
            "binarize_at_accumulate": True,
        },
        "data": {"source": "synth", "num_classes": 10, "per_class": 100, "test_per_class": 50, "difficulty": 0.3},
        "split": {"scheme": "equal", "num_tasks": 5},
        "distill": {"epochs": 200, "lr": 5e-4, "batch_size": 32},
    },
    "mnistlike": {
        "name": "mnistlike",
        "precision": "float32",
        "model": {
            "image_size": 28, "channels": 1, "patch_size": 7, "embed_dim": 64, "depth": 2, "heads": 4,
            "mlp_ratio": 4.0,
        },
        "train": {"epochs": 5, "lr": 1e-3, "batch_size": 64, "holdout_fraction": 0.1},
        "data": {"source": "idx", "num_classes": 10},
        "split": {"scheme": "equal", "num_tasks": 5},
        "distill": {"epochs": 10, "lr": 5e-3, "batch_size": 64},
    },
    "cifar100-5": {
        "name": "cifar100-5",
        "precision": "float32",
        "model": {"image_size": 32, "channels": 3, "patch_size": 4, "embed_dim": 384, "depth": 5, "heads": 12},
        "train": {"epochs": 500, "lr": 1e-4, "batch_size": 128},
        "data": {"source": "manifest", "num_classes": 100},
        "split": {"scheme": "equal", "num_tasks": 5},
    },
    "cifar100-10": {
        "name": "cifar100-10",
        "precision": "float32",
        "model": {"image_size": 32, "channels": 3, "patch_size": 4, "embed_dim": 384, "depth": 5, "heads": 12},
        "train": {"epochs": 500, "lr": 1e-4, "batch_size": 128},
        "data": {"source": "manifest", "num_classes": 100},
        "split": {"scheme": "equal", "num_tasks": 10},
    },
}

ABLATIONS: dict[str, dict[str, Any]] = {
    "finetune": {"gca": False, "backbone_reg": "none", "fdc": False},
    "gca": {"gca": True, "backbone_reg": "none", "fdc": False},
    "gca+fd": {"gca": True, "backbone_reg": "fd", "fdc": False},
    "gca+pfr2": {"gca": True, "backbone_reg": "pfr2", "fdc": False},
    "gca+pfr1+fdc": {"gca": True, "backbone_reg": "pfr1", "fdc": True},
    "gca+pfr2+fdc": {"gca": True, "backbone_reg": "pfr2", "fdc": True},
}


def _merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _build(cls, values: dict[str, Any], path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key '{path}{key}'")
    kwargs = {}
    for name, f in known.items():
        if name not in values:
            continue
        value = values[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None  # type: ignore[misc]
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _check(cond: bool, field_name: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{field_name}: {message}")


def _coerce_types(cfg: ExperimentConfig) -> None:
    for section_name in ("model", "train", "ablation", "data", "split", "distill"):
        section = getattr(cfg, section_name)
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            default = f.default
            if value is None or default is None or default is dataclasses.MISSING:
                continue
            name = f"{section_name}.{f.name}"
            if isinstance(default, bool):
                _check(isinstance(value, bool), name, f"expected true/false, got {value!r}")
            elif isinstance(default, int):
                _check(isinstance(value, int) and not isinstance(value, bool), name, f"expected an integer, got {value!r}")
            elif isinstance(default, float):
                _check(isinstance(value, (int, float)) and not isinstance(value, bool), name,
                       f"expected a number, got {value!r}")
                setattr(section, f.name, float(value))
            elif isinstance(default, str):
                _check(isinstance(value, str), name, f"expected a string, got {value!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _coerce_types(cfg)
    m, tr, ab, d, sp, di = cfg.model, cfg.train, cfg.ablation, cfg.data, cfg.split, cfg.distill
    _check(cfg.precision in ("float32", "float64"), "precision", "must be float32 or float64")
    _check(isinstance(cfg.seed, int), "seed", "must be an integer")
    _check(m.image_size > 0 and m.image_size % m.patch_size == 0, "model.image_size",
           "must be positive and divisible by model.patch_size")
    _check(m.embed_dim > 0 and m.embed_dim % m.heads == 0, "model.embed_dim", "must be divisible by model.heads")
    _check(m.depth >= 0, "model.depth", "must be non-negative")
    _check(m.mlp_ratio > 0, "model.mlp_ratio", "must be positive")
    _check(m.decoder_mlp_act in ("none", "gelu"), "model.decoder_mlp_act", "must be 'none' or 'gelu'")
    _check(tr.epochs >= 1, "train.epochs", "must be at least 1")
    _check(tr.lr > 0, "train.lr", "must be positive")
    _check(tr.batch_size >= 1, "train.batch_size", "must be at least 1")
    _check(tr.lambda_pfr >= 0, "train.lambda_pfr", "must be non-negative")
    _check(tr.lambda_gcab >= 0, "train.lambda_gcab", "must be non-negative")
    _check(tr.s_max > 1, "train.s_max", "must exceed 1")
    _check(tr.loss in ("bce", "ce"), "train.loss", "must be 'bce' or 'ce'")
    _check(0.0 <= tr.holdout_fraction < 1.0, "train.holdout_fraction", "must lie in [0, 1)")
    _check(ab.backbone_reg in ("none", "fd", "pfr1", "pfr2"), "ablation.backbone_reg",
           "must be one of none, fd, pfr1, pfr2")
    _check(not ab.fdc or ab.backbone_reg in ("pfr1", "pfr2"), "ablation.fdc",
           "drift compensation needs projectors (backbone_reg pfr1 or pfr2)")
    _check(d.source in ("synth", "idx", "manifest"), "data.source", "must be synth, idx or manifest")
    _check(d.source == "synth" or d.path is not None, "data.path", "required for idx/manifest sources")
    _check(d.num_classes >= 1, "data.num_classes", "must be positive")
    _check(d.per_class >= 1 and d.test_per_class >= 1, "data.per_class", "must be positive")
    _check(d.difficulty >= 0, "data.difficulty", "must be non-negative")
    _check(sp.scheme in ("equal", "larger_first"), "split.scheme", "must be equal or larger_first")
    _check(sp.num_tasks >= 1, "split.num_tasks", "must be positive")
    if sp.scheme == "larger_first":
        _check(sp.first_task_classes is not None and 0 < sp.first_task_classes < d.num_classes,
               "split.first_task_classes", "larger_first needs 0 < first_task_classes < num_classes")
    validate_capacity(di.capacity)
    _check(di.epochs >= 1, "distill.epochs", "must be at least 1")
    _check(di.lr > 0, "distill.lr", "must be positive")
    _check(di.temperature > 0, "distill.temperature", "must be positive")
    return cfg


def validate_capacity(capacity: float) -> float:
    _check(isinstance(capacity, (int, float)) and 0.0 < capacity <= 1.0, "distill.capacity",
           f"must lie in (0, 1], got {capacity!r}")
    return float(capacity)


def from_dict(values: dict[str, Any]) -> ExperimentConfig:
    values = dict(values or {})
    preset = values.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values = _merge(PRESETS[preset], values)
    return validate(_build(ExperimentConfig, values, ""))


def preset(name: str, **overrides: Any) -> ExperimentConfig:
    return from_dict(_merge({"preset": name}, overrides))


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        values = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path}: not valid YAML/JSON ({exc})") from exc
    return from_dict(values or {})


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    return from_dict(_merge(cfg.to_dict(), overrides))


def dotted_override(key: str, value: Any) -> dict[str, Any]:
    """'train.lambda_pfr', 0.01 -> {'train': {'lambda_pfr': 0.01}}."""
    out: dict[str, Any] = {}
    node = out
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out
