"""Run configuration: one YAML/JSON file with per-stage sections, env and flag overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from ._util import sha256_of
from .cit import CitLossConfig, CitSchedule
from .classifier import AUGMENTATIONS, ClassifierConfig
from .errors import ConfigError
from .fusion import InferenceSettings
from .preprocess import IMAGENET_MEAN, IMAGENET_STD

ENV_PREFIX = "SDNET_"
VARIANTS = ("no_seg", "with_seg", "cit_only", "sdnet")


@dataclass
class PathsConfig:
    manifest: str = ""
    image_root: str = ""  # defaults to the manifest's directory
    workdir: str = ""


@dataclass
class PreprocessConfig:
    backend: str = "full-image"  # or "torchscript:<path>"
    backend_input_side: int = 256
    threshold: float = 0.5
    margin: float = 0.025
    margin_relative_to: str = "box"
    side: int = 224
    mean: list = field(default_factory=lambda: list(IMAGENET_MEAN))
    std: list = field(default_factory=lambda: list(IMAGENET_STD))


@dataclass
class CitConfig:
    lam: float = 0.1
    perceptual_weight: float = 0.006
    extractor: str = "vgg16"
    extractor_layer: str = "relu2_2"
    extractor_weights: str = "imagenet"
    ce_mode: str = "mask"
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    clf_lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    n_blocks: int = 5
    features: int = 64
    input_skip: bool = True
    clf_sees_original: bool = False

    def loss_config(self) -> CitLossConfig:
        return CitLossConfig(
            self.perceptual_weight, self.lam, self.extractor, self.extractor_layer, self.extractor_weights, self.ce_mode
        )

    def schedule(self, seed: int) -> CitSchedule:
        return CitSchedule(
            self.batch_size, self.lr, self.momentum, self.clf_lr, self.max_epochs, self.patience,
            self.n_blocks, self.features, self.input_skip, self.clf_sees_original, seed,
        )


@dataclass
class ClassifierSection:
    backbone: str = "resnet50"
    weights: str = "imagenet"
    hidden_units: int = 512
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_epochs: int = 100
    patience: int = 10
    monitor: str = "val_loss"
    lr_decay: float = 0.1
    lr_plateau_patience: int = 5
    augment: list = field(default_factory=lambda: list(AUGMENTATIONS))
    rotation_deg: float = 5.0
    jitter: float = 0.10


@dataclass
class PlanConfig:
    repeats: int = 5
    folds: int = 5
    seed: int = 0
    seeds: list | None = None
    val_fraction: float = 0.10


@dataclass
class EvaluationConfig:
    variant: str = "sdnet"
    exclude_normal_pcr: bool = False
    std_over: str = "runs"  # or "repeats": std of the per-repeat means


@dataclass
class ExplainConfig:
    alpha: float = 0.4
    colormap: str = "jet"
    ids: list = field(default_factory=list)
    repeat: int = 0
    fold: int = 0


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    cit: CitConfig = field(default_factory=CitConfig)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    plan: PlanConfig = field(default_factory=PlanConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return sha256_of(self.to_dict())

    def classifier_config(self, num_classes: int, seed: int) -> ClassifierConfig:
        d = asdict(self.classifier)
        return ClassifierConfig(
            num_classes=num_classes, seed=seed, mean=tuple(self.preprocess.mean), std=tuple(self.preprocess.std), **d
        )

    def inference_settings(self, crop: bool = True) -> InferenceSettings:
        p = self.preprocess
        return InferenceSettings(p.side, p.margin, p.margin_relative_to, p.threshold, tuple(p.mean), tuple(p.std), crop)

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    @property
    def image_root(self) -> Path:
        if self.paths.image_root:
            return Path(self.paths.image_root)
        return Path(self.paths.manifest).parent

    def validate(self, require_paths: bool = True) -> "RunConfig":
        if require_paths:
            for name in ("manifest", "workdir"):
                if not getattr(self.paths, name):
                    raise ConfigError(f"paths.{name} is required")
        if self.evaluation.variant not in VARIANTS + ("all",):
            raise ConfigError(f"variant must be one of {VARIANTS} or 'all', got {self.evaluation.variant!r}")
        if self.evaluation.std_over not in ("runs", "repeats"):
            raise ConfigError("evaluation.std_over must be 'runs' or 'repeats'")
        if self.preprocess.margin_relative_to not in ("box", "image"):
            raise ConfigError("preprocess.margin_relative_to must be 'box' or 'image'")
        if self.plan.folds < 2 or self.plan.repeats < 1:
            raise ConfigError("plan needs folds >= 2 and repeats >= 1")
        try:
            self.cit.loss_config()
            self.classifier_config(4, 0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _merge(obj, data: dict, where: str = ""):
    """Recursively copy `data` into dataclass `obj`, rejecting unknown keys."""
    names = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {where + key!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {where + key!r} must be a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, _coerce(current, value, where + key))
    return obj


def _coerce(current, value, name):
    if value is None or current is None:
        return value
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                return yaml.safe_load(value) is True
            return bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            return list(value) if not isinstance(value, str) else [v for v in value.split(",") if v]
        if isinstance(current, str):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc
    return value


def _env_overrides(environ) -> dict:
    """SDNET_CIT__LAM=0.2 -> {"cit": {"lam": 0.2}}; values are parsed as YAML scalars."""
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Defaults <- config file <- SDNET_* environment <- explicit overrides (CLI flags)."""
    cfg = RunConfig()
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if data is not None:
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a mapping")
            _merge(cfg, data)
    _merge(cfg, _env_overrides(os.environ if environ is None else environ))
    if overrides:
        _merge(cfg, overrides)
    return cfg
