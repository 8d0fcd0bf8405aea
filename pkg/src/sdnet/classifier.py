"""The inference-stage CNN: residual backbone + 512-unit ReLU layer + K-way softmax head."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from ._train import EarlyStopping, as_tensor, minibatches, seed_everything
from ._util import SCHEMA_VERSION, dump_json
from .errors import (
    CheckpointMissing,
    DivergedTraining,
    EmptyDataset,
    LabelArityMismatch,
    NonFiniteInput,
    ShapeMismatch,
)
from .preprocess import IMAGENET_MEAN, IMAGENET_STD

log = logging.getLogger(__name__)

# index -> label name; fixed so checkpoints and fusion agree bit for bit
CLASS_NAMES = {2: ("N", "P"), 4: ("N-", "N+", "P-", "P+")}
AUGMENTATIONS = ("hflip", "rotate", "brightness_contrast")


def softmax(w) -> np.ndarray:
    """exp(w_j) / sum_k exp(w_k) over the last axis, with max subtraction."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NonFiniteInput("softmax needs finite logits")
    z = np.exp(w - w.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


@dataclass
class ClassifierConfig:
    num_classes: int = 4
    backbone: str = "resnet50"
    weights: str = "imagenet"  # "imagenet", "none", or a path to a backbone state dict
    hidden_units: int = 512
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_epochs: int = 100
    patience: int = 10
    monitor: str = "val_loss"  # or "val_accuracy"
    lr_decay: float = 0.1
    lr_plateau_patience: int = 5
    augment: tuple[str, ...] = AUGMENTATIONS
    rotation_deg: float = 5.0
    jitter: float = 0.10
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    seed: int = 0

    def __post_init__(self):
        if self.num_classes not in CLASS_NAMES:
            raise ValueError(f"num_classes must be 2 or 4, got {self.num_classes}")
        self.augment = tuple(self.augment)
        unknown = set(self.augment) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentation(s): {sorted(unknown)}")
        if self.monitor not in ("val_loss", "val_accuracy"):
            raise ValueError(f"monitor must be val_loss or val_accuracy, got {self.monitor!r}")
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = list(self.augment)
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        return d


def _resnet(name: str, weights: str) -> nn.Module:
    if not hasattr(torchvision.models, name):
        raise ValueError(f"unknown backbone {name!r}")
    ctor = getattr(torchvision.models, name)
    if weights == "imagenet":
        try:
            return ctor(weights="DEFAULT")
        except Exception as exc:  # offline machines land here
            raise CheckpointMissing(
                f"could not fetch ImageNet weights for {name} ({exc}); "
                "pass weights='none' or a local state-dict path"
            ) from exc
    # zero-init residual branches keep a randomly initialised deep net finite in eval mode
    model = ctor(weights=None, zero_init_residual=True)
    if weights not in ("none", None, ""):
        path = Path(weights)
        if not path.is_file():
            raise CheckpointMissing(f"backbone weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        model.load_state_dict(state, strict=False)
    return model


class SDNetClassifier(nn.Module):
    """Pretrained residual backbone whose last layer is replaced by
    Linear(features, 512) -> ReLU -> Linear(512, K); outputs logits."""

    def __init__(self, num_classes: int = 4, backbone: str = "resnet50", weights: str = "imagenet", hidden_units: int = 512):
        super().__init__()
        self.num_classes = num_classes
        self.class_names = CLASS_NAMES[num_classes]
        self.backbone = _resnet(backbone, weights)
        in_features = self.backbone.fc.in_features
        self.backbone.fc = nn.Identity()
        self.head = nn.Sequential(nn.Linear(in_features, hidden_units), nn.ReLU(inplace=True), nn.Linear(hidden_units, num_classes))

    @property
    def target_layer(self) -> nn.Module:
        """Final convolutional block; the Grad-CAM target."""
        return self.backbone.layer4

    def forward(self, x):
        return self.head(self.backbone(x))


def build_classifier(cfg: ClassifierConfig) -> SDNetClassifier:
    return SDNetClassifier(cfg.num_classes, cfg.backbone, cfg.weights, cfg.hidden_units)


@dataclass
class Prediction:
    probs: np.ndarray
    logits: np.ndarray
    label: int
    name: str


def _check_input(model, x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"expected (3, H, W) or (N, 3, H, W) input, got {tuple(x.shape)}")
    return x


@torch.no_grad()
def predict_logits(model: nn.Module, images, batch_size: int = 32) -> np.ndarray:
    x = _check_input(model, as_tensor(images))
    model.eval()
    out = [model(x[i : i + batch_size]).double() for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy() if out else np.zeros((0, model.num_classes))


def predict(model: nn.Module, image) -> Prediction:
    """Softmax probabilities and argmax label for one standardized image.

    Ties in the argmax go to the lowest class index.
    """
    if model is None:
        raise CheckpointMissing("no classifier loaded")
    logits = predict_logits(model, image)[0]
    probs = softmax(logits)
    # argmax over logits: identical to argmax(softmax) without exp underflow ties
    label = int(np.argmax(logits))
    return Prediction(probs, logits, label, model.class_names[label])


def predict_batch(model: nn.Module, images, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Return (probs, labels) for a stack of standardized images."""
    logits = predict_logits(model, images, batch_size)
    return softmax(logits), np.argmax(logits, axis=1) if len(logits) else np.zeros(0, int)


# -- augmentation ---------------------------------------------------------------------


def augment(x: torch.Tensor, cfg: ClassifierConfig, generator: torch.Generator) -> torch.Tensor:
    """Random flip / small rotation / brightness-contrast jitter on a normalized batch.

    Shapes are preserved; labels are untouched by construction.
    """
    if not cfg.augment or len(x) == 0:
        return x
    n = x.shape[0]
    mean = torch.tensor(cfg.mean, dtype=x.dtype).view(1, -1, 1, 1)
    std = torch.tensor(cfg.std, dtype=x.dtype).view(1, -1, 1, 1)
    x = x * std + mean
    if "hflip" in cfg.augment:
        flip = torch.rand(n, generator=generator) < 0.5
        x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
    if "rotate" in cfg.augment and cfg.rotation_deg > 0:
        angle = (torch.rand(n, generator=generator) * 2 - 1) * math.radians(cfg.rotation_deg)
        cos, sin = torch.cos(angle), torch.sin(angle)
        theta = torch.zeros(n, 2, 3, dtype=x.dtype)
        theta[:, 0, 0], theta[:, 0, 1] = cos, -sin
        theta[:, 1, 0], theta[:, 1, 1] = sin, cos
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    if "brightness_contrast" in cfg.augment and cfg.jitter > 0:
        b = 1 + (torch.rand(n, 1, 1, 1, generator=generator) * 2 - 1) * cfg.jitter
        c = 1 + (torch.rand(n, 1, 1, 1, generator=generator) * 2 - 1) * cfg.jitter
        m = x.mean(dim=(1, 2, 3), keepdim=True)
        x = ((x - m) * c + m) * b
    return (x - mean) / std


# -- training ---------------------------------------------------------------------------


def encode_labels(labels: Sequence, num_classes: int) -> torch.Tensor:
    """Map label names (or indices) to class indices, enforcing the head arity."""
    names = CLASS_NAMES[num_classes]
    out = []
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            if not 0 <= lab < num_classes:
                raise LabelArityMismatch(f"label index {lab} invalid for K={num_classes}")
            out.append(int(lab))
        elif lab in names:
            out.append(names.index(lab))
        else:
            raise LabelArityMismatch(f"label {lab!r} is not one of {names} (K={num_classes})")
    return torch.tensor(out, dtype=torch.long)


def _evaluate(model, x, y, batch_size):
    model.eval()
    total, correct = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            logits = model(x[i : i + batch_size])
            total += F.cross_entropy(logits, y[i : i + batch_size], reduction="sum").item()
            correct += (logits.argmax(1) == y[i : i + batch_size]).sum().item()
    return total / len(x), correct / len(x)


def train_classifier(train_x, train_y, val_x, val_y, cfg: ClassifierConfig, model: nn.Module | None = None):
    """Fine-tune every layer with SGD; early stopping on the validation monitor.

    Returns (model restored to its best-validation state, per-epoch history).
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise EmptyDataset("training and validation sets must be nonempty")
    y_tr = encode_labels(train_y, cfg.num_classes)
    y_va = encode_labels(val_y, cfg.num_classes)
    present = set(y_tr.tolist())
    if len(present) != cfg.num_classes:
        raise LabelArityMismatch(
            f"K={cfg.num_classes} but the training labels cover {len(present)} class(es)"
        )
    x_tr, x_va = as_tensor(train_x), as_tensor(val_x)
    if len(x_tr) != len(y_tr) or len(x_va) != len(y_va):
        raise ShapeMismatch("images and labels differ in length")

    gen = seed_everything(cfg.seed)
    if model is None:
        model = build_classifier(cfg)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=cfg.lr_decay, patience=cfg.lr_plateau_patience)
    mode = "min" if cfg.monitor == "val_loss" else "max"
    stopper = EarlyStopping(cfg.patience, mode)
    history = []

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        run_loss, run_correct, seen = 0.0, 0, 0
        for idx in minibatches(len(x_tr), cfg.batch_size, gen):
            xb = augment(x_tr[idx], cfg, gen)
            yb = y_tr[idx]
            logits = model(xb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise DivergedTraining(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            run_loss += loss.item() * len(idx)
            run_correct += (logits.argmax(1) == yb).sum().item()
            seen += len(idx)
        val_loss, val_acc = _evaluate(model, x_va, y_va, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise DivergedTraining(f"non-finite validation loss at epoch {epoch}")
        sched.step(val_loss)
        history.append({
            "epoch": epoch,
            "train_loss": run_loss / seen,
            "train_accuracy": run_correct / seen,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "lr": opt.param_groups[0]["lr"],
        })
        log.info("clf epoch %d train %.4f val %.4f acc %.3f", epoch, run_loss / seen, val_loss, val_acc)
        if stopper.step(val_loss if mode == "min" else val_acc, epoch, model.state_dict()):
            break

    model.load_state_dict(stopper.best_state)
    model.eval()
    for h in history:
        h["best"] = h["epoch"] == stopper.best_epoch
    return model, history


# -- checkpoints ------------------------------------------------------------------------


def save_classifier(model: SDNetClassifier, cfg: ClassifierConfig, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    (directory / "weights").mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "weights" / "model.pt")
    meta = {
        "schema_version": SCHEMA_VERSION,
        "num_classes": model.num_classes,
        "class_names": list(model.class_names),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
    }
    meta.update(extra or {})
    dump_json(meta, directory / "meta.json")


def load_classifier(directory) -> tuple[SDNetClassifier, ClassifierConfig]:
    directory = Path(directory)
    weights = directory / "weights" / "model.pt"
    if not weights.is_file() or not (directory / "meta.json").is_file():
        raise CheckpointMissing(f"no classifier checkpoint in {directory}")
    meta = json.loads((directory / "meta.json").read_text())
    cfg = ClassifierConfig(**{k: v for k, v in meta["config"].items() if k in ClassifierConfig.__dataclass_fields__})
    model = SDNetClassifier(cfg.num_classes, cfg.backbone, "none", cfg.hidden_units)
    model.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    if list(model.class_names) != meta["class_names"]:
        raise CheckpointMissing(f"class order in {directory} does not match {model.class_names}")
    return model.eval(), cfg

