"""Class-inherent transformation (CiT) generators.

Two shape-preserving residual generators, G_P and G_N, are trained against an
internal ResNet-18 two-class classifier. Generator k minimises

    MSE(G_k(x), x) + 0.006 * perceptual MSE + lambda * CE(classifier(G_k(x)), k)

where the cross-entropy term only covers samples whose true label is k (default).
After training, every image x yields x+ = G_P(x) and x- = G_N(x), turning the
two classes {P, N} into four {P+, P-, N+, N-}.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from ._train import EarlyStopping, as_tensor, minibatches, seed_everything
from ._util import SCHEMA_VERSION, dump_json
from .errors import CheckpointMissing, DivergedTraining, EmptyDataset, NonFiniteLoss, ShapeMismatch

log = logging.getLogger(__name__)

PERCEPTUAL_WEIGHT = 0.006
BINARY = ("N", "P")  # internal classifier index order
VGG16_LAYERS = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22}


# -- generators -------------------------------------------------------------------------


class ResidualBlock(nn.Module):
    def __init__(self, features: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(features, features, 3, padding=1),
            nn.BatchNorm2d(features),
            nn.PReLU(),
            nn.Conv2d(features, features, 3, padding=1),
            nn.BatchNorm2d(features),
        )

    def forward(self, x):
        return x + self.body(x)


class GeneratorNet(nn.Module):
    """Lift to `features` maps, run `n_blocks` residual blocks, project back to 3 channels.

    With `input_skip` the projection is added to the input image, so the network
    learns a residual transformation of x.
    """

    def __init__(self, class_tag: str, n_blocks: int = 5, features: int = 64, channels: int = 3, input_skip: bool = True):
        super().__init__()
        if class_tag not in BINARY:
            raise ValueError(f"class_tag must be P or N, got {class_tag!r}")
        self.class_tag = class_tag
        self.channels = channels
        self.input_skip = input_skip
        self.head = nn.Sequential(nn.Conv2d(channels, features, 3, padding=1), nn.PReLU())
        self.blocks = nn.Sequential(*[ResidualBlock(features) for _ in range(n_blocks)])
        self.tail = nn.Conv2d(features, channels, 3, padding=1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"generator expects (N, {self.channels}, H, W), got {tuple(x.shape)}")
        out = self.tail(self.blocks(self.head(x)))
        return x + out if self.input_skip else out


def generator_forward(gen: GeneratorNet, image) -> np.ndarray:
    """Transform one standardized (3, H, W) image (or a batch) in evaluation mode."""
    x = as_tensor(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    gen.eval()
    with torch.no_grad():
        y = gen(x)
    if not torch.isfinite(y).all():
        raise NonFiniteLoss("generator produced non-finite pixels")
    y = y.numpy()
    return y[0] if single else y


# -- loss ----------------------------------------------------------------------------------


@dataclass
class CitLossConfig:
    perceptual_weight: float = PERCEPTUAL_WEIGHT
    lam: float = 0.1
    extractor: str = "vgg16"  # "vgg16", "resnet18" or "identity"
    extractor_layer: str = "relu2_2"
    extractor_weights: str = "imagenet"  # "imagenet", "none" (fixed random init) or a path
    ce_mode: str = "mask"  # "mask": only samples with label k; "relabel": every sample

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.ce_mode not in ("mask", "relabel"):
            raise ValueError(f"ce_mode must be mask or relabel, got {self.ce_mode!r}")

    @property
    def extractor_identity(self) -> str:
        if self.extractor == "identity":
            return "identity"
        return f"{self.extractor}:{self.extractor_layer}:{self.extractor_weights}"


def build_extractor(cfg: CitLossConfig) -> nn.Module:
    """Frozen feature extractor for the perceptual term."""
    if cfg.extractor == "identity":
        return nn.Identity()
    weights = cfg.extractor_weights
    with torch.random.fork_rng():
        torch.manual_seed(0)  # "none" means a fixed, reproducible random projection
        if cfg.extractor == "vgg16":
            if cfg.extractor_layer not in VGG16_LAYERS:
                raise ValueError(f"unknown vgg16 layer {cfg.extractor_layer!r}")
            net = _load_tv("vgg16", weights)
            ext = net.features[: VGG16_LAYERS[cfg.extractor_layer] + 1]
        elif cfg.extractor == "resnet18":
            net = _load_tv("resnet18", weights)
            stages = ["layer1", "layer2", "layer3", "layer4"]
            if cfg.extractor_layer not in stages:
                raise ValueError(f"unknown resnet18 layer {cfg.extractor_layer!r}")
            keep = stages[: stages.index(cfg.extractor_layer) + 1]
            ext = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, *[getattr(net, s) for s in keep])
        else:
            raise ValueError(f"unknown feature extractor {cfg.extractor!r}")
    ext.eval()
    for p in ext.parameters():
        p.requires_grad_(False)
    return ext


def _load_tv(name, weights):
    ctor = getattr(torchvision.models, name)
    if weights == "imagenet":
        try:
            return ctor(weights="DEFAULT")
        except Exception as exc:
            raise CheckpointMissing(
                f"could not fetch ImageNet weights for the {name} feature extractor ({exc}); "
                "set extractor_weights to 'none' or a local path"
            ) from exc
    net = ctor(weights=None)
    if weights not in ("none", None, ""):
        if not Path(weights).is_file():
            raise CheckpointMissing(f"extractor weights not found: {weights}")
        net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    return net


@dataclass
class CitLoss:
    total: torch.Tensor
    mse: torch.Tensor
    perceptual: torch.Tensor
    ce: torch.Tensor

    def item_dict(self) -> dict:
        return {"total": self.total.item(), "mse": self.mse.item(), "perceptual": self.perceptual.item(), "ce": self.ce.item()}


def _tag_index(k) -> int:
    if isinstance(k, str):
        return BINARY.index(k)
    return int(k)


def cit_loss(gen_out, target, logits, k, cfg: CitLossConfig, labels=None, extractor: nn.Module | None = None) -> CitLoss:
    """Composite generator loss for class tag `k` ("P"/"N" or 1/0).

    `logits` are the internal classifier's raw outputs on `gen_out` over (N, P).
    With ce_mode="mask", `labels` (true class indices) select the samples whose
    label equals k; a batch with none of them contributes a zero CE term.
    """
    if gen_out.shape != target.shape:
        raise ShapeMismatch(f"output {tuple(gen_out.shape)} vs target {tuple(target.shape)}")
    if extractor is None:
        extractor = build_extractor(cfg)
    k = _tag_index(k)
    mse = F.mse_loss(gen_out, target)
    with torch.no_grad():
        target_features = extractor(target)
    perceptual = F.mse_loss(extractor(gen_out), target_features)

    ce = gen_out.new_zeros(())
    if logits is not None:
        if cfg.ce_mode == "mask":
            if labels is None:
                raise ValueError("ce_mode='mask' needs the true labels")
            labels = torch.as_tensor(labels)
            mask = labels == k
            if mask.any():
                sel = logits[mask]
                ce = F.cross_entropy(sel, torch.full((sel.shape[0],), k, dtype=torch.long))
        else:
            ce = F.cross_entropy(logits, torch.full((logits.shape[0],), k, dtype=torch.long))

    total = mse + cfg.perceptual_weight * perceptual
    if cfg.lam:
        total = total + cfg.lam * ce
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite CiT loss (mse={mse.item()}, perceptual={perceptual.item()}, ce={ce.item()})")
    return CitLoss(total, mse, perceptual, ce)


# -- training -------------------------------------------------------------------------------


@dataclass
class CitSchedule:
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
    seed: int = 0


def internal_classifier() -> nn.Module:
    return torchvision.models.resnet18(weights=None, num_classes=2, zero_init_residual=True)


@dataclass
class GeneratorPair:
    gen_p: GeneratorNet
    gen_n: GeneratorNet
    classifier: nn.Module
    loss_cfg: CitLossConfig = field(default_factory=CitLossConfig)
    schedule: CitSchedule = field(default_factory=CitSchedule)
    meta: dict = field(default_factory=dict)

    def eval(self) -> "GeneratorPair":
        for m in (self.gen_p, self.gen_n, self.classifier):
            m.eval()
        return self

    @torch.no_grad()
    def transform(self, images, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Return (G_P(x), G_N(x)) for a stack of standardized images."""
        self.eval()
        x = as_tensor(images)
        plus, minus = [], []
        for i in range(0, len(x), batch_size):
            xb = x[i : i + batch_size]
            plus.append(self.gen_p(xb))
            minus.append(self.gen_n(xb))
        if not plus:
            return np.zeros((0, *x.shape[1:]), np.float32), np.zeros((0, *x.shape[1:]), np.float32)
        return torch.cat(plus).numpy(), torch.cat(minus).numpy()

    @torch.no_grad()
    def classify(self, images, batch_size: int = 32) -> np.ndarray:
        """Transformation-only decision per image: P when the internal classifier is at least
        as confident that G_P(x) is P as it is that G_N(x) is N."""
        plus, minus = self.transform(images, batch_size)
        if len(plus) == 0:
            return np.zeros(0, dtype="<U1")
        p_pos = torch.softmax(self.classifier(torch.from_numpy(plus)).double(), 1)[:, 1]
        p_neg = torch.softmax(self.classifier(torch.from_numpy(minus)).double(), 1)[:, 0]
        return np.where((p_neg > p_pos).numpy(), "N", "P")

    def save(self, directory) -> None:
        directory = Path(directory)
        for sub, module in (("gen_P", self.gen_p), ("gen_N", self.gen_n), ("internal_clf", self.classifier)):
            (directory / sub).mkdir(parents=True, exist_ok=True)
            torch.save(module.state_dict(), directory / sub / "weights.pt")
        meta = {
            "schema_version": SCHEMA_VERSION,
            "lambda": self.loss_cfg.lam,
            "loss": asdict(self.loss_cfg),
            "perceptual": {"weight": self.loss_cfg.perceptual_weight, "extractor": self.loss_cfg.extractor_identity},
            "schedule": asdict(self.schedule),
            "seed": self.schedule.seed,
            "generator": {
                "n_blocks": len(self.gen_p.blocks),
                "features": self.gen_p.head[0].out_channels,
                "input_skip": self.gen_p.input_skip,
            },
        }
        meta.update(self.meta)
        dump_json(meta, directory / "meta.json")

    @classmethod
    def load(cls, directory) -> "GeneratorPair":
        directory = Path(directory)
        needed = [directory / "meta.json"] + [directory / s / "weights.pt" for s in ("gen_P", "gen_N", "internal_clf")]
        missing = [str(p) for p in needed if not p.is_file()]
        if missing:
            raise CheckpointMissing(f"incomplete CiT checkpoint: missing {', '.join(missing)}")
        meta = json.loads((directory / "meta.json").read_text())
        loss_cfg = CitLossConfig(**meta["loss"])
        schedule = CitSchedule(**meta["schedule"])
        arch = meta["generator"]
        gens = {}
        for tag in BINARY:
            g = GeneratorNet(tag, arch["n_blocks"], arch["features"], input_skip=arch["input_skip"])
            g.load_state_dict(torch.load(directory / f"gen_{tag}" / "weights.pt", map_location="cpu", weights_only=True))
            gens[tag] = g
        clf = internal_classifier()
        clf.load_state_dict(torch.load(directory / "internal_clf" / "weights.pt", map_location="cpu", weights_only=True))
        extra = {k: v for k, v in meta.items() if k not in ("schema_version", "lambda", "loss", "perceptual", "schedule", "seed", "generator")}
        return cls(gens["P"], gens["N"], clf, loss_cfg, schedule, extra).eval()


def _binary_labels(labels) -> torch.Tensor:
    return torch.tensor([_tag_index(l) for l in labels], dtype=torch.long)


def _mean_components(rows):
    n = sum(w for w, _ in rows)
    return {k: sum(w * d[k] for w, d in rows) / n for k in rows[0][1]}


def train_cit(train_x, train_y, val_x, val_y, loss_cfg: CitLossConfig | None = None, schedule: CitSchedule | None = None):
    """Jointly train G_P, G_N and the internal classifier.

    Each batch takes one generator step (both generators, each on its own loss) and
    then one classifier step on the detached generator outputs with the true labels.
    Early stopping monitors the summed validation loss of the two generators; the
    best checkpoint is returned with the per-epoch history.
    """
    loss_cfg = loss_cfg or CitLossConfig()
    schedule = schedule or CitSchedule()
    if len(train_x) == 0 or len(val_x) == 0:
        raise EmptyDataset("CiT training needs nonempty training and validation sets")
    x_tr, x_va = as_tensor(train_x), as_tensor(val_x)
    y_tr, y_va = _binary_labels(train_y), _binary_labels(val_y)

    gen = seed_everything(schedule.seed)
    gens = {t: GeneratorNet(t, schedule.n_blocks, schedule.features, input_skip=schedule.input_skip) for t in ("P", "N")}
    clf = internal_classifier()
    extractor = build_extractor(loss_cfg)
    opt_g = torch.optim.SGD(
        list(gens["P"].parameters()) + list(gens["N"].parameters()), lr=schedule.lr, momentum=schedule.momentum
    )
    opt_c = torch.optim.SGD(clf.parameters(), lr=schedule.clf_lr, momentum=schedule.momentum)
    stopper = EarlyStopping(schedule.patience, "min")
    history = {"P": [], "N": [], "classifier": [], "val_total": []}

    def modules_state():
        return {t: gens[t].state_dict() for t in gens} | {"clf": clf.state_dict()}

    for epoch in range(1, schedule.max_epochs + 1):
        rows = {"P": [], "N": []}
        clf_rows = []
        for idx in minibatches(len(x_tr), schedule.batch_size, gen):
            xb, yb = x_tr[idx], y_tr[idx]
            # generator step against the current classifier
            for g in gens.values():
                g.train()
            clf.eval()
            outs, total = {}, 0.0
            for tag, g in gens.items():
                out = g(xb)
                loss = cit_loss(out, xb, clf(out), tag, loss_cfg, yb, extractor)
                rows[tag].append((len(idx), loss.item_dict()))
                outs[tag] = out.detach()
                total = total + loss.total
            opt_g.zero_grad()
            total.backward()
            opt_g.step()

            # classifier step on the transformed images with their true labels
            clf.train()
            cx = torch.cat([outs["P"], outs["N"]] + ([xb] if schedule.clf_sees_original else []))
            cy = y_tr[idx].repeat(len(cx) // len(idx))
            c_loss = F.cross_entropy(clf(cx), cy)
            if not torch.isfinite(c_loss):
                raise DivergedTraining(f"internal classifier loss diverged at epoch {epoch}")
            opt_c.zero_grad()
            c_loss.backward()
            opt_c.step()
            clf_rows.append((len(cx), {"loss": c_loss.item()}))

        for tag in ("P", "N"):
            history[tag].append({"epoch": epoch, **_mean_components(rows[tag])})
        history["classifier"].append({"epoch": epoch, **_mean_components(clf_rows)})

        val_total = _validation_total(gens, clf, x_va, y_va, loss_cfg, extractor, schedule.batch_size)
        if not math.isfinite(val_total):
            raise DivergedTraining(f"non-finite CiT validation loss at epoch {epoch}")
        history["val_total"].append(val_total)
        log.info(
            "cit epoch %d train P %.4f N %.4f val %.4f",
            epoch, history["P"][-1]["total"], history["N"][-1]["total"], val_total,
        )
        if stopper.step(val_total, epoch, modules_state()):
            break

    best = stopper.best_state
    for tag in gens:
        gens[tag].load_state_dict(best[tag])
    clf.load_state_dict(best["clf"])
    history["best_epoch"] = stopper.best_epoch
    pair = GeneratorPair(gens["P"], gens["N"], clf, loss_cfg, schedule).eval()
    return pair, history


def _validation_total(gens, clf, x, y, cfg, extractor, batch_size) -> float:
    for m in (*gens.values(), clf):
        m.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb, yb = x[i : i + batch_size], y[i : i + batch_size]
            for tag, g in gens.items():
                out = g(xb)
                total += cit_loss(out, xb, clf(out), tag, cfg, yb, extractor).total.item() * len(xb)
    return total / len(x)


# -- dataset expansion ------------------------------------------------------------------------

LABEL4 = {("P", "plus"): "P+", ("P", "minus"): "P-", ("N", "plus"): "N+", ("N", "minus"): "N-"}


@dataclass
class TransformedPair:
    source_id: str
    x_plus: np.ndarray
    x_minus: np.ndarray
    y_plus: str
    y_minus: str


def expand_dataset(records, images: Mapping[str, np.ndarray], gens: GeneratorPair | None, batch_size: int = 32):
    """Run every source image through both generators.

    `records` is a manifest or any iterable of objects with `id` and `label`;
    `images` maps id -> standardized (3, H, W) array. Returns one TransformedPair
    per source, in input order.
    """
    if gens is None:
        raise CheckpointMissing("expansion needs trained generators")
    records = list(records)
    if not records:
        return []
    x = np.stack([images[r.id] for r in records])
    plus, minus = gens.transform(x, batch_size)
    return [
        TransformedPair(r.id, plus[i], minus[i], LABEL4[(r.label, "plus")], LABEL4[(r.label, "minus")])
        for i, r in enumerate(records)
    ]


def expanded_arrays(pairs) -> tuple[np.ndarray, list[str], list[str]]:
    """Flatten pairs into (images, label4 names, source ids), plus image before minus."""
    if not pairs:
        return np.zeros((0, 3, 1, 1), np.float32), [], []
    xs, ys, ids = [], [], []
    for p in pairs:
        xs += [p.x_plus, p.x_minus]
        ys += [p.y_plus, p.y_minus]
        ids += [p.source_id, p.source_id]
    return np.stack(xs), ys, ids


def write_expanded(pairs, directory) -> Path:
    """Store transformed images as .npy (they live in normalized space) plus expanded.csv."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    path = directory / "expanded.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_id", "transform", "label4", "path"])
        for p in pairs:
            for transform, arr, lab in (("plus", p.x_plus, p.y_plus), ("minus", p.x_minus, p.y_minus)):
                rel = f"images/{p.source_id}.{transform}.npy"
                np.save(directory / rel, arr)
                writer.writerow([p.source_id, transform, lab, rel])
    return path


def read_expanded(path) -> list[TransformedPair]:
    """Read back what write_expanded stored; `path` is the CSV or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "expanded.csv"
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["source_id"], {})[row["transform"]] = row
    pairs = []
    for sid, d in rows.items():
        plus, minus = d["plus"], d["minus"]
        pairs.append(
            TransformedPair(
                sid,
                np.load(path.parent / plus["path"]),
                np.load(path.parent / minus["path"]),
                plus["label4"],
                minus["label4"],
            )
        )
    return pairs
