"""Grad-CAM decision and counterfactual heatmaps, with overlay rendering."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._util import dump_json
from .classifier import CLASS_NAMES
from .errors import InvalidClass, ShapeMismatch
from .preprocess import to_unit_float, write_png


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (height, width) in [0, 1]
    target_class: int
    kind: str = "decision"  # or "counterfactual"

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def default_target_layer(model: nn.Module) -> nn.Module:
    """The model's declared `target_layer`, else its last Conv2d."""
    layer = getattr(model, "target_layer", None)
    if isinstance(layer, nn.Module):
        return layer
    convs = [m for m in model.modules() if isinstance(m, nn.Conv2d)]
    if not convs:
        raise ValueError("model has no convolutional layer to explain")
    return convs[-1]


def _as_batch(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeMismatch(f"expected one (C, H, W) image, got shape {tuple(x.shape)}")
    return x


def gradcam(model: nn.Module, image, target_class: int, target_layer: nn.Module | None = None,
            kind: str = "decision") -> Heatmap:
    x = _as_batch(image)
    layer = target_layer or default_target_layer(model)
    model.eval()
    store = {}

    def hook(_module, _inp, out):
        out.retain_grad()
        store["act"] = out

    handle = layer.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            logits = model(x)
            k = logits.shape[1]
            if not isinstance(target_class, (int, np.integer)) or not 0 <= target_class < k:
                raise InvalidClass(f"target class {target_class!r} not in [0, {k})")
            model.zero_grad(set_to_none=True)
            logits[0, int(target_class)].backward()
    finally:
        handle.remove()

    act = store["act"].detach()
    grad = store["act"].grad
    if grad is None:  # target score does not depend on the layer
        grad = torch.zeros_like(act)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    cam = cam.double().numpy()
    cam = np.maximum(cam, 0.0)  # interpolation cannot go negative, but keep the contract explicit
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        cam = (cam - lo) / (hi - lo)
    else:
        cam = np.zeros_like(cam)
    return Heatmap(cam, int(target_class), kind)


def opposite_target(probs, predicted: int) -> int:
    """Counterfactual class: the other label for K=2; for K=4 the likelier class of the other polarity."""
    probs = np.asarray(probs)
    k = probs.shape[0]
    if k == 2:
        return 1 - predicted
    names = CLASS_NAMES[k]
    polarity = names[predicted][0]
    candidates = [i for i, n in enumerate(names) if n[0] != polarity]
    return max(candidates, key=lambda i: (probs[i], -i))


def counterfactual_pair(model: nn.Module, image, target_layer: nn.Module | None = None) -> tuple[Heatmap, Heatmap]:
    x = _as_batch(image)
    model.eval()
    with torch.no_grad():
        probs = torch.softmax(model(x), dim=1)[0].double().numpy()
    predicted = int(np.argmax(probs))
    other = opposite_target(probs, predicted)
    return (
        gradcam(model, x, predicted, target_layer, "decision"),
        gradcam(model, x, other, target_layer, "counterfactual"),
    )


def _gray(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3:  # (C, H, W) or (H, W, C) -> luminance by channel mean
        img = img.mean(axis=0) if img.shape[0] in (1, 3) else img.mean(axis=2)
    if np.issubdtype(img.dtype, np.integer):
        return to_unit_float(img).astype(np.float64)
    return np.clip(img.astype(np.float64), 0.0, 1.0)  # float images are taken to be in [0, 1]


def overlay(image, heatmap: Heatmap | np.ndarray, colormap: str = "jet", alpha: float = 0.4) -> np.ndarray:
    """Blend a colour-mapped heatmap over the grayscale image. Returns float RGB in [0, 1]."""
    from matplotlib import colormaps

    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    base = _gray(image)
    if base.shape != values.shape:
        raise ShapeMismatch(f"image {base.shape} and heatmap {values.shape} differ")
    color = colormaps[colormap](values)[..., :3]
    return (1 - alpha) * np.repeat(base[..., None], 3, axis=2) + alpha * color


def _to_uint8(rgb: np.ndarray) -> np.ndarray:
    return (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)


def save_triptych(image, decision: Heatmap, counterfactual: Heatmap, out_dir, image_id: str,
                  predicted: str, colormap: str = "jet", alpha: float = 0.4, extra: dict | None = None,
                  class_names=CLASS_NAMES[4]) -> Path:
    """Write <id>_gradcam.png (original | decision | counterfactual) and its JSON sidecar."""
    out_dir = Path(out_dir)
    base = np.repeat(_gray(image)[..., None], 3, axis=2)
    panels = [base, overlay(image, decision, colormap, alpha), overlay(image, counterfactual, colormap, alpha)]
    png = out_dir / f"{image_id}_gradcam.png"
    write_png(_to_uint8(np.concatenate(panels, axis=1)), png)
    sidecar = {
        "id": image_id,
        "predicted": predicted,
        "target_decision": class_names[decision.target_class],
        "target_counterfactual": class_names[counterfactual.target_class],
        **(extra or {}),
    }
    dump_json(sidecar, out_dir / f"{image_id}_gradcam.json")
    return png


def mask_top_fraction(image, heatmap: Heatmap, fraction: float = 0.1, fill: float = 0.0) -> np.ndarray:
    """Replace the `fraction` highest-scoring pixels (all channels) with `fill`."""
    x = np.array(image, dtype=np.float32, copy=True)
    flat = heatmap.values.ravel()
    n = max(1, int(round(fraction * flat.size)))
    idx = np.argsort(-flat, kind="stable")[:n]
    mask = np.zeros(flat.size, bool)
    mask[idx] = True
    x[..., mask.reshape(heatmap.values.shape)] = fill
    return x


def mask_random_fraction(image, rng: np.random.Generator, fraction: float = 0.1, fill: float = 0.0) -> np.ndarray:
    x = np.array(image, dtype=np.float32, copy=True)
    h, w = x.shape[-2:]
    n = max(1, int(round(fraction * h * w)))
    mask = np.zeros(h * w, bool)
    mask[rng.choice(h * w, n, replace=False)] = True
    x[..., mask.reshape(h, w)] = fill
    return x
