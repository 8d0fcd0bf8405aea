"""Segmentation-based cropping and image standardization."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ._util import SCHEMA_VERSION, dump_json, round_half_up
from .errors import BackendFailure, BoxOutOfRange, DegenerateImage, EmptyMask, ImageReadError

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LungMask:
    data: np.ndarray  # bool, shape (H, W)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Box:
    """Inclusive pixel rectangle; x indexes columns, y indexes rows."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1

    def is_valid(self, image_w: int, image_h: int) -> bool:
        return 0 <= self.x0 <= self.x1 < image_w and 0 <= self.y0 <= self.y1 < image_h

    def contains(self, other: "Box") -> bool:
        return self.x0 <= other.x0 and self.y0 <= other.y0 and self.x1 >= other.x1 and self.y1 >= other.y1

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    @classmethod
    def full(cls, image_w: int, image_h: int) -> "Box":
        return cls(0, 0, image_w - 1, image_h - 1)


# -- segmentation backends ---------------------------------------------------


class SegmentationBackend(Protocol):
    identity: str

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel lung probability with the image's (H, W), values in [0, 1]."""


class FullImageBackend:
    """Marks every pixel as lung; cropping then reduces to the full frame."""

    identity = "full-image/1"

    def predict(self, image):
        return np.ones(image.shape[:2], dtype=np.float32)


class CallableBackend:
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], identity: str):
        self.fn = fn
        self.identity = identity

    def predict(self, image):
        return self.fn(image)


class TorchModuleBackend:
    """Wraps a pretrained lung-segmentation network (e.g. a U-Net exported to TorchScript).

    The grayscale image is resized to `input_side`, run through the module, and the
    resulting map is resized back. Set `apply_sigmoid=False` when the module already
    outputs probabilities. One instance per worker.
    """

    def __init__(self, module, identity: str, input_side: int = 256, apply_sigmoid: bool = True):
        self.module = module.eval()
        self.identity = identity
        self.input_side = input_side
        self.apply_sigmoid = apply_sigmoid

    @classmethod
    def from_torchscript(cls, path, input_side: int = 256, apply_sigmoid: bool = True):
        path = Path(path)
        module = torch.jit.load(str(path), map_location="cpu")
        return cls(module, f"torchscript:{path.name}", input_side, apply_sigmoid)

    @torch.no_grad()
    def predict(self, image):
        gray = to_unit_float(image)
        if gray.ndim == 3:
            gray = gray.mean(axis=2)
        h, w = gray.shape
        x = torch.from_numpy(np.ascontiguousarray(gray, dtype=np.float32))[None, None]
        x = F.interpolate(x, size=(self.input_side, self.input_side), mode="bilinear", align_corners=False)
        out = self.module(x)
        if isinstance(out, (tuple, list)):
            out = out[0]
        if self.apply_sigmoid:
            out = torch.sigmoid(out)
        out = F.interpolate(out[:, :1], size=(h, w), mode="bilinear", align_corners=False)
        return out[0, 0].clamp(0.0, 1.0).numpy()


def make_backend(spec: str, input_side: int = 256) -> SegmentationBackend:
    """Build a backend from a config string: ``full-image`` or ``torchscript:<path>``."""
    if spec in ("full-image", "full"):
        return FullImageBackend()
    if spec.startswith("torchscript:"):
        return TorchModuleBackend.from_torchscript(spec.split(":", 1)[1], input_side=input_side)
    raise ValueError(f"unknown segmentation backend {spec!r}")


# -- geometry ------------------------------------------------------------------


def segment_lungs(image: np.ndarray, backend: SegmentationBackend, threshold: float = 0.5) -> LungMask:
    try:
        prob = np.asarray(backend.predict(image), dtype=np.float64)
    except Exception as exc:
        raise BackendFailure(f"{backend.identity} raised {type(exc).__name__}: {exc}") from exc
    if prob.shape != image.shape[:2]:
        raise BackendFailure(f"{backend.identity} returned shape {prob.shape}, expected {image.shape[:2]}")
    if not np.all(np.isfinite(prob)) or prob.min(initial=0.0) < 0.0 or prob.max(initial=0.0) > 1.0:
        raise BackendFailure(f"{backend.identity} returned values outside [0, 1]")
    return LungMask(prob >= threshold)


def bounding_box(mask: LungMask) -> Box:
    """Smallest box holding every mask pixel (all components together)."""
    rows = np.flatnonzero(mask.data.any(axis=1))
    if rows.size == 0:
        raise EmptyMask("segmentation mask has no lung pixels")
    cols = np.flatnonzero(mask.data.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def expand_and_clamp(
    box: Box, margin: float, image_w: int, image_h: int, relative_to: str = "box"
) -> Box:
    """Grow each side by round-half-up(margin * extent) pixels, clamped to the image.

    `relative_to="box"` measures the extent on the box itself, `"image"` on the image.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if relative_to == "box":
        w, h = box.width, box.height
    elif relative_to == "image":
        w, h = image_w, image_h
    else:
        raise ValueError(f"relative_to must be 'box' or 'image', got {relative_to!r}")
    m = Decimal(str(margin))
    dx = round_half_up(m * w)
    dy = round_half_up(m * h)
    return Box(
        max(0, box.x0 - dx),
        max(0, box.y0 - dy),
        min(image_w - 1, box.x1 + dx),
        min(image_h - 1, box.y1 + dy),
    )


def crop(image: np.ndarray, box: Box) -> np.ndarray:
    h, w = image.shape[:2]
    if not box.is_valid(w, h):
        raise BoxOutOfRange(f"{box} does not fit a {w}x{h} image")
    return image[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1].copy()


@dataclass
class CropResult:
    image: np.ndarray
    box: Box
    margin: float
    backend_identity: str
    empty_mask_fallback: bool

    def sidecar(self, image_id: str) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": image_id,
            "box": self.box.to_dict(),
            "margin": self.margin,
            "backend_identity": self.backend_identity,
            "empty_mask_fallback": self.empty_mask_fallback,
        }


def segment_and_crop(
    image: np.ndarray,
    backend: SegmentationBackend,
    margin: float = 0.025,
    threshold: float = 0.5,
    relative_to: str = "box",
) -> CropResult:
    """Segment, box, expand and crop one image; an empty mask falls back to the full frame."""
    h, w = image.shape[:2]
    mask = segment_lungs(image, backend, threshold)
    try:
        box = expand_and_clamp(bounding_box(mask), margin, w, h, relative_to)
        fallback = False
    except EmptyMask:
        log.warning("empty lung mask from %s; using the full image", backend.identity)
        box = Box.full(w, h)
        fallback = True
    return CropResult(crop(image, box), box, margin, backend.identity, fallback)


# -- I/O and standardization ------------------------------------------------------


def read_image(path, image_id: str | None = None) -> np.ndarray:
    """Read a PNG/JPEG as (H, W) grayscale or (H, W, 3) RGB, keeping the bit depth."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.int64).clip(0, 65535).astype(np.uint16)
            elif im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode == "LA":
                arr = np.asarray(im.convert("L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ImageReadError(image_id or str(path), str(exc)) from exc
    if arr.size == 0:
        raise ImageReadError(image_id or str(path), "image has zero area")
    return arr


def write_png(image: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format="PNG")


def save_crop(result: CropResult, out_dir, image_id: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{image_id}.png"
    write_png(result.image, png)
    dump_json(result.sidecar(image_id), out_dir / f"{image_id}.json")
    return png


def to_unit_float(image: np.ndarray) -> np.ndarray:
    """Scale integer pixel data to [0, 1]; float input is assumed to be in [0, 1] already."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    if image.dtype == np.uint16:
        return image.astype(np.float32) / 65535.0
    if image.dtype == bool:
        return image.astype(np.float32)
    if np.issubdtype(image.dtype, np.integer):
        raise DegenerateImage(f"unsupported integer pixel type {image.dtype}")
    return image.astype(np.float32)


def prepare_image(
    image: np.ndarray,
    side: int = 224,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
) -> np.ndarray:
    """Resize to side x side (bilinear), replicate gray to 3 channels, scale and normalize.

    Returns float32 of shape (3, side, side).
    """
    if image.ndim not in (2, 3) or image.shape[0] == 0 or image.shape[1] == 0:
        raise DegenerateImage(f"cannot standardize an image of shape {image.shape}")
    x = to_unit_float(image)
    if x.ndim == 2:
        x = np.repeat(x[None], 3, axis=0)
    else:
        if x.shape[2] == 1:
            x = np.repeat(x[..., 0][None], 3, axis=0)
        elif x.shape[2] >= 3:
            x = np.transpose(x[..., :3], (2, 0, 1))
        else:
            raise DegenerateImage(f"unsupported channel count {x.shape[2]}")
    if x.shape[1:] != (side, side):
        t = torch.from_numpy(np.ascontiguousarray(x))[None]
        t = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False, antialias=True)
        x = t[0].numpy()
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return ((x - m) / s).astype(np.float32)


def unnormalize(x: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Invert prepare_image's normalization; returns (3, H, W) in the [0, 1] scale."""
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return x * s + m
