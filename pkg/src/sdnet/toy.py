"""Synthetic separable CXR stand-ins for smoke tests and the toy end-to-end run.

Positives carry a bright blob, negatives a dark one, on a noisy lung-field background.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .dataset import MANIFEST_COLUMNS
from .preprocess import write_png

_POSITIVE_SEVERITIES = (("Mild", 1, 0), ("Moderate", 2, 2), ("Severe", 4, 3), ("NormalPcrPlus", 0, 0))


def blob_image(label: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    img = np.full((size, size), 0.45, np.float32)
    # two darker "lung" ellipses so the frame is not uniform
    for cx in (0.3 * size, 0.7 * size):
        inside = ((xx - cx) / (0.17 * size)) ** 2 + ((yy - 0.5 * size) / (0.33 * size)) ** 2 <= 1
        img[inside] = 0.35
    r = rng.uniform(0.09, 0.14) * size
    cx = rng.uniform(0.25, 0.75) * size
    cy = rng.uniform(0.25, 0.75) * size
    disc = ((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r
    img[disc] = 0.85 if label == "P" else 0.05
    img += rng.normal(0, 0.04, img.shape).astype(np.float32)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_toy_images(n_per_class: int = 20, size: int = 64, seed: int = 0):
    """Return (ids, labels, images) with positives first."""
    rng = np.random.default_rng(seed)
    ids, labels, images = [], [], []
    for label in ("P", "N"):
        for i in range(n_per_class):
            ids.append(f"{label.lower()}{i:03d}")
            labels.append(label)
            images.append(blob_image(label, rng, size))
    return ids, labels, images


def write_toy_dataset(directory, n_per_class: int = 20, size: int = 64, seed: int = 0) -> Path:
    """Write PNGs plus manifest.csv under `directory`; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    ids, labels, images = make_toy_images(n_per_class, size, seed)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for k, (image_id, label, img) in enumerate(zip(ids, labels, images)):
            rel = f"images/{image_id}.png"
            write_png(img, directory / rel)
            row = {c: "" for c in MANIFEST_COLUMNS}
            row.update(id=image_id, path=rel, label=label, view="PA")
            if label == "P":
                sev, left, right = _POSITIVE_SEVERITIES[k % len(_POSITIVE_SEVERITIES)]
                row.update(severity=sev, rale_left=left, rale_right=right, pcr_positive="true")
            writer.writerow(row)
    return manifest


# Desk-scale settings for the synthetic set: small inputs, random init, short schedules.
TOY_CONFIG = {
    "preprocess": {"side": 32},
    "cit": {"extractor_weights": "none", "max_epochs": 20, "patience": 20, "clf_lr": 0.01},
    "classifier": {"weights": "none", "lr": 0.01, "max_epochs": 60, "patience": 60},
    "plan": {"repeats": 1, "folds": 2},
}
