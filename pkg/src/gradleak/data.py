"""Desk-scale datasets: seeded synthetic shapes and 8-bit image folders."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, IngestError
from .target_model import LabeledExample

DISC, RECTANGLE = 0, 1
IMAGE_SUFFIXES = {".png", ".bmp", ".ppm", ".tif", ".tiff", ".jpg", ".jpeg"}


def _draw(rng, label, h, w):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    background = rng.uniform(0.0, 0.35, size=3)
    # class-tinted foreground: discs lean red, rectangles lean blue
    color = rng.uniform(0.45, 1.0, size=3)
    color[0 if label == DISC else 2] = rng.uniform(0.85, 1.0)
    color[2 if label == DISC else 0] = rng.uniform(0.2, 0.5)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * (h, w)
    if label == DISC:
        r = rng.uniform(0.2, 0.32) * min(h, w)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    else:
        hh, hw = rng.uniform(0.18, 0.3, size=2) * (h, w)
        mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    img = np.where(mask[..., None], color, background)
    return img.transpose(2, 0, 1)


def make_synthetic_dataset(n, image_size=(16, 16, 3), seed=0, dtype=torch.float64) -> list[LabeledExample]:
    """Seeded colored discs (label 0) and rectangles (label 1), pixels in [0, 1]."""
    h, w, c = image_size
    if n < 1 or h < 4 or w < 4 or c != 3:
        raise ConfigError(f"cannot build a synthetic set with n={n}, size={tuple(image_size)}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    out = []
    for i, label in enumerate(labels):
        img = _draw(rng, int(label), h, w)
        out.append(LabeledExample(torch.from_numpy(img).to(dtype), int(label), f"synthetic-{seed}-{i}"))
    return out


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [0, 1] -> (H, W, C) uint8, clipping first."""
    arr = image.detach().cpu().clamp(0.0, 1.0).numpy().transpose(1, 2, 0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_image(image: torch.Tensor, path):
    Image.fromarray(to_uint8(image)).save(path)


def read_image(path, dtype=torch.float64) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).to(dtype)


def save_image_folder(examples, root):
    root = Path(root)
    for i, ex in enumerate(examples):
        d = root / str(ex.label)
        d.mkdir(parents=True, exist_ok=True)
        save_image(ex.image, d / f"{i:05d}.png")


def load_image_folder(path, expected_size=(16, 16, 3), dtype=torch.float64) -> list[LabeledExample]:
    """One subdirectory per integer class label, exact-size RGB files, no resizing."""
    root = Path(path)
    if not root.is_dir():
        raise IngestError(f"{root} is not a directory")
    h, w, _ = expected_size
    out = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            label = int(class_dir.name)
        except ValueError as exc:
            raise IngestError(f"class directory {class_dir.name!r} is not an integer label") from exc
        for f in sorted(class_dir.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(f) as im:
                size = im.size
            if size != (w, h):
                raise IngestError(f"{f}: size {size[1]}x{size[0]} differs from expected {h}x{w}")
            out.append(LabeledExample(read_image(f, dtype), label, f"{class_dir.name}/{f.name}"))
    if not out:
        raise IngestError(f"no images found under {root}")
    return out
