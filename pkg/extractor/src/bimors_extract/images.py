"""Synthetic image corpora and image-directory traversal.

A corpus root holds one subdirectory per class containing PNG files. The
generator draws a distinct procedural base pattern per class (stripes,
checks, gradients at class-specific colors) plus per-image pixel noise and
shifts, so a frozen feature extractor produces tight class clusters.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def _base_pattern(class_index: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    k = class_index + 1
    r = 0.5 + 0.5 * np.sin(2 * np.pi * k * xx)
    g = 0.5 + 0.5 * np.cos(2 * np.pi * k * yy)
    b = 0.5 + 0.5 * np.sin(2 * np.pi * k * (xx + yy))
    if class_index % 3 == 1:
        r, g = g, 1.0 - r
    if class_index % 3 == 2:
        b = np.where(((xx * 4 * k).astype(int) + (yy * 4 * k).astype(int)) % 2 == 0, 1.0, 0.0)
    return np.stack([r, g, b], axis=-1)


def generate_corpus(root, class_names: list[str], per_class: int, size: int = 32,
                    seed: int = 0, noise: float = 0.06) -> Path:
    root = Path(root)
    rng = np.random.default_rng(seed)
    for ci, name in enumerate(class_names):
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        base = _base_pattern(ci, size)
        for j in range(per_class):
            shift = rng.integers(0, size // 4)
            img = np.roll(base, int(shift), axis=1)
            img = img + noise * rng.standard_normal(img.shape)
            arr = (np.clip(img, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(arr).save(class_dir / f"{name}_{j:04d}.png")
    return root


def iter_corpus(root) -> list[tuple[str, int, Path]]:
    """(class_name, class_id, path) triples; classes sorted by name."""
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"no class directories under {root}")
    out = []
    for cid, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() in IMAGE_SUFFIXES:
                out.append((class_dir.name, cid, path))
    return out


def load_pixels(path, image_size: int) -> np.ndarray:
    """[3, H, W] float32 in [-1, 1], resized to the encoder's input size."""
    with Image.open(path) as img:
        img = img.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.transpose((arr - 0.5) / 0.5, (2, 0, 1))
