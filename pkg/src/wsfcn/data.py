"""Synthetic shapes dataset with image-level labels, loading and augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .ops import bilinear_upsample, resize_nearest_labels

CLASS_NAMES = ("background", "disk", "square", "triangle", "ring")
NUM_CLASSES = 4
IMAGE_SIZE = 72
MIN_VISIBLE = 0.10
# base RGB per foreground class; per-shape colours are jittered around it
_BASE_COLOURS = np.array([[220, 60, 50], [60, 180, 70], [70, 90, 220], [210, 190, 50]], dtype=np.float64)


@dataclass
class Sample:
    image: np.ndarray          # (H, W, 3) uint8
    labels: np.ndarray         # (C,) multi-hot over foreground classes 1..C
    gt_mask: np.ndarray | None = None  # (H, W) uint8 class indices, evaluation only
    name: str = ""


def _shape_mask(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = rng.uniform(9, 18)
    cy, cx = rng.uniform(r, size - r, size=2)
    dy, dx = yy - cy, xx - cx
    if cls == 1:
        return dy ** 2 + dx ** 2 <= r ** 2
    if cls == 2:
        a = rng.uniform(0, np.pi / 2)
        u = np.cos(a) * dx + np.sin(a) * dy
        v = -np.sin(a) * dx + np.cos(a) * dy
        half = r * 0.8
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if cls == 3:
        a = rng.uniform(0, 2 * np.pi)
        inside = np.ones((size, size), dtype=bool)
        for k in range(3):
            t = a + 2 * np.pi * k / 3
            # half-plane facing the centre, inradius r/2
            inside &= (np.cos(t) * dx + np.sin(t) * dy) <= r / 2
        return inside
    d2 = dy ** 2 + dx ** 2
    return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(70, 150, size=3)
    gy, gx = np.mgrid[0:size, 0:size] / size
    slope = rng.uniform(-30, 30, size=(2, 3))
    img = base + gy[..., None] * slope[0] + gx[..., None] * slope[1]
    return img + rng.normal(0, 12, size=(size, size, 3))


def make_sample(rng: np.random.Generator, size: int = IMAGE_SIZE, name: str = "") -> Sample:
    """Draw 1-3 shapes over a textured background; each stays >= 10% visible."""
    while True:
        n_shapes = int(rng.integers(1, 4))
        classes = rng.integers(1, NUM_CLASSES + 1, size=n_shapes)
        img = _background(size, rng)
        owner = np.full((size, size), -1, dtype=np.int64)
        areas = []
        for k, cls in enumerate(classes):
            m = _shape_mask(int(cls), size, rng)
            colour = _BASE_COLOURS[cls - 1] + rng.normal(0, 18, size=3)
            img[m] = colour + rng.normal(0, 8, size=(int(m.sum()), 3))
            owner[m] = k
            areas.append(int(m.sum()))
        visible = [int((owner == k).sum()) for k in range(n_shapes)]
        if all(a > 0 and v >= MIN_VISIBLE * a for a, v in zip(areas, visible)):
            break
    gt = np.zeros((size, size), dtype=np.uint8)
    for k, cls in enumerate(classes):
        gt[owner == k] = cls
    return Sample(np.clip(np.rint(img), 0, 255).astype(np.uint8), labels_from_mask(gt), gt, name)


def labels_from_mask(mask: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    present = np.zeros(num_classes, dtype=np.float32)
    for c in np.unique(mask):
        if 1 <= c <= num_classes:
            present[c - 1] = 1.0
    return present


def synth_dataset(n_train: int, n_val: int, seed: int, out_dir) -> Path:
    """Write train/ and val/ splits (PPM images, PGM masks, labels.txt) and manifest.txt."""
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    rng = np.random.default_rng(seed)
    lines = [f"# wsfcn synthetic shapes, seed {seed}", f"num_classes = {NUM_CLASSES}",
             f"image_size = {IMAGE_SIZE}"]
    for split, count in (("train", n_train), ("val", n_val)):
        d = root / split
        d.mkdir(exist_ok=True)
        labels = {}
        for i in range(count):
            name = f"{split}_{i:05d}"
            s = make_sample(rng, name=name)
            io.save_ppm(d / f"{name}.ppm", s.image)
            io.save_pgm(d / f"{name}.pgm", s.gt_mask)
            labels[f"{name}.ppm"] = [int(c) + 1 for c in np.flatnonzero(s.labels)]
            lines.append(f"{split} {split}/{name}.ppm {split}/{name}.pgm")
        (d / "labels.txt").write_text(io.format_labels(labels))
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_split(root, split: str, num_classes: int = NUM_CLASSES, with_masks: bool = True) -> list[Sample]:
    root = Path(root)
    labels = io.parse_labels((root / split / "labels.txt").read_text())
    samples = []
    for line in (root / "manifest.txt").read_text().splitlines():
        parts = line.split()
        if len(parts) != 3 or parts[0] != split:
            continue
        img_path, mask_path = root / parts[1], root / parts[2]
        vec = np.zeros(num_classes, dtype=np.float32)
        for c in labels[img_path.name]:
            vec[c - 1] = 1.0
        mask = io.load_pgm(mask_path) if with_masks else None
        samples.append(Sample(io.load_ppm(img_path), vec, mask, img_path.stem))
    return samples


def to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(n, H, W, 3) uint8 -> centred (n, 3, H, W) floats."""
    x = np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2) / 255.0 - 0.5
    return (x / 0.25).astype(dtype)


def augment(sample: Sample, crop: int, rng: np.random.Generator, scale_range=(0.9, 1.0),
            flip_prob: float = 0.5) -> Sample:
    """Random horizontal flip, uniform rescale and random crop; labels untouched."""
    img = sample.image
    mask = sample.gt_mask
    if rng.random() < flip_prob:
        img = img[:, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    s = rng.uniform(*scale_range)
    h, w = img.shape[:2]
    nh, nw = max(crop, int(round(h * s))), max(crop, int(round(w * s)))
    if (nh, nw) != (h, w):
        x = img.astype(np.float64).transpose(2, 0, 1)[None]
        img = np.clip(np.rint(bilinear_upsample(x, nh, nw).data[0].transpose(1, 2, 0)), 0, 255).astype(np.uint8)
        if mask is not None:
            mask = resize_nearest_labels(mask[None], nh, nw)[0]
    top = int(rng.integers(0, nh - crop + 1))
    left = int(rng.integers(0, nw - crop + 1))
    img = np.ascontiguousarray(img[top:top + crop, left:left + crop])
    if mask is not None:
        mask = np.ascontiguousarray(mask[top:top + crop, left:left + crop])
    return Sample(img, sample.labels.copy(), mask, sample.name)
