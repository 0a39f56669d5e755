"""Confusion-matrix metrics, multi-scale/flip ensembling and false-positive
class removal."""

from __future__ import annotations

import math

import numpy as np

from .model import IGNORE, SegModel, infer_masks
from .ops import bilinear_upsample

RENORM_TOL = 1e-6


class EmptyMatrixError(ValueError):
    pass


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_labels: int, ignore_value: int = IGNORE):
        self.counts = np.zeros((num_labels, num_labels), dtype=np.int64)
        self.ignore_value = ignore_value

    @property
    def num_labels(self) -> int:
        return self.counts.shape[0]

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        keep = gt != self.ignore_value
        k = self.num_labels
        for name, arr, mask in (("ground truth", gt, keep), ("prediction", pred, keep)):
            bad = mask & ((arr < 0) | (arr >= k))
            if bad.any():
                pos = tuple(int(i) for i in np.argwhere(bad)[0])
                raise ValueError(f"{name} label {arr[pos]} out of range at pixel {pos}")
        idx = gt[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_labels, self.ignore_value)
        out.counts = self.counts + other.counts
        return out

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def class_ious(cm: ConfusionMatrix) -> dict[int, float]:
    """IoU per class with a nonzero union."""
    c = cm.counts
    diag = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - diag
    return {int(i): float(diag[i] / union[i]) for i in range(len(diag)) if union[i] > 0}


def miou(cm: ConfusionMatrix) -> float:
    ious = class_ious(cm)
    if not ious:
        raise EmptyMatrixError("confusion matrix is empty")
    return math.fsum(ious.values()) / len(ious)


def pixacc(cm: ConfusionMatrix) -> float:
    total = cm.total()
    if total == 0:
        raise EmptyMatrixError("confusion matrix is empty")
    return float(np.trace(cm.counts)) / total


def _renormalize(p: np.ndarray) -> np.ndarray:
    s = p.sum(axis=1, keepdims=True)
    return np.where(np.abs(s - 1) > RENORM_TOL, p / s, p)


def _round8(x: float) -> int:
    return max(8, int(math.ceil(x / 8.0)) * 8)


def ensemble_infer(model: SegModel, image: np.ndarray, scales=(1.0,), flip: bool = False,
                   out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Average eval-mode softmax masks over rescaled (and mirrored) copies.

    Masks are resized to ``out_size`` (default: the scale-1 mask resolution,
    a quarter of the input) before averaging.  Pixels whose mass drifted more
    than ``RENORM_TOL`` from 1 are renormalized.
    """
    image = np.asarray(image)
    n, _, h, w = image.shape
    if out_size is None:
        out_size = (h // 4, w // 4)
    acc, members = None, 0
    for s in scales:
        sh, sw = _round8(h * s), _round8(w * s)
        scaled = image if (sh, sw) == (h, w) else bilinear_upsample(image, sh, sw).data
        for flipped in ((False, True) if flip else (False,)):
            x = np.ascontiguousarray(scaled[..., ::-1]) if flipped else scaled
            m = infer_masks(model, x)
            if flipped:
                m = np.ascontiguousarray(m[..., ::-1])
            if m.shape[2:] != tuple(out_size):
                m = bilinear_upsample(m, *out_size).data
            acc = m if acc is None else acc + m
            members += 1
    avg = acc if members == 1 else acc / members
    return _renormalize(avg)


def filter_false_positive_classes(masks: np.ndarray, labels) -> np.ndarray:
    """Zero foreground channels of classes absent from ``labels`` and renormalize."""
    masks = np.asarray(masks)
    n, k = masks.shape[:2]
    present = np.asarray(labels, dtype=masks.dtype).reshape(n, k - 1)
    keep = np.concatenate([np.ones((n, 1), dtype=masks.dtype), present], axis=1).reshape(n, k, 1, 1)
    kept = masks * keep
    s = kept.sum(axis=1, keepdims=True)
    # pixels whose whole mass sat on removed classes fall back to background
    bg = np.zeros_like(kept)
    bg[:, 0] = 1
    return np.where(s > 0, kept / np.where(s > 0, s, 1), bg)


def predict_labels(masks: np.ndarray, size: tuple[int, int] | None = None) -> np.ndarray:
    """Argmax class map, optionally after resizing the masks to ``size``."""
    if size is not None and masks.shape[2:] != tuple(size):
        masks = bilinear_upsample(masks, *size).data
    return masks.argmax(axis=1).astype(np.uint8)
