"""Pixel-adaptive mask refinement.

Each iteration replaces every pixel's class distribution by an affinity
weighted average over its 3x3 neighbourhood at several dilations.  The
affinities depend on the image only, so one refinement pass is a fixed
sparse linear map per image applied ``iterations`` times.  The map is
differentiable with respect to the masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .core import Tensor, as_tensor, record

OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass
class PamrConfig:
    iterations: int = 10
    dilations: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    # None: per-pixel temperature from the local intensity spread.
    temperature: float | None = None
    temperature_scale: float = 0.3


def downsample_image(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Block-average an (n,3,H,W) image down to (n,3,h,w); H, W multiples of h, w."""
    n, c, H, W = image.shape
    fh, fw = H // h, W // w
    if fh * h != H or fw * w != W:
        raise ValueError(f"image {H}x{W} is not a multiple of mask size {h}x{w}")
    return image.reshape(n, c, h, fh, w, fw).mean(axis=(3, 5))


def _neighbour_index(h: int, w: int, d: int) -> np.ndarray:
    """(9, h*w) flat indices of the dilated 3x3 neighbourhood, border-clamped."""
    r = np.arange(h).reshape(h, 1)
    c = np.arange(w).reshape(1, w)
    out = np.empty((len(OFFSETS), h * w), dtype=np.intp)
    for k, (dy, dx) in enumerate(OFFSETS):
        rr = np.clip(r + dy * d, 0, h - 1)
        cc = np.clip(c + dx * d, 0, w - 1)
        out[k] = (rr * w + cc).ravel()
    return out


def affinities(image: np.ndarray, config: PamrConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-dilation neighbour weights (n, D, 9, h*w) and the neighbour indices.

    For each dilation the 9 weights of a pixel are a softmax of -|dI|/tau,
    with dI the RGB-mean absolute intensity difference to the neighbour.
    """
    n, c, h, w = image.shape
    flat = image.reshape(n, c, h * w).astype(np.float64)
    index = [_neighbour_index(h, w, d) for d in config.dilations]
    diffs = np.stack([np.abs(flat[:, :, idx] - flat[:, :, None, :]).mean(axis=1) for idx in index], axis=1)
    if config.temperature is None:
        neigh = np.concatenate([flat[:, :, idx] for idx in index], axis=2)  # (n,c,D*9,hw)
        tau = config.temperature_scale * neigh.std(axis=2).mean(axis=1) + 1e-8  # (n,hw)
        tau = tau[:, None, None, :]
    else:
        tau = config.temperature
    logits = -diffs / tau
    logits -= logits.max(axis=2, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=2, keepdims=True), index


def refinement_matrices(image: np.ndarray, config: PamrConfig) -> list[sparse.csr_matrix]:
    """One row-stochastic (h*w, h*w) matrix per image."""
    n, _, h, w = image.shape
    aff, index = affinities(image, config)
    hw = h * w
    n_dil = len(index)
    rows = np.tile(np.arange(hw), 9 * n_dil)
    cols = np.concatenate([idx.ravel() for idx in index])
    mats = []
    for b in range(n):
        vals = (aff[b] / n_dil).reshape(-1)
        # duplicate (row, col) pairs at the border are summed by the conversion
        mats.append(sparse.csr_matrix((vals, (rows, cols)), shape=(hw, hw)))
    return mats


def pamr(image: np.ndarray, masks: Tensor, config: PamrConfig | None = None) -> Tensor:
    """Refine per-pixel class distributions ``masks`` (n,K,h,w).

    ``image`` may be at any integer multiple of the mask resolution; it is
    block-averaged down first.  Affinities are constants for differentiation.
    """
    config = config or PamrConfig()
    masks = as_tensor(masks)
    n, k, h, w = masks.shape
    img = downsample_image(np.asarray(image, dtype=np.float64), h, w)
    aff, index = affinities(img, config)
    n_dil = len(index)
    weights = (aff / n_dil).reshape(n, 1, 9 * n_dil, h * w).astype(masks.dtype)
    nb_index = np.concatenate(index)
    cur = masks.data.reshape(n, k, h * w)
    for _ in range(config.iterations):
        # increment form keeps locally constant maps exactly fixed
        cur = cur + ((cur[:, :, nb_index] - cur[:, :, None, :]) * weights).sum(axis=2)
    out = cur.reshape(n, k, h, w)

    def backward(g):
        mats = refinement_matrices(img, config)
        g = g.reshape(n, k, h * w)
        gm = np.empty_like(g)
        for b in range(n):
            at = mats[b].T.tocsr()
            cur_g = g[b].astype(np.float64).T
            for _ in range(config.iterations):
                cur_g = at @ cur_g
            gm[b] = cur_g.T
        return [gm.reshape(n, k, h, w)]

    return record(out, [masks], backward)
