"""Semantically consistent feature fusion.

Deep features are upsampled at learned offset positions so they line up with
the shallow features, then both streams refine each other through a shared
element-wise product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .core import ParamStore, ShapeError, Tensor, as_tensor, record
from .layers import Stats, add_embed, conv, embed

PREFIX = "sf2"
FUSIONS = ("sf2", "sum", "concat", "mul")


@dataclass
class Sf2Config:
    channels: int = 32
    stride: int = 2
    # "sf2" is the aligned bidirectional fusion; the others are the plain
    # comparison fusions (bilinear upsample, then sum / concat / product).
    fusion: str = "sf2"

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")


def init_sf2_params(config: Sf2Config, params: ParamStore, stats: Stats, rng: np.random.Generator,
                    lr_multiplier: float = 1.0, dtype=np.float32) -> None:
    d, m = config.channels, lr_multiplier
    if config.fusion == "sf2":
        # Offsets start at zero: plain bilinear upsampling until trained.
        params.add(f"{PREFIX}.offset/weight", np.zeros((2, 2 * d, 3, 3), dtype), m)
        params.add(f"{PREFIX}.offset/bias", np.zeros((1, 2, 1, 1), dtype), m)
        for name in ("embed_h", "embed_l", "fuse_h", "fuse_l", "out"):
            add_embed(params, stats, f"{PREFIX}.{name}", rng, d, d, lr_multiplier=m, dtype=dtype)
    else:
        in_c = 2 * d if config.fusion == "concat" else d
        add_embed(params, stats, f"{PREFIX}.out", rng, d, in_c, lr_multiplier=m, dtype=dtype)


def check_stride(f_h: Tensor, f_l: Tensor, stride: int | None = None) -> int:
    h1, w1 = f_h.shape[2:]
    h2, w2 = f_l.shape[2:]
    if h2 % h1 or w2 % w1 or h2 // h1 != w2 // w1:
        raise ShapeError("sf2", "stride", "integer ratio H2/H1 == W2/W1", ((h1, w1), (h2, w2)))
    s = h2 // h1
    if stride is not None and s != stride:
        raise ShapeError("sf2", "stride", stride, s)
    return s


def predict_offset(f_h: Tensor, f_l: Tensor, params: ParamStore) -> Tensor:
    """Offset field (n,2,H2,W2) in high-resolution pixels: row then column."""
    check_stride(f_h, f_l)
    up = ops.bilinear_upsample(f_h, *f_l.shape[2:])
    return conv(ops.concat_channel([up, f_l]), params, f"{PREFIX}.offset")


def aligned_upsample(f_h: Tensor, offset: Tensor, s: int) -> Tensor:
    """Sample ``f_h`` at ((p + offset(p)) + 0.5)/s - 0.5 for every output pixel p."""
    f_h, offset = as_tensor(f_h), as_tensor(offset)
    n, _, h1, w1 = f_h.shape
    h2, w2 = h1 * s, w1 * s
    if offset.shape != (n, 2, h2, w2):
        raise ShapeError("aligned_upsample", "offset", (n, 2, h2, w2), offset.shape)
    pr, pc = ops._grid(n, h2, w2)
    rows = ops.source_coord(pr + offset.data[:, 0].astype(np.float64), s)
    cols = ops.source_coord(pc + offset.data[:, 1].astype(np.float64), s)
    out, grads = ops._bilinear(f_h.data, rows, cols)

    def backward(g):
        gx, gr, gc = grads(g, need_x=f_h.requires_grad, need_pos=offset.requires_grad)
        goff = np.stack([gr, gc], axis=1).astype(offset.dtype) / s if gr is not None else None
        return [gx, goff]

    return record(out, [f_h, offset], backward)


EmbedFn = Callable[[str, Tensor], Tensor]


def sf2_fuse(f_h: Tensor, f_l: Tensor, params: ParamStore, stats: Stats, training: bool = False,
             embed_fn: EmbedFn | None = None) -> tuple[Tensor, Tensor]:
    """Returns (F_h', F_l') at the shallow resolution.

    ``embed_fn(name, x)`` replaces the conv/BN/ReLU embeddings when given
    (used to check the fusion algebra in isolation).
    """
    if embed_fn is None:
        def embed_fn(name, x):
            return embed(x, params, stats, f"{PREFIX}.{name}", training)
    s = check_stride(f_h, f_l)
    gamma = aligned_upsample(f_h, predict_offset(f_h, f_l, params), s)
    eh = embed_fn("embed_h", gamma)
    el = embed_fn("embed_l", f_l)
    prod = ops.mul(eh, el)
    return embed_fn("fuse_h", ops.add(eh, prod)), embed_fn("fuse_l", ops.add(el, prod))


def sf2_output(f_h2: Tensor, f_l2: Tensor, params: ParamStore, stats: Stats, training: bool = False) -> Tensor:
    if f_h2.shape != f_l2.shape:
        raise ShapeError("sf2_output", "shape", f_h2.shape, f_l2.shape)
    return embed(ops.add(f_h2, f_l2), params, stats, f"{PREFIX}.out", training)


def sf2_forward(f_h: Tensor, f_l: Tensor, config: Sf2Config, params: ParamStore, stats: Stats,
                training: bool = False) -> Tensor:
    check_stride(f_h, f_l, config.stride)
    if config.fusion == "sf2":
        return sf2_output(*sf2_fuse(f_h, f_l, params, stats, training), params, stats, training)
    up = ops.bilinear_upsample(f_h, *f_l.shape[2:])
    if config.fusion == "sum":
        merged = ops.add(up, f_l)
    elif config.fusion == "mul":
        merged = ops.mul(up, f_l)
    else:
        merged = ops.concat_channel([up, f_l])
    return embed(merged, params, stats, f"{PREFIX}.out", training)
