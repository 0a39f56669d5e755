"""Parameter initialisation and the conv/BN/ReLU embedding block shared by the modules."""

from __future__ import annotations

import numpy as np

from . import ops
from .core import ParamStore, Tensor
from .ops import BatchNormState

Stats = dict  # name -> BatchNormState


def he_normal(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def add_conv(params: ParamStore, name: str, rng, out_c: int, in_c: int, kh: int, kw: int,
             bias: bool = True, lr_multiplier: float = 1.0, dtype=np.float32) -> None:
    params.add(f"{name}/weight", he_normal(rng, (out_c, in_c, kh, kw), dtype), lr_multiplier)
    if bias:
        params.add(f"{name}/bias", np.zeros((1, out_c, 1, 1), dtype), lr_multiplier)


def add_embed(params: ParamStore, stats: Stats, name: str, rng, out_c: int, in_c: int,
              k: int = 3, lr_multiplier: float = 1.0, dtype=np.float32) -> None:
    """Register a k x k conv (no bias) followed by BatchNorm affine params."""
    add_conv(params, name, rng, out_c, in_c, k, k, bias=False, lr_multiplier=lr_multiplier, dtype=dtype)
    params.add(f"{name}/bn_gamma", np.ones((1, out_c, 1, 1), dtype), lr_multiplier)
    params.add(f"{name}/bn_beta", np.zeros((1, out_c, 1, 1), dtype), lr_multiplier)
    stats[name] = BatchNormState.fresh(out_c, dtype)


def conv(x: Tensor, params: ParamStore, name: str, stride: int = 1, pad_h: int | None = None,
         pad_w: int | None = None, dilation: int = 1) -> Tensor:
    w = params[f"{name}/weight"]
    b = params[f"{name}/bias"] if f"{name}/bias" in params else None
    kh, kw = w.shape[2:]
    if pad_h is None:
        pad_h = dilation * (kh - 1) // 2
    if pad_w is None:
        pad_w = dilation * (kw - 1) // 2
    return ops.conv2d(x, w, b, stride=stride, pad_h=pad_h, pad_w=pad_w, dilation=dilation)


def embed(x: Tensor, params: ParamStore, stats: Stats, name: str, training: bool,
          stride: int = 1, dilation: int = 1, activation: bool = True) -> Tensor:
    """E(x) = ReLU(BN(conv3x3(x)))."""
    y = conv(x, params, name, stride=stride, dilation=dilation)
    y = ops.batchnorm(y, params[f"{name}/bn_gamma"], params[f"{name}/bn_beta"], stats[name], training)
    return ops.relu(y) if activation else y
