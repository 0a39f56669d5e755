"""Flexible context aggregation: strip-convolution branches, channel attention
(MCLM) and spatial recalibration (SRM)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .core import ParamStore, ShapeError, Tensor
from .layers import Stats, add_conv, add_embed, conv, embed

PREFIX = "fca"


@dataclass
class FcaConfig:
    in_channels: int = 64
    branch_channels: int = 32
    kernel_sizes: list[int] = field(default_factory=lambda: [1, 3, 5, 7])
    use_srm: bool = True
    # One 1x1 conv shared by the GAP and GMP paths unless this is set.
    separate_attention: bool = False

    def __post_init__(self):
        if not self.kernel_sizes:
            raise ValueError("kernel_sizes must be non-empty")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel size {k} must be odd and >= 1")


def init_fca_params(config: FcaConfig, params: ParamStore, stats: Stats, rng: np.random.Generator,
                    lr_multiplier: float = 1.0, dtype=np.float32) -> None:
    d1, d2 = config.in_channels, config.branch_channels
    m = lr_multiplier
    for i, k in enumerate(config.kernel_sizes):
        base = f"{PREFIX}.branch{i}"
        # "row" path: 1xk then kx1; "col" path: kx1 then 1xk.
        add_conv(params, f"{base}.row1", rng, d2, d1, 1, k, bias=False, lr_multiplier=m, dtype=dtype)
        add_conv(params, f"{base}.row2", rng, d2, d2, k, 1, bias=False, lr_multiplier=m, dtype=dtype)
        add_conv(params, f"{base}.col1", rng, d2, d1, k, 1, bias=False, lr_multiplier=m, dtype=dtype)
        add_conv(params, f"{base}.col2", rng, d2, d2, 1, k, bias=False, lr_multiplier=m, dtype=dtype)
        add_conv(params, f"{PREFIX}.attn{i}", rng, d2, d2, 1, 1, lr_multiplier=m, dtype=dtype)
        if config.separate_attention:
            add_conv(params, f"{PREFIX}.attn{i}.max", rng, d2, d2, 1, 1, lr_multiplier=m, dtype=dtype)
    add_embed(params, stats, f"{PREFIX}.embed", rng, d2, d2 * len(config.kernel_sizes),
              lr_multiplier=m, dtype=dtype)
    if config.use_srm:
        add_conv(params, f"{PREFIX}.srm", rng, 1, 2, 3, 3, lr_multiplier=m, dtype=dtype)


def strip_coefficients(params: ParamStore, i: int) -> int:
    """Strip-kernel coefficients of branch ``i`` per (in, out) channel pair."""
    total = 0
    for part in ("row1", "row2", "col1", "col2"):
        w = params[f"{PREFIX}.branch{i}.{part}/weight"]
        total += w.shape[2] * w.shape[3]
    return total


def mclm_branch(x: Tensor, i: int, params: ParamStore) -> Tensor:
    base = f"{PREFIX}.branch{i}"
    w = params[f"{base}.row1/weight"]
    if w.shape[1] != x.shape[1]:
        raise ShapeError("mclm_branch", "in_channels", w.shape[1], x.shape[1])
    row = conv(conv(x, params, f"{base}.row1"), params, f"{base}.row2")
    col = conv(conv(x, params, f"{base}.col1"), params, f"{base}.col2")
    return ops.add(row, col)


def channel_attention(fk: Tensor, i: int, params: ParamStore) -> tuple[Tensor, Tensor]:
    """Returns the channel gate M_c (n,d2,1,1) and the gated features."""
    avg = conv(ops.global_pool_spatial(fk, "avg"), params, f"{PREFIX}.attn{i}")
    max_name = f"{PREFIX}.attn{i}.max" if f"{PREFIX}.attn{i}.max/weight" in params else f"{PREFIX}.attn{i}"
    mx = conv(ops.global_pool_spatial(fk, "max"), params, max_name)
    gate = ops.sigmoid(ops.add(avg, mx))
    return gate, ops.broadcast_mul(fk, gate)


def mclm(x: Tensor, config: FcaConfig, params: ParamStore, stats: Stats, training: bool = False) -> Tensor:
    branches = []
    for i in range(len(config.kernel_sizes)):
        _, gated = channel_attention(mclm_branch(x, i, params), i, params)
        branches.append(gated)
    return embed(ops.concat_channel(branches), params, stats, f"{PREFIX}.embed", training)


def spatial_gate(f_com: Tensor, params: ParamStore) -> Tensor:
    pooled = ops.concat_channel([ops.global_pool_channel(f_com, "avg"), ops.global_pool_channel(f_com, "max")])
    return ops.sigmoid(conv(pooled, params, f"{PREFIX}.srm"))


def srm(f_com: Tensor, params: ParamStore) -> Tensor:
    gate = spatial_gate(f_com, params)
    return ops.add(ops.broadcast_mul(f_com, gate), f_com)


def fca_forward(x: Tensor, config: FcaConfig, params: ParamStore, stats: Stats,
                training: bool = False) -> Tensor:
    f_com = mclm(x, config, params, stats, training)
    return srm(f_com, params) if config.use_srm else f_com
