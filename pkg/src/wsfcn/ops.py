"""Differentiable NCHW operations.

Each function computes its forward value with numpy and, when a tape is
active and an input needs a gradient, registers the matching backward
closure through :func:`wsfcn.core.record`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeError, Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# convolution


def _conv_out(size: int, k: int, pad: int, stride: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, :, i, j] = xp[:, :, r0:r0 + stride * (oh - 1) + 1:stride,
                                  c0:c0 + stride * (ow - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad_h: int = 0, pad_w: int = 0, dilation: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation.  ``weight`` is (out_c, in_c, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 4:
        raise ShapeError("conv2d", "weight rank", 4, weight.data.ndim)
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ShapeError("conv2d", "in_channels", ic, c)
    if bias is not None and bias.data.size != oc:
        raise ShapeError("conv2d", "bias", oc, bias.data.size)
    if stride < 1 or dilation < 1:
        raise ValueError("conv2d: stride and dilation must be >= 1")
    oh = _conv_out(h, kh, pad_h, stride, dilation)
    ow = _conv_out(w, kw, pad_w, stride, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", "output extent", ">= 1", (oh, ow))
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w))) if (pad_h or pad_w) else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    w2 = weight.data.reshape(oc, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, oc, 1)
    out = out.reshape(n, oc, oh, ow)

    inputs = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        g2 = g.reshape(n, oc, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                r0 = i * dilation
                for j in range(kw):
                    c0 = j * dilation
                    gxp[:, :, r0:r0 + stride * (oh - 1) + 1:stride,
                        c0:c0 + stride * (ow - 1) + 1:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pad_h:pad_h + h, pad_w:pad_w + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)).reshape(bias.shape) if bias.requires_grad else None)
        return grads

    return record(out, inputs, backward)


# ---------------------------------------------------------------------------
# pooling and pointwise


def _max_grad(x, m, g, axes):
    mask = (x == m)
    return mask * (g / mask.sum(axis=axes, keepdims=True))


def global_pool_spatial(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce h and w to 1 per channel."""
    return _global_pool(x, mode, (2, 3))


def global_pool_channel(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce the channel axis to 1 per pixel."""
    return _global_pool(x, mode, (1,))


def _global_pool(x, mode, axes):
    x = as_tensor(x)
    if mode == "avg":
        out = x.data.mean(axis=axes, keepdims=True)
        count = np.prod([x.shape[a] for a in axes])

        def backward(g):
            return [np.broadcast_to(g / count, x.shape).copy()]
    elif mode == "max":
        out = x.data.max(axis=axes, keepdims=True)

        def backward(g):
            return [_max_grad(x.data, out, g, axes)]
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return record(out, [x], backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record(out, [x], lambda g: [g * out * (1.0 - out)])


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)
    return record(out, [x], lambda g: [g * pos])


def pointwise(x: Tensor, fn: str) -> Tensor:
    if fn == "sigmoid":
        return sigmoid(x)
    if fn == "relu":
        return relu(x)
    raise ValueError(f"unknown pointwise function {fn!r}")


def softmax_channel(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return [out * (g - (g * out).sum(axis=1, keepdims=True))]

    return record(out, [x], backward)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool) -> Tensor:
    """Per-channel normalization; gamma and beta hold ``c`` values each."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if gamma.data.size != c or beta.data.size != c:
        raise ShapeError("batchnorm", "channels", c, (gamma.data.size, beta.data.size))
    gm = gamma.data.reshape(1, c, 1, 1)
    bt = beta.data.reshape(1, c, 1, 1)
    if training:
        count = n * h * w
        if count < 2:
            raise ShapeError("batchnorm", "n*h*w", ">= 2 in training mode", count)
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean.reshape(c)
        state.running_var[...] = (1 - m) * state.running_var + m * var.reshape(c) * (count / (count - 1))
    else:
        mean = state.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        var = state.running_var.reshape(1, c, 1, 1).astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = ((x.data - mean) * inv_std).astype(x.dtype)
    out = gm * xhat + bt

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape)
        gbeta = g.sum(axis=(0, 2, 3)).reshape(beta.shape)
        dxhat = g * gm
        if training:
            cnt = n * h * w
            gx = inv_std / cnt * (cnt * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = dxhat * inv_std
        return [gx.astype(x.dtype), ggamma, gbeta]

    return record(out, [x, gamma, beta], backward)


# ---------------------------------------------------------------------------
# structural ops


def concat_channel(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channel: empty list")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != n:
            raise ShapeError("concat_channel", "batch", n, p.shape[0])
        if p.shape[2:] != (h, w):
            raise ShapeError("concat_channel", "spatial", (h, w), p.shape[2:])
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return record(out, parts, backward)


def slice_channel(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[:, start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return [gx]

    return record(out, [x], backward)


def _unbroadcast(g, shape):
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record(out, [a, b], lambda g: [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record(out, [a, b], lambda g: [_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting over singleton axes."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]

    return record(out, [a, b], backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return [_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)]

    return record(out, [a, b], backward)


def broadcast_mul(x: Tensor, gate: Tensor) -> Tensor:
    """Channel-wise (n,c,1,1), spatial-wise (n,1,h,w) or elementwise product."""
    x, gate = as_tensor(x), as_tensor(gate)
    n, c, h, w = x.shape
    if gate.shape not in ((n, c, 1, 1), (n, 1, h, w), (n, c, h, w)):
        raise ShapeError("broadcast_mul", "gate", f"{(n, c, 1, 1)}, {(n, 1, h, w)} or {x.shape}", gate.shape)
    return mul(x, gate)


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    return record(x.data * factor, [x], lambda g: [g * factor])


def add_scalar(x: Tensor, value: float) -> Tensor:
    x = as_tensor(x)
    return record(x.data + value, [x], lambda g: [g])


def sum_spatial(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=(2, 3), keepdims=True)
    return record(out, [x], lambda g: [np.broadcast_to(g, x.shape).copy()])


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum().reshape(1, 1, 1, 1)
    return record(out, [x], lambda g: [np.full(x.shape, g.reshape(()), dtype=x.dtype)])


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights) with constant weights (test losses)."""
    x = as_tensor(x)
    out = np.asarray((x.data * weights).sum()).reshape(1, 1, 1, 1)
    return record(out, [x], lambda g: [(g.reshape(()) * weights).astype(x.dtype)])


def detach(x: Tensor) -> Tensor:
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------------------
# bilinear sampling


def source_coord(p: np.ndarray, s) -> np.ndarray:
    """Map output pixel index to continuous input coordinate (half-pixel centers)."""
    return (p + 0.5) / s - 0.5


def _bilinear(x: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Sample ``x`` (n,c,H,W) at float64 coordinates ``rows``/``cols`` (n,oh,ow).

    Returns the output and a function mapping the output gradient to
    (grad_x, grad_rows, grad_cols).  Interpolation uses nested lerps so that
    constant inputs and integer coordinates reproduce input values exactly.
    """
    n, c, H, W = x.shape
    oh, ow = rows.shape[1:]
    r = np.clip(rows, 0, H - 1)
    q = np.clip(cols, 0, W - 1)
    r0 = np.floor(r).astype(np.intp)
    q0 = np.floor(q).astype(np.intp)
    r1 = np.minimum(r0 + 1, H - 1)
    q1 = np.minimum(q0 + 1, W - 1)
    fr = (r - r0).astype(x.dtype).reshape(n, 1, oh * ow)
    fc = (q - q0).astype(x.dtype).reshape(n, 1, oh * ow)
    flat = x.reshape(n, c, H * W)
    idx = [(a * W + b).reshape(n, 1, oh * ow) for a, b in ((r0, q0), (r0, q1), (r1, q0), (r1, q1))]
    v00, v01, v10, v11 = (np.take_along_axis(flat, i, axis=2) for i in idx)
    top = v00 + fc * (v01 - v00)
    bot = v10 + fc * (v11 - v10)
    out = (top + fr * (bot - top)).reshape(n, c, oh, ow)
    inside_r = ((rows >= 0) & (rows <= H - 1)).reshape(n, 1, oh * ow)
    inside_c = ((cols >= 0) & (cols <= W - 1)).reshape(n, 1, oh * ow)

    def grads(g, need_x=True, need_pos=True):
        g = g.reshape(n, c, oh * ow)
        gx = grow = gcol = None
        if need_x:
            weights = ((1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc)
            base = (np.arange(n * c) * (H * W)).reshape(n, c, 1)
            flat_idx = np.concatenate([(base + i).ravel() for i in idx])
            flat_w = np.concatenate([(g * wt).ravel() for wt in weights])
            gx = np.bincount(flat_idx, weights=flat_w, minlength=n * c * H * W)
            gx = gx.reshape(n, c, H, W).astype(x.dtype)
        if need_pos:
            d_fr = bot - top
            d_fc = (1 - fr) * (v01 - v00) + fr * (v11 - v10)
            grow = ((g * d_fr).sum(axis=1, keepdims=True) * inside_r).reshape(n, oh, ow)
            gcol = ((g * d_fc).sum(axis=1, keepdims=True) * inside_c).reshape(n, oh, ow)
        return gx, grow, gcol

    return out, grads


def _grid(n, oh, ow):
    pr = np.broadcast_to(np.arange(oh, dtype=np.float64).reshape(1, oh, 1), (n, oh, ow))
    pc = np.broadcast_to(np.arange(ow, dtype=np.float64).reshape(1, 1, ow), (n, oh, ow))
    return pr, pc


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize with half-pixel centers and border clamping.

    Downscaling is accepted too (used when resizing images for multi-scale
    inference); it is plain point-sampled bilinear without anti-aliasing.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    pr, pc = _grid(n, out_h, out_w)
    rows = source_coord(pr, out_h / h)
    cols = source_coord(pc, out_w / w)
    out, grads = _bilinear(x.data, rows, cols)
    return record(out, [x], lambda g: [grads(g, need_pos=False)[0]])


def grid_sample_bilinear(x: Tensor, positions: Tensor) -> Tensor:
    """Sample ``x`` at ``positions`` (n,2,oh,ow): channel 0 row, channel 1 column."""
    x, positions = as_tensor(x), as_tensor(positions)
    n = x.shape[0]
    if positions.shape[0] != n or positions.shape[1] != 2:
        raise ShapeError("grid_sample_bilinear", "positions", f"({n}, 2, h, w)", positions.shape)
    rows = positions.data[:, 0].astype(np.float64)
    cols = positions.data[:, 1].astype(np.float64)
    out, grads = _bilinear(x.data, rows, cols)

    def backward(g):
        gx, gr, gc = grads(g, need_x=x.requires_grad, need_pos=positions.requires_grad)
        gp = np.stack([gr, gc], axis=1).astype(positions.dtype) if gr is not None else None
        return [gx, gp]

    return record(out, [x, positions], backward)


def resize_nearest_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of an (n,h,w) integer map (half-pixel centers)."""
    n, h, w = labels.shape
    ri = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), 0, h - 1)
    ci = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), 0, w - 1)
    return labels[:, ri][:, :, ci]


__all__ = [
    "BatchNormState", "add", "add_scalar", "batchnorm", "bilinear_upsample", "broadcast_mul",
    "concat_channel", "conv2d", "detach", "div", "global_pool_channel", "global_pool_spatial",
    "grid_sample_bilinear", "mean_all", "mul", "pointwise", "relu", "scale", "sigmoid",
    "slice_channel", "softmax_channel", "source_coord", "sub", "sum_all", "sum_spatial",
    "weighted_sum",
]
