"""Shared fixtures and independent oracles for the test modules."""

import math

import numpy as np

from wsfcn.core import ParamStore, Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_oracle(x, w, b=None, stride=1, ph=0, pw=0, dil=1):
    """Six nested loops, zero padding."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * ph - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pw - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                r, q = y * stride - ph + u * dil, z * stride - pw + v * dil
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[i, c, r, q] * w[o, c, u, v]
                    out[i, o, y, z] = acc
    return out


def sample_oracle(img, y, x):
    """Bilinear value of a 2-D array at continuous (y, x), border clamped."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    return ((1 - dy) * (1 - dx) * img[y0, x0] + (1 - dy) * dx * img[y0, x1]
            + dy * (1 - dx) * img[y1, x0] + dy * dx * img[y1, x1])


def identity_bn(stats):
    for st in stats.values():
        st.running_mean[...] = 0
        st.running_var[...] = 1


def zero_params(params: ParamStore, prefix=""):
    for name, t in params.items():
        if name.startswith(prefix):
            t.data[...] = 0
