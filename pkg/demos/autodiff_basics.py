"""Tape-based autodiff on NCHW tensors, checked against finite differences."""

import numpy as np

from wsfcn import Tape, Tensor, ops
from wsfcn.gradcheck import finite_diff_check

rng = np.random.default_rng(0)

# %% a small conv -> relu -> global average pool graph
x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
b = Tensor(np.zeros((1, 4, 1, 1)), requires_grad=True)

with Tape() as tape:
    y = ops.relu(ops.conv2d(x, w, b, pad_h=1, pad_w=1))
    loss = ops.sum_all(ops.global_pool_spatial(y))
tape.backward(loss)

print("loss", loss.item())
print("dL/dw shape", w.grad.shape, "norm", np.linalg.norm(w.grad))

# %% central differences agree with the recorded backward pass
closure = lambda p: ops.sum_all(ops.global_pool_spatial(ops.relu(ops.conv2d(p[0], p[1], p[2], pad_h=1, pad_w=1))))
err = finite_diff_check(closure, [x, w, b], max_coords=40, retry_above=1e-4)
print("max relative error", err)

# %% bilinear sampling at fractional positions
img = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
print(ops.bilinear_upsample(img, 8, 8).data[0, 0].round(3))
