"""Context aggregation, offset-aligned upsampling and mask refinement on toy inputs."""

import numpy as np

from wsfcn import FcaConfig, Sf2Config, aligned_upsample, fca_forward, ops
from wsfcn.core import ParamStore, Tensor
from wsfcn.data import make_sample, to_input
from wsfcn.fca import init_fca_params, strip_coefficients
from wsfcn.pamr import PamrConfig, pamr
from wsfcn.sf2 import init_sf2_params, sf2_forward

rng = np.random.default_rng(0)

# %% strip convolutions: a k x k field from 4k coefficients per channel pair
cfg = FcaConfig(in_channels=8, branch_channels=8, kernel_sizes=[1, 3, 5, 7])
params, stats = ParamStore(), {}
init_fca_params(cfg, params, stats, rng)
print("coefficients per branch", [strip_coefficients(params, i) for i in range(4)])
out = fca_forward(Tensor(rng.standard_normal((1, 8, 9, 9)).astype(np.float32)), cfg, params, stats)
print("context output", out.shape)

# %% zero offsets reduce to plain bilinear upsampling; a row offset shifts the grid
low = Tensor(rng.standard_normal((1, 1, 4, 4)))
zero = aligned_upsample(low, Tensor(np.zeros((1, 2, 8, 8))), 2)
print("zero offset == bilinear:", np.array_equal(zero.data, ops.bilinear_upsample(low, 8, 8).data))
shift = np.zeros((1, 2, 8, 8))
shift[:, 0] = 2.0
moved = aligned_upsample(low, Tensor(shift), 2)
print("shifted by one low-res row:", np.allclose(moved.data[:, :, :-2], zero.data[:, :, 2:]))

# %% fusing a deep map into a shallow one
sp, sst = ParamStore(), {}
init_sf2_params(Sf2Config(channels=8, stride=2), sp, sst, rng)
deep = Tensor(rng.standard_normal((1, 8, 6, 6)).astype(np.float32))
shallow = Tensor(rng.standard_normal((1, 8, 12, 12)).astype(np.float32))
print("fused", sf2_forward(deep, shallow, Sf2Config(channels=8, stride=2), sp, sst).shape)

# %% refinement pulls a blurry mask toward image edges
sample = make_sample(rng)
image = to_input(sample.image[None])
h = w = 18
fg = np.zeros((1, 2, h, w))
fg[0, 1, 4:14, 4:14] = 0.6
fg[0, 0] = 1 - fg[0, 1]
refined = pamr(image, Tensor(fg), PamrConfig(iterations=10)).data
print("mask sums stay 1:", np.allclose(refined.sum(axis=1), 1))
print("labels present", np.flatnonzero(sample.labels) + 1)
