"""Registered finite-difference suites, grouped by module.

Every case takes a seed, builds random binary64 inputs and returns the worst
relative error reported by :func:`finite_diff_check`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .core import ParamStore, Tensor
from .fca import FcaConfig, fca_forward, init_fca_params
from .gradcheck import finite_diff_check as _fd_check
from .model import (ModelConfig, backbone_forward, build_model, cast_model, classification_loss,
                    classification_scores, model_forward, segmentation_loss, stochastic_gate)
from .pamr import PamrConfig, pamr
from .sf2 import aligned_upsample, init_sf2_params, sf2_forward, sf2_fuse, Sf2Config

EPS = 1e-5
TOLERANCE = 1e-4
F64 = np.float64


def finite_diff_check(closure, params, eps=EPS, **kw):
    return _fd_check(closure, params, eps, retry_above=TOLERANCE, **kw)


@dataclass
class Case:
    module: str
    name: str
    fn: Callable[[int], float]


REGISTRY: list[Case] = []


def case(module: str, name: str):
    def wrap(fn):
        REGISTRY.append(Case(module, name, fn))
        return fn
    return wrap


def _leaf(rng, *shape, low=None, high=None):
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.weighted_sum(out, weights)


def _unary(op, shape=(2, 3, 5, 4)):
    def run(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, *shape)
        probe = rng.standard_normal(op(x).shape)
        return finite_diff_check(lambda p: _project(op(p[0]), probe), [x], EPS)
    return run


# --- tensor-core -----------------------------------------------------------

case("tensor-core", "sigmoid")(_unary(ops.sigmoid))
case("tensor-core", "relu")(_unary(ops.relu))
case("tensor-core", "softmax_channel")(_unary(ops.softmax_channel))
case("tensor-core", "pool_spatial_avg")(_unary(lambda x: ops.global_pool_spatial(x, "avg")))
case("tensor-core", "pool_spatial_max")(_unary(lambda x: ops.global_pool_spatial(x, "max")))
case("tensor-core", "pool_channel_avg")(_unary(lambda x: ops.global_pool_channel(x, "avg")))
case("tensor-core", "pool_channel_max")(_unary(lambda x: ops.global_pool_channel(x, "max")))
case("tensor-core", "bilinear_upsample")(_unary(lambda x: ops.bilinear_upsample(x, 10, 12)))


@case("tensor-core", "conv2d")
def _conv(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _leaf(rng, 2, 3, 7, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 1, 4, 1, 1)
    f = lambda p: ops.conv2d(p[0], p[1], p[2], stride=2, pad_h=1, pad_w=2, dilation=1)
    probe = rng.standard_normal(f([x, w, b]).shape)
    return finite_diff_check(lambda p: _project(f(p), probe), [x, w, b], EPS)


@case("tensor-core", "conv2d_dilated_sigmoid")
def _conv_dil(seed):
    rng = np.random.default_rng(seed)
    x, w = _leaf(rng, 1, 2, 8, 8), _leaf(rng, 3, 2, 3, 3)
    f = lambda p: ops.sigmoid(ops.conv2d(p[0], p[1], None, pad_h=2, pad_w=2, dilation=2))
    probe = rng.standard_normal(f([x, w]).shape)
    return finite_diff_check(lambda p: _project(f(p), probe), [x, w], EPS)


@case("tensor-core", "batchnorm_train")
def _bn_train(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 1, 3, 1, 1), _leaf(rng, 1, 3, 1, 1)
    st = ops.BatchNormState.fresh(3, F64)
    probe = rng.standard_normal(x.shape)
    return finite_diff_check(lambda p: _project(ops.batchnorm(p[0], p[1], p[2], st, True), probe), [x, g, b], EPS)


@case("tensor-core", "batchnorm_eval")
def _bn_eval(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 1, 3, 1, 1), _leaf(rng, 1, 3, 1, 1)
    st = ops.BatchNormState(rng.standard_normal(3), rng.uniform(0.5, 2, 3))
    probe = rng.standard_normal(x.shape)
    return finite_diff_check(lambda p: _project(ops.batchnorm(p[0], p[1], p[2], st, False), probe), [x, g, b], EPS)


@case("tensor-core", "concat_channel")
def _concat(seed):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 2, 2, 3, 3), _leaf(rng, 2, 3, 3, 3)
    probe = rng.standard_normal((2, 5, 3, 3))
    return finite_diff_check(lambda p: _project(ops.concat_channel(p), probe), [a, b], EPS)


@case("tensor-core", "broadcast_mul")
def _bmul(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 2, 3, 4, 5)
    gates = [_leaf(rng, 2, 3, 1, 1), _leaf(rng, 2, 1, 4, 5), _leaf(rng, 2, 3, 4, 5)]
    probe = rng.standard_normal(x.shape)

    def f(p):
        y = p[0]
        for gate in p[1:]:
            y = ops.broadcast_mul(y, gate)
        return _project(y, probe)
    return finite_diff_check(f, [x] + gates, EPS)


@case("tensor-core", "grid_sample_bilinear")
def _grid(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 2, 3, 5, 6)
    pos = _leaf(rng, 2, 2, 4, 4, low=-0.7, high=5.7)
    probe = rng.standard_normal((2, 3, 4, 4))
    return finite_diff_check(lambda p: _project(ops.grid_sample_bilinear(p[0], p[1]), probe), [x, pos], EPS)


@case("tensor-core", "div_sum_spatial")
def _div(seed):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 4, 4, low=0.5, high=2.0)
    probe = rng.standard_normal((2, 3, 1, 1))
    return finite_diff_check(lambda p: _project(ops.div(ops.sum_spatial(p[0]), ops.sum_spatial(p[1])), probe),
                             [a, b], EPS)


# --- segnet pieces -----------------------------------------------------------


@case("segnet", "classification_scores")
def _ngwp(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 2, 5, 4, 4)
    probe = rng.standard_normal((2, 4, 1, 1))
    return finite_diff_check(lambda p: _project(classification_scores(p[0])[1], probe), [x], EPS)


@case("segnet", "classification_loss")
def _cls_loss(seed):
    rng = np.random.default_rng(seed)
    s = _leaf(rng, 3, 4, 1, 1)
    labels = rng.integers(0, 2, size=(3, 4))
    return finite_diff_check(lambda p: classification_loss(p[0], labels), [s], EPS)


@case("segnet", "segmentation_loss")
def _seg_loss(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 2, 5, 4, 4)
    labels = rng.integers(0, 5, size=(2, 4, 4)).astype(np.uint8)
    labels[rng.random((2, 4, 4)) < 0.3] = 255
    return finite_diff_check(lambda p: segmentation_loss(p[0], labels)[0], [x], EPS)


@case("segnet", "pamr_masks")
def _pamr(seed):
    rng = np.random.default_rng(seed)
    image = rng.standard_normal((1, 3, 12, 12))
    x = _leaf(rng, 1, 4, 6, 6)
    probe = rng.standard_normal((1, 4, 6, 6))
    cfg = PamrConfig(iterations=3, dilations=[1, 2])
    return finite_diff_check(lambda p: _project(pamr(image, ops.softmax_channel(p[0]), cfg), probe), [x], EPS)


@case("segnet", "stochastic_gate")
def _gate(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 2, 4, 3, 3)
    probe = rng.standard_normal(x.shape)
    return finite_diff_check(
        lambda p: _project(stochastic_gate(p[0], 0.7, True, np.random.default_rng(seed)), probe), [x], EPS)


def _tiny_model(variant: str, seed: int):
    cfg = ModelConfig(num_classes=3, d2=4, kernel_sizes=[1, 3])
    cfg.backbone.widths = [4, 4, 6, 6]
    cfg.pamr = PamrConfig(iterations=2, dilations=[1])
    model = cast_model(build_model(cfg, variant, seed), F64)
    # move BN statistics and offset head off their neutral initial values
    rng = np.random.default_rng(seed + 1000)
    for name, t in model.params.items():
        if name.startswith("sf2.offset"):
            t.data[...] = rng.standard_normal(t.shape) * 0.3
        elif ".attn" in name:
            t.data *= 0.2
        elif name.endswith("bn_beta"):
            t.data[...] = rng.standard_normal(t.shape) * 0.5
        elif name.endswith("bn_gamma"):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
    for st in model.stats.values():
        st.running_mean[...] = rng.standard_normal(st.running_mean.shape) * 0.1
        st.running_var[...] = rng.uniform(0.5, 1.5, st.running_var.shape)
    return model


@case("segnet", "backbone")
def _backbone(seed):
    model = _tiny_model("baseline", seed)
    rng = np.random.default_rng(seed)
    image = rng.standard_normal((1, 3, 16, 16))
    pl, px = (rng.standard_normal(s) for s in ((1, 4, 4, 4), (1, 6, 2, 2)))
    params = {n: t for n, t in model.params.items() if n.startswith("backbone.")}

    def f(_):
        f_l, f_x = backbone_forward(Tensor(image), model.params, model.stats, training=False)
        return ops.add(_project(f_l, pl), _project(f_x, px))
    return finite_diff_check(f, params, EPS, max_coords=4, seed=seed)


@case("segnet", "model_forward_full")
def _model_full(seed):
    model = _tiny_model("full", seed)
    rng = np.random.default_rng(seed)
    image = rng.standard_normal((1, 3, 16, 16))
    labels = np.array([[1.0, 0.0, 1.0]])
    probe = rng.standard_normal((1, 4, 4, 4))

    def f(_):
        out = model_forward(model, Tensor(image), training=True, rng=np.random.default_rng(seed), refine=True)
        loss = ops.add(_project(out.mask_logits, probe), classification_loss(out.class_scores, labels))
        return ops.add(loss, _project(out.refined_masks, probe))
    return finite_diff_check(f, model.params, EPS, max_coords=2, seed=seed)


# --- fca / sf2 ---------------------------------------------------------------


@case("fca", "fca_forward")
def _fca(seed):
    rng = np.random.default_rng(seed)
    cfg = FcaConfig(in_channels=3, branch_channels=4, kernel_sizes=[1, 3, 5, 7])
    params, stats = ParamStore(), {}
    init_fca_params(cfg, params, stats, rng, dtype=F64)
    _condition(params, stats, rng)
    x = _leaf(rng, 2, 3, 6, 7)
    probe = rng.standard_normal((2, 4, 6, 7))
    train = bool(seed % 2)
    everything = dict(params.items())
    everything["input"] = x

    def f(p):
        return _project(fca_forward(p["input"], cfg, params, stats, training=train), probe)
    return finite_diff_check(f, everything, EPS, max_coords=12, seed=seed)


def _condition(params, stats, rng):
    """Move a fresh module off its degenerate initial point.

    Zero BN shifts leave exact zeros in front of ReLUs wherever a receptive
    field is all zero (a kink the central difference straddles), and large
    attention logits saturate the sigmoid so gradients sink below the
    difference quotient's resolution.
    """
    for name, t in params.items():
        if name.startswith("sf2.offset"):
            t.data[...] = rng.standard_normal(t.shape) * 0.3
        elif ".attn" in name:
            t.data *= 0.2
        elif name.endswith("bn_beta"):
            t.data[...] = rng.standard_normal(t.shape) * 0.5
    for st in stats.values():
        st.running_mean[...] = rng.standard_normal(st.running_mean.shape) * 0.1
        st.running_var[...] = rng.uniform(0.5, 1.5, st.running_var.shape)


def _sf2_setup(seed, fusion="sf2"):
    rng = np.random.default_rng(seed)
    cfg = Sf2Config(channels=3, stride=2, fusion=fusion)
    params, stats = ParamStore(), {}
    init_sf2_params(cfg, params, stats, rng, dtype=F64)
    _condition(params, stats, rng)
    f_h = _leaf(rng, 2, 3, 3, 4)
    f_l = _leaf(rng, 2, 3, 6, 8)
    return rng, cfg, params, stats, f_h, f_l


@case("sf2", "sf2_fuse")
def _sf2_fuse(seed):
    rng, cfg, params, stats, f_h, f_l = _sf2_setup(seed)
    ph, pl = rng.standard_normal((2, 3, 6, 8)), rng.standard_normal((2, 3, 6, 8))
    everything = dict(params.items())
    everything.update({"f_h": f_h, "f_l": f_l})
    train = bool(seed % 2)

    def f(p):
        a, b = sf2_fuse(p["f_h"], p["f_l"], params, stats, training=train)
        return ops.add(_project(a, ph), _project(b, pl))
    return finite_diff_check(f, everything, EPS, max_coords=12, seed=seed)


@case("sf2", "sf2_forward")
def _sf2_full(seed):
    rng, cfg, params, stats, f_h, f_l = _sf2_setup(seed)
    probe = rng.standard_normal((2, 3, 6, 8))
    everything = dict(params.items())
    everything.update({"f_h": f_h, "f_l": f_l})
    return finite_diff_check(lambda p: _project(sf2_forward(p["f_h"], p["f_l"], cfg, params, stats, False), probe),
                             everything, EPS, max_coords=12, seed=seed)


@case("sf2", "aligned_upsample")
def _aligned(seed):
    rng = np.random.default_rng(seed)
    f_h = _leaf(rng, 2, 3, 4, 5)
    off = _leaf(rng, 2, 2, 8, 10)
    off.data *= 1.5
    probe = rng.standard_normal((2, 3, 8, 10))
    return finite_diff_check(lambda p: _project(aligned_upsample(p[0], p[1], 2), probe), [f_h, off], EPS)


MODULES = ("tensor-core", "fca", "sf2", "segnet")


@dataclass
class CaseResult:
    module: str
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < TOLERANCE


def run_gradcheck(scope: str = "all", seeds=range(10), cases: list[Case] | None = None):
    """Run registered suites; returns (all_passed, results, seconds)."""
    pool = REGISTRY if cases is None else cases
    if scope != "all" and scope not in MODULES and cases is None:
        raise ValueError(f"scope must be 'all' or one of {MODULES}")
    selected = [c for c in pool if scope == "all" or c.module == scope]
    start = time.perf_counter()
    results = [CaseResult(c.module, c.name, s, float(c.fn(s))) for c in selected for s in seeds]
    return all(r.passed for r in results), results, time.perf_counter() - start


def format_results(results: list[CaseResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"{'PASS' if r.passed else 'FAIL'} {r.module}/{r.name} seed={r.seed} max_rel_err={r.error:.3e}")
    return "\n".join(lines)
