"""Single-stage segmentation network: toy backbone, FCA / SF2 necks, stochastic
gate, normalized global weighted pooling, PAMR refinement and the two losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .core import ParamStore, ShapeError, Tensor, as_tensor, no_grad, record
from .fca import FcaConfig, fca_forward, init_fca_params
from .layers import Stats, add_conv, add_embed, conv, embed
from .pamr import PamrConfig, pamr
from .sf2 import Sf2Config, init_sf2_params, sf2_forward

IGNORE = 255
VARIANTS = ("baseline", "+fca_mclm", "+fca_full", "+sf2", "full")
NGWP_EPS = 1e-4
MODULE_PREFIXES = ("fca.", "sf2.")


@dataclass
class BackboneConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 64])


@dataclass
class ModelConfig:
    num_classes: int = 4
    d2: int = 32
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    kernel_sizes: list[int] = field(default_factory=lambda: [1, 3, 5, 7])
    separate_attention: bool = False
    fusion: str = "sf2"
    keep_prob: float = 0.7
    tau: float = 0.6
    pamr: PamrConfig = field(default_factory=PamrConfig)

    @property
    def d1(self) -> int:
        return self.backbone.widths[-1]


def uses_fca(variant: str) -> bool:
    return variant in ("+fca_mclm", "+fca_full", "full")


def uses_sf2(variant: str) -> bool:
    return variant in ("+sf2", "full")


def fca_config(config: ModelConfig, variant: str) -> FcaConfig:
    return FcaConfig(in_channels=config.d1, branch_channels=config.d2, kernel_sizes=list(config.kernel_sizes),
                     use_srm=variant != "+fca_mclm", separate_attention=config.separate_attention)


def sf2_config(config: ModelConfig) -> Sf2Config:
    return Sf2Config(channels=config.d2, stride=2, fusion=config.fusion)


@dataclass
class SegModel:
    config: ModelConfig
    variant: str
    params: ParamStore
    stats: Stats

    def param_count(self) -> int:
        return self.params.count()


def build_model(config: ModelConfig, variant: str, seed: int, lr_multiplier: float = 20.0,
                dtype=np.float32) -> SegModel:
    """Instantiate parameters for ``variant``; FCA/SF2 groups get ``lr_multiplier``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    params, stats = ParamStore(), {}
    w = config.backbone.widths
    if len(w) != 4:
        raise ValueError("backbone widths must list 4 stage widths")
    add_embed(params, stats, "backbone.stem", rng, w[0], 3, dtype=dtype)
    add_embed(params, stats, "backbone.s1a", rng, w[1], w[0], dtype=dtype)
    add_embed(params, stats, "backbone.s1b", rng, w[1], w[1], dtype=dtype)
    add_embed(params, stats, "backbone.s2a", rng, w[2], w[1], dtype=dtype)
    add_embed(params, stats, "backbone.s2b", rng, w[2], w[2], dtype=dtype)
    add_embed(params, stats, "backbone.s3", rng, w[3], w[2], dtype=dtype)
    add_conv(params, "backbone.low_proj", rng, config.d2, w[1], 1, 1, dtype=dtype)
    if uses_fca(variant):
        init_fca_params(fca_config(config, variant), params, stats, rng, lr_multiplier, dtype)
    else:
        add_embed(params, stats, "head.embed", rng, config.d2, config.d1, dtype=dtype)
    if uses_sf2(variant):
        init_sf2_params(sf2_config(config), params, stats, rng, lr_multiplier, dtype)
    add_conv(params, "head.cls", rng, config.num_classes + 1, config.d2, 1, 1, dtype=dtype)
    return SegModel(config, variant, params, stats)


def cast_model(model: SegModel, dtype) -> SegModel:
    """Copy of ``model`` with parameters and running statistics in ``dtype``."""
    stats = {k: ops.BatchNormState(v.running_mean.astype(dtype), v.running_var.astype(dtype), v.momentum)
             for k, v in model.stats.items()}
    return SegModel(model.config, model.variant, model.params.astype(dtype), stats)


# ---------------------------------------------------------------------------
# components


def backbone_forward(image: Tensor, params: ParamStore, stats: Stats, training: bool = False) -> tuple[Tensor, Tensor]:
    """Returns (F_l at 1/4 with d2 channels, F_x at 1/8 with d1 channels)."""
    image = as_tensor(image)
    h, w = image.shape[2:]
    if h % 8 or w % 8:
        raise ShapeError("backbone_forward", "image extent", "multiple of 8 (pad the image)", (h, w))
    x = embed(image, params, stats, "backbone.stem", training, stride=2)
    x = embed(x, params, stats, "backbone.s1a", training, stride=2)
    low = embed(x, params, stats, "backbone.s1b", training)
    x = embed(low, params, stats, "backbone.s2a", training, stride=2)
    x = embed(x, params, stats, "backbone.s2b", training)
    f_x = embed(x, params, stats, "backbone.s3", training, dilation=2)
    f_l = conv(low, params, "backbone.low_proj")
    return f_l, f_x


def stochastic_gate(x: Tensor, keep_prob: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Per-(sample, channel) Bernoulli keep mask scaled by 1/keep_prob."""
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    x = as_tensor(x)
    if not training or keep_prob == 1:
        return x
    if rng is None:
        raise ValueError("training-mode stochastic gate needs an rng")
    n, c = x.shape[:2]
    keep = (rng.random((n, c, 1, 1)) < keep_prob).astype(x.dtype) / np.asarray(keep_prob, dtype=x.dtype)
    return ops.broadcast_mul(x, Tensor(keep))


def classification_scores(mask_logits: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax masks and mask-weighted mean logits of the foreground classes."""
    masks = ops.softmax_channel(mask_logits)
    num = ops.sum_spatial(ops.mul(masks, mask_logits))
    den = ops.add_scalar(ops.sum_spatial(masks), NGWP_EPS)
    k = mask_logits.shape[1]
    return masks, ops.slice_channel(ops.div(num, den), 1, k)


def _as_labels(labels, n: int, c: int) -> np.ndarray:
    arr = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64).reshape(n, c)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("labels must be multi-hot (0/1)")
    return arr


def classification_loss(class_scores: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with logits over n*C terms."""
    class_scores = as_tensor(class_scores)
    n, c = class_scores.shape[:2]
    y = 2.0 * _as_labels(labels, n, c) - 1.0
    x = class_scores.data.reshape(n, c).astype(np.float64)
    loss = np.logaddexp(0.0, -y * x).mean()
    out = np.full((1, 1, 1, 1), loss, dtype=class_scores.dtype)

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * (y * x)))  # sigmoid(y x)
        grad = -y * (1.0 - sig) / (n * c)
        return [(g.reshape(()) * grad).reshape(class_scores.shape).astype(class_scores.dtype)]

    return record(out, [class_scores], backward)


def pseudo_mask(refined: np.ndarray | Tensor, labels, tau: float) -> np.ndarray:
    """Per-pixel class index (uint8) or IGNORE where confidence is below ``tau``.

    Foreground channels of classes absent from ``labels`` are zeroed first;
    background (channel 0) is always kept.  ``labels=None`` keeps all classes.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must be in (0, 1)")
    probs = np.array(refined.data if isinstance(refined, Tensor) else refined, copy=True)
    n, k = probs.shape[:2]
    if labels is not None:
        present = _as_labels(labels, n, k - 1)
        keep = np.concatenate([np.ones((n, 1)), present], axis=1).reshape(n, k, 1, 1)
        probs = probs * keep
    best = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    return np.where(conf >= tau, best, IGNORE).astype(np.uint8)


def _balanced_weights(labels: np.ndarray) -> tuple[np.ndarray, bool]:
    counted = labels != IGNORE
    if not counted.any():
        return np.zeros(labels.shape), False
    classes, counts = np.unique(labels[counted], return_counts=True)
    per_class = np.zeros(256)
    per_class[classes] = 1.0 / (counts * len(classes))
    return np.where(counted, per_class[labels], 0.0), True


def segmentation_loss(mask_logits: Tensor, pseudo_labels: np.ndarray) -> tuple[Tensor, bool]:
    """Class-balanced cross-entropy of softmax(mask_logits) against ``pseudo_labels``.

    Returns ``(loss, counted)``; with every pixel ignored the loss is 0 and
    ``counted`` is False.
    """
    mask_logits = as_tensor(mask_logits)
    n, k, h, w = mask_logits.shape
    labels = np.asarray(pseudo_labels).reshape(n, h, w)
    if labels.shape != (n, h, w):
        raise ShapeError("segmentation_loss", "labels", (n, h, w), labels.shape)
    weights, counted = _balanced_weights(labels)
    z = mask_logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(labels == IGNORE, 0, labels).astype(np.intp)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(weights * picked).sum()
    out = np.full((1, 1, 1, 1), loss, dtype=mask_logits.dtype)

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (p - onehot) * weights[:, None]
        return [(g.reshape(()) * grad).astype(mask_logits.dtype)]

    return record(out, [mask_logits], backward), counted


def refined_nll(probs: Tensor, pseudo_labels: np.ndarray, floor: float = 1e-8) -> Tensor:
    """Class-balanced negative log-likelihood of already-normalized ``probs``."""
    probs = as_tensor(probs)
    n, k, h, w = probs.shape
    labels = np.asarray(pseudo_labels).reshape(n, h, w)
    weights, _ = _balanced_weights(labels)
    safe = np.where(labels == IGNORE, 0, labels).astype(np.intp)
    picked = np.take_along_axis(probs.data.astype(np.float64), safe[:, None], axis=1)[:, 0]
    picked = np.maximum(picked, floor)
    out = np.full((1, 1, 1, 1), -(weights * np.log(picked)).sum(), dtype=probs.dtype)

    def backward(g):
        grad = np.zeros(probs.shape)
        np.put_along_axis(grad, safe[:, None], (-weights / picked)[:, None], axis=1)
        return [(g.reshape(()) * grad).astype(probs.dtype)]

    return record(out, [probs], backward)


# ---------------------------------------------------------------------------
# full model


@dataclass
class ModelOutput:
    mask_logits: Tensor
    masks: Tensor
    class_scores: Tensor
    refined_masks: Tensor | None = None
    pseudo_labels: np.ndarray | None = None


def features(model: SegModel, image: Tensor, training: bool = False) -> Tensor:
    """Neck output (n, d2, H/4, W/4) for the model's variant."""
    p, st, cfg, variant = model.params, model.stats, model.config, model.variant
    f_l, f_x = backbone_forward(image, p, st, training)
    if uses_fca(variant):
        f_h = fca_forward(f_x, fca_config(cfg, variant), p, st, training)
    else:
        f_h = embed(f_x, p, st, "head.embed", training)
    if uses_sf2(variant):
        return sf2_forward(f_h, f_l, sf2_config(cfg), p, st, training)
    return ops.bilinear_upsample(f_h, *f_l.shape[2:])


def model_forward(model: SegModel, image, training: bool = False, rng: np.random.Generator | None = None,
                  labels=None, refine: bool = True) -> ModelOutput:
    """Run the network on an (n,3,H,W) image batch.

    With ``refine`` the softmax masks are passed through PAMR (gradients flow
    into the masks, not the affinities) and pseudo labels are derived from
    the refined masks and ``labels``.
    """
    image = as_tensor(image)
    feat = features(model, image, training)
    feat = stochastic_gate(feat, model.config.keep_prob, training, rng)
    logits = conv(feat, model.params, "head.cls")
    masks, scores = classification_scores(logits)
    out = ModelOutput(logits, masks, scores)
    if refine:
        out.refined_masks = pamr(image.data, masks, model.config.pamr)
        out.pseudo_labels = pseudo_mask(out.refined_masks, labels, model.config.tau)
    return out


def infer_masks(model: SegModel, image) -> np.ndarray:
    """Eval-mode softmax masks without refinement or recording."""
    with no_grad():
        return model_forward(model, image, training=False, refine=False).masks.data
