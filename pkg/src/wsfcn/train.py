"""SGD with momentum and weight decay, and the two-phase training step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .core import ParamStore, Tape, Tensor
from .model import SegModel, classification_loss, model_forward, refined_nll, segmentation_loss

PHASES = ("cls_only", "cls_plus_seg")


@dataclass
class SGD:
    """Heavy-ball SGD: v <- momentum*v + (g + wd*w); w <- w - lr*mult*v."""

    params: ParamStore
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data -= (self.lr * self.params.lr_multiplier(name)) * v

    def zero_grad(self) -> None:
        self.params.zero_grad()


@dataclass
class StepReport:
    phase: str
    loss_cls: float
    loss_seg: float | None = None
    seg_counted: bool = False


def train_step(model: SegModel, images: np.ndarray, labels: np.ndarray, phase: str, optimizer: SGD,
               rng: np.random.Generator, seg_after_pamr: bool = False) -> StepReport:
    """One forward/backward/update on a batch; returns the loss values."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    seg = phase == "cls_plus_seg"
    optimizer.zero_grad()
    with Tape() as tape:
        out = model_forward(model, Tensor(images.astype(model.params["head.cls/weight"].dtype)),
                            training=True, rng=rng, labels=labels, refine=seg)
        loss = classification_loss(out.class_scores, labels)
        report = StepReport(phase, loss.item())
        if seg:
            seg_loss, counted = segmentation_loss(out.mask_logits, out.pseudo_labels)
            if seg_after_pamr and counted:
                seg_loss = ops.add(seg_loss, refined_nll(out.refined_masks, out.pseudo_labels))
            report.loss_seg, report.seg_counted = seg_loss.item(), counted
            loss = ops.add(loss, seg_loss)
    tape.backward(loss)
    optimizer.step()
    return report
