"""Training, evaluation and ablation orchestration."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import augment, load_split, synth_dataset, to_input
from .metrics import ConfusionMatrix, class_ious, ensemble_infer, filter_false_positive_classes, miou, pixacc, predict_labels
from .model import SegModel, build_model
from .ops import BatchNormState
from .train import SGD, train_step

log = logging.getLogger(__name__)

LOG_HEADER = "step, phase, loss_cls, loss_seg, lr"


def ensure_dataset(config: ExperimentConfig) -> Path:
    root = Path(config.dataset)
    if not (root / "manifest.txt").exists():
        synth_dataset(config.n_train, config.n_val, config.data_seed, root)
    return root


def _streams(seed: int):
    init, data, gate = np.random.SeedSequence(seed).spawn(3)
    return (int(np.random.default_rng(init).integers(2 ** 31)),
            np.random.default_rng(data), np.random.default_rng(gate))


def model_tensors(model: SegModel) -> dict[str, np.ndarray]:
    tensors = {name: t.data for name, t in model.params.items()}
    for name, st in model.stats.items():
        tensors[f"{name}/running_mean"] = st.running_mean.reshape(1, -1, 1, 1)
        tensors[f"{name}/running_var"] = st.running_var.reshape(1, -1, 1, 1)
    return tensors


def save_model(directory, model: SegModel, config: ExperimentConfig, epoch: int) -> None:
    manifest = {"variant": model.variant, "epoch": epoch, "seed": config.seed,
                "config_hash": config.digest()}
    io.save_checkpoint(directory, model_tensors(model), manifest)
    (Path(directory) / "config.txt").write_text(config.to_text())


def load_model(directory) -> tuple[SegModel, ExperimentConfig, dict[str, str]]:
    d = Path(directory)
    tensors, manifest = io.load_checkpoint(d)
    config = load_config(d / "config.txt")
    if manifest.get("config_hash") != config.digest():
        raise ConfigError(f"{d}: config hash mismatch")
    if manifest.get("variant") != config.variant:
        raise ConfigError(f"{d}: manifest variant {manifest.get('variant')} != config {config.variant}")
    model = build_model(config.model_config(), config.variant, seed=0, lr_multiplier=config.lr_multiplier)
    expected = set(model_tensors(model))
    if set(tensors) != expected:
        raise ConfigError(f"{d}: checkpoint tensors do not match variant {config.variant}")
    for name, t in model.params.items():
        t.data[...] = tensors[name]
    for name, st in model.stats.items():
        model.stats[name] = BatchNormState(tensors[f"{name}/running_mean"].reshape(-1).copy(),
                                           tensors[f"{name}/running_var"].reshape(-1).copy())
    return model, config, manifest


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def run_train(config: ExperimentConfig, out_dir=None) -> Path:
    """Train ``config``; writes train_log.csv, periodic and final checkpoints.

    Returns the final checkpoint directory.
    """
    config.validate()
    out = Path(out_dir or config.output)
    out.mkdir(parents=True, exist_ok=True)
    root = ensure_dataset(config)
    samples = load_split(root, "train", config.num_classes, with_masks=False)
    init_seed, data_rng, gate_rng = _streams(config.seed)
    model = build_model(config.model_config(), config.variant, init_seed, config.lr_multiplier)
    opt = SGD(model.params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    lines = [LOG_HEADER]
    step = 0
    for epoch in range(1, config.total_epochs + 1):
        phase = "cls_only" if epoch <= config.cls_epochs else "cls_plus_seg"
        order = data_rng.permutation(len(samples))
        for start in range(0, len(order), config.batch_size):
            batch = [augment(samples[i], config.crop_size, data_rng, (config.scale_min, config.scale_max))
                     for i in order[start:start + config.batch_size]]
            images = to_input(np.stack([s.image for s in batch]))
            labels = np.stack([s.labels for s in batch])
            rep = train_step(model, images, labels, phase, opt, gate_rng, config.seg_after_pamr)
            step += 1
            lines.append(f"{step}, {phase}, {_fmt(rep.loss_cls)}, {_fmt(rep.loss_seg)}, {config.lr:g}")
        log.info("epoch %d/%d %s %s", epoch, config.total_epochs, phase, lines[-1])
        if config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch < config.total_epochs:
            save_model(out / "checkpoints" / f"epoch_{epoch:03d}", model, config, epoch)
    (out / "train_log.csv").write_text("\n".join(lines) + "\n")
    final = out / "checkpoint"
    save_model(final, model, config, config.total_epochs)
    return final


def read_train_log(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        step, phase, lc, ls, lr = (p.strip() for p in line.split(","))
        rows.append({"step": int(step), "phase": phase, "loss_cls": float(lc),
                     "loss_seg": float(ls) if ls else None, "lr": float(lr)})
    return rows


@dataclass
class EvalResult:
    miou: float
    pixacc: float
    ious: dict[int, float]
    matrix: ConfusionMatrix


def evaluate(model: SegModel, samples, scales=(1.0,), flip: bool = False, filter_fp: bool = False,
             batch_size: int = 10) -> EvalResult:
    k = model.config.num_classes + 1
    cm = ConfusionMatrix(k)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = to_input(np.stack([s.image for s in chunk]), model.params["head.cls/weight"].dtype)
        masks = ensemble_infer(model, images, scales, flip)
        if filter_fp:
            masks = filter_false_positive_classes(masks, np.stack([s.labels for s in chunk]))
        pred = predict_labels(masks, images.shape[2:])
        for p, s in zip(pred, chunk):
            cm.accumulate(p, s.gt_mask)
    return EvalResult(miou(cm), pixacc(cm), class_ious(cm), cm)


def run_eval(checkpoint, dataset=None, scales=(1.0,), flip: bool = False, filter_fp: bool = False,
             report_path=None, expect_variant: str | None = None) -> EvalResult:
    """Evaluate the val split and write a metrics report next to the checkpoint."""
    model, config, manifest = load_model(checkpoint)
    if expect_variant is not None and expect_variant != model.variant:
        raise ConfigError(f"checkpoint variant {model.variant} != requested {expect_variant}")
    samples = load_split(Path(dataset or config.dataset), "val", config.num_classes)
    res = evaluate(model, samples, scales, flip, filter_fp)
    header = (f"variant={model.variant} scales={'/'.join(f'{s:g}' for s in scales)} "
              f"flip={str(flip).lower()} filter_fp={str(filter_fp).lower()}")
    report = io.format_report(res.ious, res.miou, res.pixacc, header=header)
    path = Path(report_path) if report_path else Path(checkpoint) / "metrics.txt"
    path.write_text(report)
    return res


@dataclass
class AblationRow:
    variant: str
    params: int
    mious: list[float]
    pixaccs: list[float]

    def line(self) -> str:
        m, p = np.array(self.mious) * 100, np.array(self.pixaccs) * 100
        return (f"{self.variant}, {self.params}, {m.mean():.2f}, {m.min():.2f}, {m.max():.2f}, "
                f"{p.mean():.2f}, {p.min():.2f}, {p.max():.2f}, {len(m)}")


ABLATION_HEADER = "variant, params, miou_mean, miou_min, miou_max, pixacc_mean, pixacc_min, pixacc_max, runs"


def run_ablation(base: ExperimentConfig, variants, seeds, out_dir=None) -> list[AblationRow]:
    """Train and evaluate every (variant, seed); writes ablation.csv."""
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    out = Path(out_dir or base.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in variants:
        mious, accs, count = [], [], 0
        for seed in seeds:
            cfg = base.replace(variant=variant, seed=seed).validate()
            ckpt = run_train(cfg, out / f"{variant}_seed{seed}")
            res = run_eval(ckpt)
            mious.append(res.miou)
            accs.append(res.pixacc)
            count = build_model(cfg.model_config(), variant, 0).param_count()
            log.info("ablation %s seed %d: miou %.4f pixacc %.4f", variant, seed, res.miou, res.pixacc)
        rows.append(AblationRow(variant, count, mious, accs))
    (out / "ablation.csv").write_text("\n".join([ABLATION_HEADER] + [r.line() for r in rows]) + "\n")
    return rows


def config_from_args(path=None, seed=None, out=None) -> ExperimentConfig:
    cfg = load_config(path) if path else parse_config("")
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["output"] = str(out)
    return cfg.replace(**changes)
