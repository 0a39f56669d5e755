"""Command-line entry point: ``wsfcn {synth,train,eval,ablate,gradcheck,infer}``.

Exit status is 0 on success, 1 on a validation error (bad config, flags or
incompatible checkpoint) and 2 on any other runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from . import io
from .config import ConfigError
from .data import synth_dataset, to_input
from .experiment import config_from_args, load_model, run_ablation, run_eval, run_train
from .metrics import ensemble_infer, predict_labels
from .model import VARIANTS
from .suites import MODULES, format_results, run_gradcheck

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsfcn", description="Weakly-supervised segmentation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    _shared(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)

    p = sub.add_parser("train", help="train one variant")
    _shared(p)
    p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--scales", type=_floats, default=[1.0])
    p.add_argument("--flip", action="store_true")
    p.add_argument("--filter-fp", action="store_true")
    p.add_argument("--variant", choices=VARIANTS, help="fail unless the checkpoint is this variant")

    p = sub.add_parser("ablate", help="train and evaluate variants over seeds")
    _shared(p)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])

    p = sub.add_parser("gradcheck", help="run finite-difference suites")
    _shared(p)
    p.add_argument("--scope", default="all", choices=("all",) + MODULES)
    p.add_argument("--seeds", type=int, default=10, help="number of seeds per case")

    p = sub.add_parser("infer", help="predict a label mask for one PPM image")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--scales", type=_floats, default=[1.0])
    p.add_argument("--flip", action="store_true")
    return parser


def _synth(args) -> int:
    cfg = config_from_args(args.config, args.seed)
    n_train = args.n_train if args.n_train is not None else cfg.n_train
    n_val = args.n_val if args.n_val is not None else cfg.n_val
    if n_train < 1 or n_val < 1:
        raise ConfigError("n_train and n_val must be >= 1")
    seed = args.seed if args.seed is not None else cfg.data_seed
    manifest = synth_dataset(n_train, n_val, seed, args.out or cfg.dataset)
    print(manifest)
    return EXIT_OK


def _train(args) -> int:
    cfg = config_from_args(args.config, args.seed, args.out)
    if args.variant:
        cfg = cfg.replace(variant=args.variant)
    print(run_train(cfg.validate()))
    return EXIT_OK


def _eval(args) -> int:
    report = Path(args.out) / "metrics.txt" if args.out else None
    if report is not None:
        report.parent.mkdir(parents=True, exist_ok=True)
    res = run_eval(args.checkpoint, args.dataset, args.scales, args.flip, args.filter_fp, report,
                   expect_variant=args.variant)
    print(f"miou {res.miou:.6f} pixacc {res.pixacc:.6f}")
    return EXIT_OK


def _ablate(args) -> int:
    cfg = config_from_args(args.config, 0 if args.seed is None else args.seed, args.out)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}")
    seeds = [args.seed] if args.seed is not None else args.seeds
    rows = run_ablation(cfg.validate(), variants, seeds)
    for r in rows:
        print(r.line())
    return EXIT_OK


def _gradcheck(args) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    start = 0 if args.seed is None else args.seed
    ok, results, secs = run_gradcheck(args.scope, range(start, start + args.seeds))
    text = format_results(results) + f"\n{'PASS' if ok else 'FAIL'} {len(results)} checks in {secs:.1f}s\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_RUNTIME


def _infer(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    image = io.load_ppm(args.image)
    x = to_input(image[None], model.params["head.cls/weight"].dtype)
    masks = ensemble_infer(model, x, args.scales, args.flip)
    pred = predict_labels(masks, image.shape[:2])[0]
    out = Path(args.out or ".") / (Path(args.image).stem + "_pred.pgm")
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_pgm(out, pred)
    print(out)
    return EXIT_OK


COMMANDS = {"synth": _synth, "train": _train, "eval": _eval, "ablate": _ablate,
            "gradcheck": _gradcheck, "infer": _infer}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, io.FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
