"""Train a small model on synthetic shapes and evaluate it with multi-scale inference.

python demos/train_and_evaluate.py [output_dir]
"""

import sys
from pathlib import Path

from wsfcn.config import ExperimentConfig
from wsfcn.experiment import read_train_log, run_eval, run_train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
cfg = ExperimentConfig(seed=1, n_train=100, n_val=20, total_epochs=12, cls_epochs=4,
                       dataset=str(out / "data"), output=str(out / "run"))

ckpt = run_train(cfg)
rows = read_train_log(out / "run" / "train_log.csv")
print(f"{len(rows)} steps, cls loss {rows[0]['loss_cls']:.3f} -> {rows[-1]['loss_cls']:.3f}")

single = run_eval(ckpt, report_path=out / "single_scale.txt")
multi = run_eval(ckpt, scales=[1, 0.5, 1.5, 2], flip=True, report_path=out / "multi_scale.txt")
print(f"single scale  miou {single.miou:.3f} pixacc {single.pixacc:.3f}")
print(f"multi + flip  miou {multi.miou:.3f} pixacc {multi.pixacc:.3f}")
print((out / "multi_scale.txt").read_text())
