"""A short training run: curriculum, estimator loss and reward terms over iterations.

Run with ``python notebooks/02_train_smoke.py [iterations]``. Writes a run directory under
``runs/notebook-train`` that the evaluation script picks up.
"""
import csv
import sys
from dataclasses import replace
from pathlib import Path

from quadbal.learn import TrainConfig, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 50
out = Path("runs/notebook-train")

cfg = TrainConfig()
cfg = replace(cfg, run=replace(cfg.run, n_envs=64, iterations=iterations, checkpoint_every=25))


def progress(row):
    if row["iteration"] % 10 == 0:
        print(f"iter {row['iteration']:4d}  level {row['level']}  success {row['window_success']:.2f}  "
              f"L_exp {row['L_exp']:.3f}  L_imp {row['L_imp']:.4f}  entropy {row['entropy']:.2f}")


trainer = train(cfg, out, progress=progress)

# The explicit estimator is supervised directly, so its loss is the first thing to move.
with open(out / "metrics.csv", newline="") as fh:
    rows = list(csv.DictReader(fh))
first, last = rows[min(9, len(rows) - 1)], rows[-1]
print(f"\nL_exp {float(first['L_exp']):.3f} -> {float(last['L_exp']):.3f}")
terms = [k for k in last if k.startswith("r_")]
print("mean reward terms at the last iteration:")
for k in terms:
    print(f"  {k:10s} {float(last[k]):+.4f}")
print(f"checkpoint: {out / 'checkpoints' / 'last.ckpt'}")
