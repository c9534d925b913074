"""Compare a trained policy with the Stand Still and random baselines.

Run with ``python notebooks/03_evaluate.py [checkpoint]`` after ``02_train_smoke.py``.
"""
import sys

from quadbal import evalbench as EB

checkpoint = sys.argv[1] if len(sys.argv) > 1 else "runs/notebook-train/checkpoints/last.ckpt"
bench = EB.build_benchmark(100, seed=2024)
static = EB.build_benchmark(100, seed=2024, static=True)

reports = [EB.run_stand_still(bench), EB.run_random(bench), EB.run_policy(checkpoint, bench, "estimated")]
print(EB.format_table(reports))

# On a motionless level platform the passive stance is stable.
print("\nstatic platform, stand still:")
print(EB.format_table([EB.run_stand_still(static)]))

# How well does the history-based estimator recover the privileged quantities?
est = EB.estimator_accuracy(checkpoint, bench.head(20))
print("\nquantity   error    std")
for name, kind, err, std in est.rows():
    print(f"{name:9s} {err:7.4f} {std:7.4f}")
