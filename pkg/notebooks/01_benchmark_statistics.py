"""Benchmark trajectories: how long and how fast are they, and how does difficulty scale?

Run with ``python notebooks/01_benchmark_statistics.py``. Prints the evaluation-set statistics
and the per-waypoint-count trend used by the curriculum.
"""
import numpy as np

from quadbal import evalbench as EB

# An evaluation set is regenerable from its seed alone; nothing is written here.
bench = EB.build_benchmark(2000, seed=0, write_trajectories=False)
length, speed = bench.column("path_length"), bench.column("mean_speed")
print(f"{len(bench)} test-range episodes")
print(f"  path length  mean {length.mean():.2f} m   median {np.median(length):.2f} m")
print(f"  mean speed   mean {speed.mean():.2f} m/s median {np.median(speed):.2f} m/s")
print(f"  curvature    mean {bench.column('mean_curvature').mean():.2f} 1/m")

# Curriculum levels are waypoint counts. More knots in the same 10 s means a longer path.
counts = list(range(5, 16))
trend = EB.stats_by_waypoint_count(counts, 200, seed=0)
print("\nwaypoints  length m  speed m/s")
for n in counts:
    print(f"{n:9d}  {trend[n][0].mean():8.2f}  {trend[n][1].mean():9.2f}")

# The first waypoint is drawn like every other one, so the platform starts anywhere in the
# range (up to 5 m high, tilted up to 0.7 rad). That start is what makes standing still fail.
first = np.array([bench.trajectory(i).waypoints[0] for i in range(200)])
print(f"\nstart tilt |roll| > 0.3 rad in {np.mean(np.abs(first[:, 3]) > 0.3):.0%} of episodes")
