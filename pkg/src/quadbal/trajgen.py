"""Random 6-DoF platform trajectories.

A trajectory is a natural cubic interpolating spline per degree of freedom
(x, y, z, roll, pitch, yaw) through uniformly sampled waypoints placed at uniformly
spaced knot times on ``[0, T]``.  Difficulty is controlled by the number of waypoints:
more waypoints in the same duration give longer, faster paths.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded

from .spatial import euler_rates_to_angular_velocity

DOF_NAMES = ("x", "y", "z", "roll", "pitch", "yaw")
TRAIN_COUNTS = tuple(range(5, 16))
TEST_COUNTS = tuple(range(4, 17))


class InvalidWaypointCount(ValueError):
    pass


class DegenerateKnotsError(ValueError):
    pass


class OutOfDomainError(ValueError):
    pass


def _default_ranges() -> dict:
    return {
        "x": (-1.0, 1.0),
        "y": (-1.0, 1.0),
        "z": (0.0, 5.0),
        "roll": (-0.7, 0.7),
        "pitch": (-0.7, 0.7),
        "yaw": (-2.6, 2.6),
    }


@dataclass
class TrajGenConfig:
    ranges: dict = field(default_factory=_default_ranges)
    waypoint_counts: tuple = TRAIN_COUNTS
    duration: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in DOF_NAMES:
            lo, hi = self.ranges[name]
            if not hi >= lo:
                raise ValueError(f"empty range for {name}: ({lo}, {hi})")
        if min(self.waypoint_counts) < 4:
            raise InvalidWaypointCount("waypoint counts must be >= 4 for cubic interpolation")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @classmethod
    def training(cls, **kw) -> "TrajGenConfig":
        return cls(waypoint_counts=TRAIN_COUNTS, **kw)

    @classmethod
    def testing(cls, **kw) -> "TrajGenConfig":
        return cls(waypoint_counts=TEST_COUNTS, **kw)

    @property
    def low(self) -> np.ndarray:
        return np.array([self.ranges[n][0] for n in DOF_NAMES], dtype=float)

    @property
    def high(self) -> np.ndarray:
        return np.array([self.ranges[n][1] for n in DOF_NAMES], dtype=float)


@dataclass(frozen=True)
class TrajectoryStats:
    path_length: float
    mean_speed: float
    mean_curvature: float


class PlatformTrajectory:
    """Piecewise cubic ``s(t) = a + b u + c u^2 + d u^3`` with ``u = t - t_i`` on each segment.

    ``coeffs`` has shape ``(n_segments, 4, 6)``.
    """

    def __init__(self, times: np.ndarray, coeffs: np.ndarray, waypoints: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.waypoints = np.asarray(waypoints, dtype=float)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def n_waypoints(self) -> int:
        return len(self.times)

    def _segment(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.times[0] - 1e-12) or np.any(t > self.times[-1] + 1e-12):
            raise OutOfDomainError(f"t outside [{self.times[0]}, {self.times[-1]}]")
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        return idx, t - self.times[idx]

    def evaluate(self, t, der: int = 0) -> np.ndarray:
        """Value (``der=0``) or derivative of order ``der`` of all six DoFs at ``t``."""
        idx, u = self._segment(t)
        a, b, c, d = (self.coeffs[idx, k] for k in range(4))
        u = u[..., None]
        if der == 0:
            return a + u * (b + u * (c + u * d))
        if der == 1:
            return b + u * (2 * c + 3 * u * d)
        if der == 2:
            return 2 * c + 6 * u * d
        if der == 3:
            return 6 * d + 0 * u
        raise ValueError("der must be in 0..3")

    def query(self, t):
        """Return ``((position, euler), (linear_velocity, angular_velocity))`` at time ``t``.

        The angular velocity is the world-frame rate obtained from the Euler-angle derivatives.
        """
        p = self.evaluate(t, 0)
        v = self.evaluate(t, 1)
        omega = euler_rates_to_angular_velocity(p[..., 3:], v[..., 3:])
        return (p[..., :3], p[..., 3:]), (v[..., :3], omega)

    def sample(self, rate: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
        n = int(round(self.duration * rate)) + 1
        t = self.times[0] + np.arange(n) / rate
        t[-1] = min(t[-1], self.times[-1])
        return t, self.evaluate(t)


def sample_waypoints(cfg: TrajGenConfig, n: int, rng: np.random.Generator):
    """Draw ``n`` waypoints uniformly inside the configured ranges.

    Returns ``(knot_times, values)`` with ``values`` of shape ``(n, 6)``.
    """
    if n < 4:
        raise InvalidWaypointCount(f"need at least 4 waypoints, got {n}")
    values = rng.uniform(cfg.low, cfg.high, size=(n, 6))
    times = np.linspace(0.0, cfg.duration, n)
    return times, values


def fit_interpolating_spline(times, values) -> PlatformTrajectory:
    """Natural cubic interpolating spline through ``values`` at ``times``."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n = len(t)
    if n < 4:
        raise InvalidWaypointCount(f"need at least 4 waypoints, got {n}")
    h = np.diff(t)
    if np.any(h <= 0):
        raise DegenerateKnotsError("knot times must be strictly increasing")
    slopes = np.diff(y, axis=0) / h[:, None]
    # interior second derivatives; natural ends M_0 = M_{n-1} = 0
    ab = np.zeros((3, n - 2))
    ab[0, 1:] = h[1:-1]
    ab[1] = 2.0 * (h[:-1] + h[1:])
    ab[2, :-1] = h[1:-1]
    rhs = 6.0 * (slopes[1:] - slopes[:-1])
    m = np.zeros_like(y)
    m[1:-1] = solve_banded((1, 1), ab, rhs)
    hh = h[:, None]
    coeffs = np.stack(
        [
            y[:-1],
            slopes - hh * (2.0 * m[:-1] + m[1:]) / 6.0,
            m[:-1] / 2.0,
            (m[1:] - m[:-1]) / (6.0 * hh),
        ],
        axis=1,
    )
    return PlatformTrajectory(t, coeffs, y)


def compute_stats(traj, samples: int = 2000) -> TrajectoryStats:
    """Translational path length, mean speed and mean curvature from dense samples.

    ``traj`` only needs ``duration`` and ``evaluate(t, der)``. Curvature is averaged over
    samples where the speed exceeds 1e-3 m/s.
    """
    if samples < 1000:
        raise ValueError("use at least 1000 samples")
    t0 = getattr(traj, "times", [0.0])[0]
    t = t0 + np.linspace(0.0, traj.duration, samples)
    p = traj.evaluate(t, 0)[:, :3]
    d1 = traj.evaluate(t, 1)[:, :3]
    d2 = traj.evaluate(t, 2)[:, :3]
    length = float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())
    speed = np.linalg.norm(d1, axis=1)
    moving = speed > 1e-3
    if np.any(moving):
        curv = np.linalg.norm(np.cross(d1[moving], d2[moving]), axis=1) / speed[moving] ** 3
        mean_curv = float(curv.mean())
    else:
        mean_curv = 0.0
    return TrajectoryStats(length, length / traj.duration, mean_curv)


def generate_one(cfg: TrajGenConfig, seed: int, index: int, level: int | None = None) -> PlatformTrajectory:
    """Trajectory ``index`` of the set seeded by ``seed``; regenerable in isolation."""
    rng = np.random.default_rng([seed, index])
    n = int(level) if level is not None else int(rng.choice(cfg.waypoint_counts))
    times, values = sample_waypoints(cfg, n, rng)
    return fit_interpolating_spline(times, values)


def generate_set(cfg: TrajGenConfig, count: int, level: int | None = None, seed: int | None = None):
    if count < 1:
        raise ValueError("count must be >= 1")
    seed = cfg.seed if seed is None else seed
    return [generate_one(cfg, seed, i, level) for i in range(count)]


class TrajectoryBatch:
    """Several trajectories evaluated together, one query time per trajectory.

    Segments are padded so that the simulator can evaluate ``N`` platforms with a handful of
    array operations instead of ``N`` Python calls.
    """

    def __init__(self, trajs: Sequence[PlatformTrajectory]):
        self.trajs = list(trajs)
        n = len(self.trajs)
        s = max(len(tr.times) for tr in self.trajs) - 1
        self.knots = np.full((n, s + 1), np.inf)
        self.coeffs = np.zeros((n, s, 4, 6))
        self.nseg = np.zeros(n, dtype=int)
        for i, tr in enumerate(self.trajs):
            k = len(tr.times) - 1
            self.knots[i, : k + 1] = tr.times
            self.coeffs[i, :k] = tr.coeffs
            self.nseg[i] = k
        self.start = self.knots[:, 0].copy()
        self.end = np.array([tr.times[-1] for tr in self.trajs])

    def replace(self, i: int, traj: PlatformTrajectory) -> None:
        k = len(traj.times) - 1
        if k > self.coeffs.shape[1]:
            pad = k - self.coeffs.shape[1]
            self.knots = np.concatenate([self.knots, np.full((len(self.trajs), pad), np.inf)], 1)
            self.coeffs = np.concatenate([self.coeffs, np.zeros((len(self.trajs), pad, 4, 6))], 1)
        self.trajs[i] = traj
        self.knots[i] = np.inf
        self.knots[i, : k + 1] = traj.times
        self.coeffs[i] = 0.0
        self.coeffs[i, :k] = traj.coeffs
        self.nseg[i] = k
        self.start[i] = traj.times[0]
        self.end[i] = traj.times[-1]

    def evaluate(self, t, der: int = 0) -> np.ndarray:
        """``(N, 6)`` values at per-trajectory times ``t`` (clamped into each domain)."""
        t = np.clip(np.asarray(t, dtype=float), self.start, self.end)
        idx = (self.knots[:, 1:] <= t[:, None]).sum(axis=1)
        idx = np.minimum(idx, self.nseg - 1)
        rows = np.arange(len(t))
        c = self.coeffs[rows, idx]
        u = (t - self.knots[rows, idx])[:, None]
        a, b, cc, d = c[:, 0], c[:, 1], c[:, 2], c[:, 3]
        if der == 0:
            return a + u * (b + u * (cc + u * d))
        if der == 1:
            return b + u * (2 * cc + 3 * u * d)
        if der == 2:
            return 2 * cc + 6 * u * d
        raise ValueError("der must be in 0..2")


# ---------------------------------------------------------------- files

def waypoint_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".waypoints.csv")


def save_trajectory(traj: PlatformTrajectory, path, rate: float = 100.0) -> tuple[Path, Path]:
    """Write the sampled table ``t,x,y,z,roll,pitch,yaw`` and a knot sidecar next to it."""
    path = Path(path)
    header = ["t", *DOF_NAMES]
    t, vals = traj.sample(rate)
    _write_table(path, header, np.column_stack([t, vals]))
    side = waypoint_path(path)
    _write_table(side, header, np.column_stack([traj.times, traj.waypoints]))
    return path, side


def load_trajectory(path) -> PlatformTrajectory:
    """Refit a trajectory from the sidecar of a file written by :func:`save_trajectory`."""
    rows = _read_table(waypoint_path(path))
    return fit_interpolating_spline(rows[:, 0], rows[:, 1:])


def read_samples(path) -> np.ndarray:
    return _read_table(Path(path))


def _write_table(path: Path, header, rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) for x in r])


def _read_table(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:1] != ["t"]:
            raise ValueError(f"{path}: unexpected header {header}")
        return np.array([[float(x) for x in row] for row in r], dtype=float)


def write_manifest(path, entries: list[dict], meta: dict) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump({"meta": meta, "entries": entries}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
