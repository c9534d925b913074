"""Evaluation protocol: benchmark sets, the shared episode runner, baselines and reports.

Every method is evaluated by the same runner on the same episode specifications (trajectory,
intrinsics, platform gains, initial yaw), so results on one benchmark are paired. Deviation,
height and power metrics are pooled over the steps before the first collision; the collision
flag itself comes from the environment's termination rule.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as E
from . import simcore as sc
from . import spatial
from . import trajgen as tg

BENCH_VERSION = 1
METRICS = ("collision_rate", "height_violation_rate", "position_deviation", "rotation_deviation", "power")
TABLE_HEADERS = ("collision %", "height %", "position m", "rotation rad", "power W")


class IncompatibleCheckpoint(ValueError):
    pass


# ---------------------------------------------------------------- benchmark sets

def static_trajectory(duration: float = 10.0, n: int = 4) -> tg.PlatformTrajectory:
    """A level platform resting at the origin."""
    return tg.fit_interpolating_spline(np.linspace(0.0, duration, n), np.zeros((n, 6)))


@dataclass
class BenchmarkSet:
    """Episode specifications regenerable from ``seed``; ``entries`` mirror the manifest."""

    seed: int
    ranges: str = "test"
    static: bool = False
    entries: list = field(default_factory=list)
    manifest_path: Path | None = None
    level: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def trajgen_config(self) -> tg.TrajGenConfig:
        make = tg.TrajGenConfig.testing if self.ranges == "test" else tg.TrajGenConfig.training
        return make(seed=self.seed)

    def trajectory(self, index: int) -> tg.PlatformTrajectory:
        if self.static:
            return static_trajectory(self.trajgen_config.duration)
        return tg.generate_one(self.trajgen_config, self.seed, index, self.level)

    def episode(self, index: int):
        """``(trajectory, intrinsics, platform kp, platform kd, yaw)`` for benchmark episode ``index``."""
        rng = np.random.default_rng([self.seed, index, 1])
        params = E.sample_intrinsics(self.ranges, rng, 1)
        kp, kd = E.sample_platform_gains(self.ranges, rng, 1)
        yaw = float(spatial.canonicalize_angle(rng.uniform(-np.pi, np.pi)))
        return self.trajectory(index), params, kp[0], kd[0], yaw

    @property
    def indices(self) -> np.ndarray:
        return np.array([e["index"] for e in self.entries], dtype=int)

    def column(self, key: str) -> np.ndarray:
        return np.array([e[key] for e in self.entries], dtype=float)

    def subset(self, positions) -> "BenchmarkSet":
        return BenchmarkSet(self.seed, self.ranges, self.static, [self.entries[i] for i in positions],
                            self.manifest_path, self.level)

    def head(self, n: int) -> "BenchmarkSet":
        return self.subset(range(min(n, len(self))))


def _entry(bench: BenchmarkSet, index: int) -> dict:
    traj, params, kp, kd, yaw = bench.episode(index)
    st = tg.compute_stats(traj)
    return {"index": index, "n_waypoints": traj.n_waypoints, "path_length": st.path_length,
            "mean_speed": st.mean_speed, "mean_curvature": st.mean_curvature, "yaw": yaw,
            "intrinsics": params.to_vector()[0].tolist(), "platform_kp": kp.tolist(), "platform_kd": kd.tolist()}


def build_benchmark(count: int, seed: int, ranges: str = "test", out_dir=None, static: bool = False,
                    write_trajectories: bool = True, level: int | None = None) -> BenchmarkSet:
    """Draw ``count`` evaluation episodes. With ``out_dir`` the manifest (and optionally one
    trajectory file per episode) is written there. ``level`` fixes the waypoint count of every
    trajectory, as in a curriculum level."""
    if count < 1:
        raise ValueError("count must be >= 1")
    E.ranges_for(ranges)
    bench = BenchmarkSet(int(seed), ranges, static, level=None if level is None else int(level))
    bench.entries = [_entry(bench, i) for i in range(count)]
    if out_dir is not None:
        out = Path(out_dir)
        (out / "trajectories").mkdir(parents=True, exist_ok=True)
        for e in bench.entries:
            name = f"trajectories/traj_{e['index']:05d}.csv"
            if write_trajectories:
                tg.save_trajectory(bench.trajectory(e["index"]), out / name)
                e["file"] = name
        meta = {"version": BENCH_VERSION, "seed": bench.seed, "count": count, "ranges": ranges, "static": static,
                "level": bench.level,
                "waypoint_counts": list(bench.trajgen_config.waypoint_counts),
                "mean_path_length": float(bench.column("path_length").mean()),
                "mean_speed": float(bench.column("mean_speed").mean())}
        bench.manifest_path = tg.write_manifest(out / "manifest.json", bench.entries, meta)
    return bench


def load_benchmark(path) -> BenchmarkSet:
    """Read a manifest (or a directory containing ``manifest.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no benchmark manifest at {path}")
    m = tg.read_manifest(path)
    meta = m["meta"]
    if meta.get("version") != BENCH_VERSION:
        raise ValueError(f"{path}: unsupported benchmark version {meta.get('version')}")
    return BenchmarkSet(int(meta["seed"]), meta["ranges"], bool(meta["static"]), m["entries"], path,
                        meta.get("level"))


def stats_by_waypoint_count(counts, per_count: int, seed: int = 0, cfg: tg.TrajGenConfig | None = None) -> dict:
    """``count -> (path lengths, mean speeds)`` for ``per_count`` trajectories at each waypoint count."""
    cfg = cfg or tg.TrajGenConfig.testing(seed=seed)
    out = {}
    for n in counts:
        st = [tg.compute_stats(tg.generate_one(cfg, seed + 1000 * n, i, level=n)) for i in range(per_count)]
        out[n] = (np.array([s.path_length for s in st]), np.array([s.mean_speed for s in st]))
    return out


# ---------------------------------------------------------------- controllers

class StandStill:
    """Holds the nominal joint configuration (zero joint displacement)."""
    name = "stand_still"

    def __call__(self, env, live):
        return np.zeros((env.n, E.ACT_DIM))


class RandomPolicy:
    """Uniform random joint displacements within the action clamp."""
    name = "random"

    def __init__(self, seed: int = 0, scale: float = 0.6):
        self.rng = np.random.default_rng([seed, 42])
        self.scale = scale

    def __call__(self, env, live):
        return self.rng.uniform(-self.scale, self.scale, (env.n, E.ACT_DIM))


class PolicyController:
    """Deterministic policy mean on the deployment (``estimated``) or ground-truth (``privileged``) path."""

    def __init__(self, agent, mode: str = "estimated"):
        if mode not in ("estimated", "privileged"):
            raise ValueError(f"unknown mode {mode!r}")
        self.agent = agent
        self.mode = mode
        self.name = f"policy_{mode}"

    def __call__(self, env, live):
        if self.mode == "estimated":
            return self.agent.act_estimated(env.obs, env.history)[0]
        return self.agent.act_privileged(env.obs, env.history, env.explicit_params(), env.implicit_params(),
                                         env.alignment())


# ---------------------------------------------------------------- runner

@dataclass
class EpisodeLog:
    """Per-episode accumulators (sums over pre-collision steps)."""

    index: np.ndarray
    collided: np.ndarray
    steps: np.ndarray
    pre_steps: np.ndarray
    position: np.ndarray
    rotation: np.ndarray
    height: np.ndarray
    power: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "EpisodeLog":
        z = lambda dt=float: np.zeros(n, dtype=dt)  # noqa: E731
        return cls(z(int), z(bool), z(int), z(int), z(), z(), z(), z())

    def subset(self, sel) -> "EpisodeLog":
        return EpisodeLog(*(getattr(self, k)[sel] for k in self.__dataclass_fields__))


def run_episodes(bench: BenchmarkSet, controller, batch_size: int = 100, history: int = 20,
                 env_cfg: E.EnvConfig | None = None, observer=None, state_log=None) -> EpisodeLog:
    """Roll every benchmark episode with ``controller(env, live) -> actions``.

    Slots are refilled from the benchmark queue as episodes end. ``observer(env, live, episode)``
    is called before every step with the slot-to-episode map (``-1`` for idle slots).
    """
    n_ep = len(bench)
    if n_ep == 0:
        raise ValueError("empty benchmark")
    cfg = env_cfg or E.EnvConfig(ranges=bench.ranges, history=history)
    n = min(batch_size, n_ep)
    env = E.BalanceEnv(n, cfg)
    log = EpisodeLog.empty(n_ep)
    log.index[:] = bench.indices
    slot_ep = np.full(n, -1)
    yaw0 = np.zeros(n)
    queue = iter(range(n_ep))
    writer = _StateLog(state_log) if state_log is not None else None

    def load(slot):
        pos = next(queue, None)
        slot_ep[slot] = -1 if pos is None else pos
        spec = bench.episode(int(bench.entries[pos if pos is not None else 0]["index"]))
        env.reset_env(slot, *spec)

    for s in range(n):
        load(s)
    yaw0[:] = E.body_in_platform(env.state, env.plat)[1]
    try:
        while np.any(slot_ep >= 0):
            live = slot_ep >= 0
            if observer is not None:
                observer(env, live, slot_ep)
            _, _, done, info = env.step(controller(env, live))
            p, yaw = E.body_in_platform(env.state, env.plat)
            ok = live & ~info.collision
            ep = slot_ep[live]
            log.steps[ep] += 1
            log.collided[slot_ep[live & info.collision]] = True
            e_ok = slot_ep[ok]
            log.pre_steps[e_ok] += 1
            log.position[e_ok] += np.linalg.norm(p[ok, :2], axis=1)
            log.rotation[e_ok] += np.abs(spatial.canonicalize_angle(yaw[ok] - yaw0[ok]))
            log.height[e_ok] += info.height_violation[ok]
            log.power[e_ok] += info.power[ok]
            if writer is not None:
                writer.write(env, live, slot_ep)
            finished = np.flatnonzero(done)
            for s in finished:
                load(s)
            if len(finished):
                yaw0[finished] = E.body_in_platform(env.state, env.plat)[1][finished]
    finally:
        if writer is not None:
            writer.close()
    return log


class _StateLog:
    """Per-control-step rows of :data:`simcore.STATE_LOG_COLUMNS` with ``env`` = benchmark position."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(sc.STATE_LOG_COLUMNS)

    def write(self, env, live, slot_ep):
        idx = np.flatnonzero(live)
        rows = sc.state_log_rows(0, env.state, env.plat)[idx]
        rows[:, 0] = slot_ep[idx]
        rows[:, 1] = env.steps[idx]
        for r in rows:
            self.w.writerow([repr(float(x)) for x in r])

    def close(self):
        self.fh.close()


# ---------------------------------------------------------------- metrics

def _pooled(log: EpisodeLog) -> dict:
    steps = log.pre_steps.sum()
    div = (lambda x: float(x.sum() / steps)) if steps else (lambda x: float("nan"))
    return {"collision_rate": float(log.collided.mean()), "height_violation_rate": div(log.height),
            "position_deviation": div(log.position), "rotation_deviation": div(log.rotation),
            "power": div(log.power)}


@dataclass
class MetricsReport:
    name: str
    episodes: int
    collision_rate: float
    height_violation_rate: float
    position_deviation: float
    rotation_deviation: float
    power: float
    std: dict = field(default_factory=dict)
    log: EpisodeLog | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_log(cls, name: str, log: EpisodeLog, shards: int = 10) -> "MetricsReport":
        m = _pooled(log)
        k = max(1, min(shards, len(log.index)))
        per = [_pooled(log.subset(part)) for part in np.array_split(np.arange(len(log.index)), k)]
        std = {key: float(np.nanstd([p[key] for p in per], ddof=1)) if k > 1 else float("nan") for key in METRICS}
        return cls(name, len(log.index), **m, std=std, log=log)

    def values(self) -> tuple:
        return tuple(getattr(self, k) for k in METRICS)


def evaluate(bench: BenchmarkSet, controller, name: str | None = None, batch_size: int = 100, history: int = 20,
             shards: int = 10, state_log=None) -> MetricsReport:
    log = run_episodes(bench, controller, batch_size, history, state_log=state_log)
    return MetricsReport.from_log(name or getattr(controller, "name", "method"), log, shards)


def run_stand_still(bench: BenchmarkSet, **kw) -> MetricsReport:
    return evaluate(bench, StandStill(), "stand_still", **kw)


def run_random(bench: BenchmarkSet, seed: int = 0, **kw) -> MetricsReport:
    return evaluate(bench, RandomPolicy(seed), "random", **kw)


def _load_agent(checkpoint):
    from .learn.train import load_policy  # heavy import kept local
    if isinstance(checkpoint, (str, Path)):
        return load_policy(checkpoint)[0]
    return checkpoint


def check_compatible(spec, ablation=None) -> None:
    """Raise :class:`IncompatibleCheckpoint` naming the first mismatched dimension."""
    want = {"obs_dim": E.OBS_DIM, "imp_dim": E.IMP_DIM, "action_dim": E.ACT_DIM}
    if ablation is not None:
        want.update(exp_dim=ablation.exp_dim, aln_dim=0 if ablation.no_ac else E.ALN_DIM,
                    history_obs=ablation.history_obs)
    for k, v in want.items():
        if getattr(spec, k) != v:
            raise IncompatibleCheckpoint(f"checkpoint {k} = {getattr(spec, k)}, expected {v}")


def run_policy(checkpoint, bench: BenchmarkSet, mode: str = "estimated", ablation=None, **kw) -> MetricsReport:
    """Evaluate a trained policy (checkpoint path or agent) with its deterministic mean action."""
    agent = _load_agent(checkpoint)
    check_compatible(agent.spec, ablation)
    kw.setdefault("history", agent.spec.history)
    return evaluate(bench, PolicyController(agent, mode), f"policy_{mode}", **kw)


# ---------------------------------------------------------------- estimator accuracy

@dataclass
class EstimatorAccuracyReport:
    """Mean and std of per-step errors: L1 per explicit dimension, L2 for the implicit latent."""

    explicit_l1: np.ndarray
    explicit_std: np.ndarray
    implicit_l2: float
    implicit_std: float
    steps: int
    traces: np.ndarray | None = field(default=None, repr=False)

    def rows(self) -> list:
        out = [(n, "L1", float(m), float(s)) for n, m, s in zip(E.EXP_NAMES, self.explicit_l1, self.explicit_std)]
        out.append(("l_imp", "L2", self.implicit_l2, self.implicit_std))
        return out


TRACE_COLUMNS = ("episode", "step") + tuple(f"{n}_hat" for n in E.EXP_NAMES) + tuple(f"{n}_true" for n in E.EXP_NAMES)


def estimator_accuracy(checkpoint, bench: BenchmarkSet, estimator=None, traces: int = 0, batch_size: int = 100
                       ) -> EstimatorAccuracyReport:
    """Roll the deployment policy and compare estimates with ground truth at every step.

    ``estimator(o_hist, x_exp, l_imp) -> (x_hat, l_hat)`` overrides the trained estimators (the
    policy then acts on the overriding estimates). Explicit dimensions an ablated estimator
    does not produce are reported as NaN. The first ``traces`` benchmark episodes are
    recorded as time series in :data:`TRACE_COLUMNS` order.
    """
    agent = _load_agent(checkpoint)
    d = agent.spec.exp_dim
    sums = {"l1": np.zeros(E.EXP_DIM), "l1sq": np.zeros(E.EXP_DIM), "l2": 0.0, "l2sq": 0.0, "n": 0}
    rows = []

    class _Ctl:
        def __call__(self, env, live):
            o_hist = env.history
            x_true, l_true = env.explicit_params(), agent.latent_np(env.implicit_params())
            if estimator is None:
                x_hat, l_hat = agent.estimate_np(o_hist)
            else:
                x_hat, l_hat = estimator(o_hist, x_true, l_true)
            x_full = np.full((env.n, E.EXP_DIM), np.nan)
            if x_hat is not None:
                x_full[:, :d] = np.asarray(x_hat)[:, :d]
            err = np.abs(x_full - x_true)[live]
            e2 = np.linalg.norm(np.asarray(l_hat) - l_true, axis=1)[live]
            sums["l1"] += err.sum(0)
            sums["l1sq"] += (err ** 2).sum(0)
            sums["l2"] += e2.sum()
            sums["l2sq"] += (e2 ** 2).sum()
            sums["n"] += int(live.sum())
            if traces:
                for s in np.flatnonzero(live & (self.slot_ep < traces)):
                    rows.append(np.concatenate([[self.slot_ep[s], env.steps[s]], x_full[s], x_true[s]]))
            return agent.act_with_estimates(env.obs, o_hist, x_hat, l_hat)[0]

        def observe(self, env, live, slot_ep):
            self.slot_ep = slot_ep

    ctl = _Ctl()
    run_episodes(bench, ctl, batch_size, agent.spec.history, observer=ctl.observe)
    n = max(sums["n"], 1)
    mean = sums["l1"] / n
    l2 = sums["l2"] / n
    tr = None
    if traces:
        tr = np.array(rows).reshape(-1, len(TRACE_COLUMNS))
        tr = tr[np.lexsort((tr[:, 1], tr[:, 0]))]
    return EstimatorAccuracyReport(mean, np.sqrt(np.maximum(sums["l1sq"] / n - mean ** 2, 0.0)), float(l2),
                                   float(np.sqrt(max(sums["l2sq"] / n - l2 ** 2, 0.0))), sums["n"], tr)


# ---------------------------------------------------------------- reports

REPORT_COLUMNS = ("method", "episodes") + tuple(x for k in METRICS for x in (k, f"{k}_std"))


def _fmt(x) -> str:
    return repr(float(x))


def format_table(reports) -> str:
    head = ["method"] + list(TABLE_HEADERS)
    # the two rates are shown in percent, as their headers say
    scale = {"collision_rate": 100.0, "height_violation_rate": 100.0}
    body = [[r.name] + [f"{scale.get(k, 1.0) * v:.3f} ± {scale.get(k, 1.0) * r.std.get(k, float('nan')):.3f}"
                        for k, v in zip(METRICS, r.values())] for r in reports]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    line = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()  # noqa: E731
    return "\n".join([line(head), "  ".join("-" * w for w in widths)] + [line(b) for b in body]) + "\n"


def write_report_csv(reports, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            row = [r.name, r.episodes]
            for k, v in zip(METRICS, r.values()):
                row += [_fmt(v), _fmt(r.std.get(k, float("nan")))]
            w.writerow(row)
    return path


def read_report_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            std = {k: float(row[f"{k}_std"]) for k in METRICS}
            out.append(MetricsReport(row["method"], int(row["episodes"]), *(float(row[k]) for k in METRICS), std=std))
    return out


def _write_rows(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else (int(v) if isinstance(v, (int, np.integer)) else _fmt(v))
                        for v in r])
    return path


def trajectory_stat_rows(bench: BenchmarkSet, bins: int = 20):
    """``(summary rows, histogram rows)`` of path length and speed per waypoint count."""
    nw = bench.column("n_waypoints").astype(int)
    summary, hist = [], []
    for q in ("path_length", "mean_speed"):
        vals = bench.column(q)
        edges = np.linspace(0.0, float(vals.max()) if vals.max() > 0 else 1.0, bins + 1)
        for n in np.unique(nw):
            counts, _ = np.histogram(vals[nw == n], edges)
            hist += [(int(n), q, edges[i], edges[i + 1], int(c)) for i, c in enumerate(counts)]
    for n in np.unique(nw):
        sel = nw == n
        summary.append((int(n), int(sel.sum()), bench.column("path_length")[sel].mean(),
                        bench.column("mean_speed")[sel].mean()))
    return summary, hist


def write_stats(bench: BenchmarkSet, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary, hist = trajectory_stat_rows(bench)
    return [_write_rows(out / "trajectory_summary.csv", ("n_waypoints", "count", "mean_path_length", "mean_speed"),
                        summary),
            _write_rows(out / "trajectory_histogram.csv", ("n_waypoints", "quantity", "bin_low", "bin_high", "count"),
                        hist)]


def write_estimator_report(est: EstimatorAccuracyReport, out_dir) -> list:
    out = Path(out_dir)
    paths = [_write_rows(out / "estimator_accuracy.csv", ("quantity", "metric", "mean", "std"), est.rows())]
    if est.traces is not None:
        paths.append(_write_rows(out / "plotdata" / "estimator_traces.csv", TRACE_COLUMNS, est.traces))
    return paths


def emit_report(reports, out_dir, bench: BenchmarkSet | None = None, estimator: EstimatorAccuracyReport | None = None,
                meta: dict | None = None) -> list:
    """Write ``report.txt``, ``report.csv`` and ``plotdata/*.csv`` under ``out_dir``."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    out = Path(out_dir)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    text = format_table(reports)
    if estimator is not None:
        text += "\nestimator accuracy (mean ± std per step)\n"
        text += "".join(f"  {n:<12} {m:<3} {a:.4f} ± {s:.4f}\n" for n, m, a, s in estimator.rows())
    (out / "report.txt").write_text(text)
    paths = [out / "report.txt", write_report_csv(reports, out / "report.csv")]
    if bench is not None:
        paths += write_stats(bench, out / "plotdata")
    if estimator is not None:
        paths += write_estimator_report(estimator, out)
    if meta is not None:
        (out / "report_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        paths.append(out / "report_meta.json")
    return paths
