"""``quadbal`` command-line tool: gen-bench, train, eval, export-plots.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error. The default output
root is ``$QUADBAL_OUT`` (else ``./runs``). Run directories are append-only: a command refuses
to write into a non-empty directory unless ``--force`` is given. ``--threads 1`` pins BLAS to
one thread and drops wall-clock fields so that re-runs produce identical bytes.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
import time
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
PLOT_KINDS = ("stats", "estimator-traces", "training-curves")


class CliError(RuntimeError):
    pass


def _out_root() -> Path:
    return Path(os.environ.get("QUADBAL_OUT", "runs"))


def _prepare_out(path: Path, force: bool, allow_existing: bool = False) -> Path:
    if path.exists() and any(path.iterdir()) and not (force or allow_existing):
        raise CliError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, args, extra: dict | None = None) -> None:
    deterministic = args.threads == 1
    manifest = {
        "tool": "quadbal", "version": __version__, "command": args.command, "argv": args.argv,
        "seed": args.seed, "threads": args.threads,
        "started": None if deterministic else time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "layout": extra.pop("layout", {}) if extra else {},
        **(extra or {}),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen_bench(args) -> int:
    from . import evalbench as EB
    seed = 0 if args.seed is None else args.seed
    tag = f"-L{args.level}" if args.level is not None else ""
    out = _prepare_out(Path(args.out) if args.out else _out_root() / f"bench-{args.ranges}{tag}-{args.count}-s{seed}",
                       args.force)
    bench = EB.build_benchmark(args.count, seed, args.ranges, out, static=args.static,
                               write_trajectories=not args.no_trajectories, level=args.level)
    _write_manifest(out, args, {"layout": {"manifest": "manifest.json", "trajectories": "trajectories/"}})
    nw = bench.column("n_waypoints")
    print(f"wrote {len(bench)} episodes to {out} (waypoints {int(nw.min())}..{int(nw.max())}, "
          f"mean length {bench.column('path_length').mean():.3f} m, "
          f"mean speed {bench.column('mean_speed').mean():.3f} m/s)")
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import replace

    from .learn import config as C
    from .learn.train import train
    resume = Path(args.resume) if args.resume else None
    if resume is None and not args.config:
        raise C.ConfigError("train needs --config (or --resume)")
    cfg = None
    if resume is None:
        path = Path(args.config)
        if not path.exists():
            raise C.ConfigError(f"{path}: config file not found")
        cfg = C.parse_config(path.read_text(), str(path))
        if args.seed is not None:
            cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    seed = cfg.run.seed if cfg is not None else args.seed
    out = Path(args.out) if args.out else _out_root() / f"train-s{seed}"
    _prepare_out(out, args.force, allow_existing=resume is not None)

    def progress(row):
        if row["iteration"] % max(1, args.log_every) == 0:
            print(f"iter {row['iteration']:5d} level {row['level']:2d} success {row['window_success']:.3f} "
                  f"reward {row['mean_reward']:.4f} L_exp {row['L_exp']:.4f} L_imp {row['L_imp']:.4f}", flush=True)

    trainer = train(cfg, out, iterations=args.iterations, resume=resume, progress=progress,
                    timing=args.threads != 1)
    _write_manifest(out, args, {"config": C.dump_config(trainer.cfg), "resumed_from": str(resume) if resume else None,
                                "iterations": trainer.iteration,
                                "layout": {"config": "config.ini", "metrics": "metrics.csv",
                                           "checkpoints": "checkpoints/"}})
    print(f"trained to iteration {trainer.iteration}; checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evalbench as EB
    from .learn.train import load_policy
    if not args.checkpoint and not args.baseline:
        raise CliError("eval needs --checkpoint and/or --baseline")
    bench = EB.load_benchmark(args.bench)
    if args.episodes:
        bench = bench.head(args.episodes)
    out = _prepare_out(Path(args.out) if args.out else _out_root() / f"eval-{Path(args.bench).name}", args.force)
    kw = {"batch_size": args.batch, "shards": args.shards}
    reports, est = [], None
    for name in args.baseline or []:
        if name == "stand-still":
            reports.append(EB.run_stand_still(bench, **kw))
        else:
            reports.append(EB.run_random(bench, seed=0 if args.seed is None else args.seed, **kw))
    if args.checkpoint:
        agent, _ = load_policy(args.checkpoint)
        log = out / "states.csv" if args.state_log else None
        reports.append(EB.run_policy(agent, bench, "estimated", state_log=log, **kw))
        if args.mode == "privileged":
            reports.append(EB.run_policy(agent, bench, "privileged", **kw))
        est = EB.estimator_accuracy(agent, bench, traces=args.traces, batch_size=args.batch)
    meta = {"bench": str(args.bench), "episodes": len(bench), "checkpoint": args.checkpoint}
    EB.emit_report(reports, out, bench=bench, estimator=est, meta=meta)
    _write_manifest(out, args, {"layout": {"table": "report.txt", "csv": "report.csv", "plots": "plotdata/"}})
    sys.stdout.write((out / "report.txt").read_text())
    return EXIT_OK


def _tidy(rows, path: Path, header) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_export_plots(args) -> int:
    from . import evalbench as EB
    run = Path(args.run)
    if not run.is_dir() or not any(run.iterdir()):
        raise FileNotFoundError(f"run directory {run} not found or empty")
    out = Path(args.out) if args.out else run / "plots"
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "stats":
        bench_path = run / "manifest.json"
        if not bench_path.exists() and (run / "report_meta.json").exists():
            bench_path = Path(json.loads((run / "report_meta.json").read_text())["bench"])
        if not bench_path.exists():
            raise FileNotFoundError(f"no benchmark manifest found for {run}")
        paths = EB.write_stats(EB.load_benchmark(bench_path), out)
    elif args.what == "estimator-traces":
        src = run / "plotdata" / "estimator_traces.csv"
        if not src.exists():
            raise FileNotFoundError(f"{src} not found (run eval with --checkpoint and --traces > 0)")
        rows = []
        for r in _read_csv(src):
            for name in EB.E.EXP_NAMES:
                rows.append([int(float(r["episode"])), int(float(r["step"])), name, r[f"{name}_hat"],
                             r[f"{name}_true"]])
        paths = [_tidy(rows, out / "estimator_traces_long.csv", ("episode", "step", "quantity", "predicted", "truth"))]
    else:
        src = run / "metrics.csv"
        if not src.exists():
            raise FileNotFoundError(f"{src} not found (not a training run?)")
        rows = [[r["iteration"], k, v] for r in _read_csv(src) for k, v in r.items() if k != "iteration"]
        paths = [_tidy(rows, out / "training_curves_long.csv", ("iteration", "metric", "value"))]
    for p in paths:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global random seed (overrides config)")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count; 1 selects the deterministic mode")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    common.add_argument("--out", default=None, help="output directory (default under $QUADBAL_OUT or ./runs)")

    p = argparse.ArgumentParser(prog="quadbal", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"quadbal {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-bench", parents=[common], help="generate an evaluation benchmark set")
    g.add_argument("--count", type=int, default=500, help="number of episodes (default 500)")
    g.add_argument("--ranges", choices=("train", "test"), default="test", help="parameter ranges")
    g.add_argument("--static", action="store_true", help="level, motionless platform for every episode")
    g.add_argument("--level", type=int, default=None, help="fix the waypoint count (curriculum level)")
    g.add_argument("--no-trajectories", action="store_true", help="write only the manifest")
    g.set_defaults(func=cmd_gen_bench)

    t = sub.add_parser("train", parents=[common], help="train a balancing policy")
    t.add_argument("--config", help="INI training configuration")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--iterations", type=int, default=None, help="stop at this iteration (default from config)")
    t.add_argument("--log-every", type=int, default=10, help="print progress every N iterations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate policies and baselines on a benchmark")
    e.add_argument("--bench", required=True, help="benchmark directory or manifest")
    e.add_argument("--checkpoint", help="trained checkpoint")
    e.add_argument("--mode", choices=("estimated", "privileged"), default="estimated",
                   help="privileged adds the ground-truth-input diagnostic row")
    e.add_argument("--baseline", action="append", choices=("stand-still", "random"), help="baseline(s) to run")
    e.add_argument("--episodes", type=int, default=None, help="evaluate only the first N episodes")
    e.add_argument("--batch", type=int, default=100, help="episodes simulated together")
    e.add_argument("--shards", type=int, default=10, help="shards for the metric standard deviations")
    e.add_argument("--traces", type=int, default=5, help="episodes recorded as estimator time series")
    e.add_argument("--state-log", action="store_true", help="write per-step states of the policy run")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-plots", parents=[common], help="export tidy plot-data CSVs from a run")
    x.add_argument("--run", required=True, help="run directory")
    x.add_argument("--what", required=True, choices=PLOT_KINDS, help="which plot data")
    x.set_defaults(func=cmd_export_plots)
    return p


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    from .learn.config import ConfigError
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    if args.threads is not None and args.threads < 1:
        print("quadbal: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"quadbal: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"quadbal: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
