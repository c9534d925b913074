"""Rollout collection and the training loop (collect, GAE, PPO, adaptation, curriculum)."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import env as E
from .. import nets as N
from .agent import BalanceAgent
from .config import TrainConfig, dump_config, parse_config
from .ppo import (CurriculumState, RolloutBuffer, TrainingDivergence, compute_gae, curriculum_tick, ppo_update,
                  roa_update)

METRIC_COLUMNS = ("iteration", "level", "window_success", "episodes", "successes", "mean_reward",
                  "policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac", "grad_norm",
                  "L_exp", "L_imp", "collect_s", "update_s") + tuple(f"r_{k}" for k in E.REWARD_TERMS)


@dataclass
class Outcome:
    env: int
    level: int
    success: bool
    steps: int


def collect_rollouts(env: E.BalanceEnv, agent: BalanceAgent, horizon: int, rng: np.random.Generator,
                     gamma: float = 0.99, reward_scale: float = 1.0, env_levels=None):
    """Step every environment ``horizon`` times with sampled actions on the privileged path.

    Finished environments are reset immediately. Time-limit terminations fold
    ``gamma * V(final state)`` into the last reward. Returns ``(buffer, outcomes, last_value)``.
    """
    if env.state is None or env.done.any():
        env.reset(np.flatnonzero(env.done))
    if env_levels is None:
        env_levels = np.full(env.n, env.level if env.level is not None else -1)
    buf = RolloutBuffer(horizon, env.n)
    outcomes = []
    for _ in range(horizon):
        o, hist = env.obs.copy(), env.history.copy()
        xe, xi, ua = env.explicit_params(), env.implicit_params(), env.alignment()
        mean = agent.act_privileged(o, hist, xe, xi, ua)
        a, logp = N.sample_action(mean, agent.log_std, rng)
        v = agent.value_np(o, xe, xi)
        _, rew, done, info = env.step(a)
        r = rew.total * reward_scale
        if info.timeout.any():
            r = r + gamma * np.where(info.timeout, agent.value_np(env.obs, info.x_exp, info.x_imp), 0.0)
        buf.add(o=o, o_hist=hist, x_exp=xe, x_imp=xi, u_aln=ua, a=a, log_prob=logp, reward=r, value=v,
                done=done, terms=rew.stack())
        finished = np.flatnonzero(done)
        for i in finished:
            outcomes.append(Outcome(int(i), int(env_levels[i]), bool(info.success[i]), int(env.steps[i])))
        if len(finished):
            env.reset(finished)
            env_levels[finished] = env.level if env.level is not None else -1
    buf.finalize()
    last_value = agent.value_np(env.obs, env.explicit_params(), env.implicit_params())
    return buf, outcomes, last_value


class Trainer:
    """Holds networks, optimizers, environments and curriculum for one training run."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.spec = cfg.net_spec()
        seed = cfg.run.seed
        self.store = N.init_params(self.spec, seed)
        self.agent = BalanceAgent(self.spec, self.store)
        self.opt = N.Adam(self.store, self.agent.policy_params, lr=cfg.ppo.lr, max_grad_norm=cfg.ppo.max_grad_norm)
        self.roa_opt = N.Adam(self.store, self.agent.adapt_params, lr=cfg.roa.lr,
                              max_grad_norm=cfg.roa.max_grad_norm)
        self.curriculum = CurriculumState.start(cfg.curriculum)
        self.iteration = 0
        self._make_env(seed)

    def _make_env(self, seed):
        self.env = E.BalanceEnv(self.cfg.run.n_envs, self.cfg.env_config(), seed=seed, level=self.curriculum.level)
        self.env_levels = np.full(self.env.n, self.curriculum.level)
        self.rng = np.random.default_rng([seed, 7])

    def iterate(self) -> dict:
        cfg = self.cfg
        t0 = time.perf_counter()
        buf, outcomes, last_value = collect_rollouts(self.env, self.agent, cfg.ppo.horizon, self.rng, cfg.ppo.gamma,
                                                     cfg.ppo.reward_scale, self.env_levels)
        t1 = time.perf_counter()
        buf.advantages, buf.returns = compute_gae(buf.data["reward"], buf.data["value"], buf.data["done"],
                                                  last_value, cfg.ppo.gamma, cfg.ppo.lam)
        losses = ppo_update(buf, self.agent, self.opt, cfg.ppo, self.rng)
        adapt = roa_update(buf, self.agent, self.roa_opt, cfg.roa, self.rng)
        t2 = time.perf_counter()
        current = [o.success for o in outcomes if o.level == self.curriculum.level]
        self.curriculum = curriculum_tick(self.curriculum, current)
        self.env.level = self.curriculum.level
        self.iteration += 1
        row = {"iteration": self.iteration, "level": self.curriculum.level,
               "window_success": self.curriculum.success_rate, "episodes": len(outcomes),
               "successes": int(sum(o.success for o in outcomes)),
               "mean_reward": float(buf.data["reward"].mean()), **losses, **adapt,
               "collect_s": t1 - t0, "update_s": t2 - t1}
        terms = buf.data["terms"].reshape(-1, len(E.REWARD_TERMS)).mean(0)
        row.update({f"r_{k}": float(v) for k, v in zip(E.REWARD_TERMS, terms)})
        return row

    # -- checkpoints
    def checkpoint_arrays(self) -> dict:
        arrays = dict(self.store.params)
        for prefix, opt in (("opt.ppo", self.opt), ("opt.roa", self.roa_opt)):
            arrays.update({f"{prefix}.{k}": v for k, v in opt.state_arrays().items()})
        return arrays

    def save(self, path) -> None:
        meta = {"iteration": self.iteration, "level": self.curriculum.level,
                "window": [int(b) for b in self.curriculum.window], "ppo_t": self.opt.t, "roa_t": self.roa_opt.t,
                "config": dump_config(self.cfg)}
        N.save_checkpoint(path, self.checkpoint_arrays(), self.spec, meta)

    @classmethod
    def resume(cls, path) -> "Trainer":
        """Continue from a checkpoint. Episodes in flight are not stored, so environments restart
        with a generator seeded from (run seed, iteration)."""
        arrays, spec, meta = N.load_checkpoint(path)
        cfg = parse_config(meta["config"])
        tr = cls(cfg)
        if spec != tr.spec:
            raise N.CheckpointError("checkpoint network spec does not match its config")
        for k in tr.store.params:
            tr.store.set(k, arrays[k])
        tr.opt.load_state_arrays({k[len("opt.ppo."):]: v for k, v in arrays.items() if k.startswith("opt.ppo.")},
                                 meta["ppo_t"])
        tr.roa_opt.load_state_arrays({k[len("opt.roa."):]: v for k, v in arrays.items()
                                      if k.startswith("opt.roa.")}, meta["roa_t"])
        tr.curriculum = CurriculumState(meta["level"], tuple(bool(b) for b in meta["window"]), cfg.curriculum)
        tr.iteration = meta["iteration"]
        tr._make_env(int(np.random.SeedSequence([cfg.run.seed, tr.iteration]).generate_state(1)[0]))
        return tr


def load_policy(path):
    """``(BalanceAgent, meta)`` from a training checkpoint (optimizer state ignored)."""
    arrays, spec, meta = N.load_checkpoint(path)
    if spec is None:
        raise N.CheckpointError(f"{path}: no network spec stored")
    store = N.store_from_arrays(arrays, N.NETWORKS)
    return BalanceAgent(spec, store), meta


def train(cfg: TrainConfig | str | Path, out_dir, iterations: int | None = None, resume=None, progress=None,
          timing: bool = True):
    """Run training, writing ``config.ini``, ``metrics.csv`` and checkpoints under ``out_dir``.

    Returns the :class:`Trainer`. ``progress(row)`` is called after every iteration. With
    ``timing=False`` the wall-clock columns are left out so the outputs are reproducible bytes.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = Trainer.resume(resume)
        cfg = trainer.cfg
    else:
        if not isinstance(cfg, TrainConfig):
            cfg = parse_config(Path(cfg).read_text(), str(cfg))
        trainer = Trainer(cfg)
    (out / "config.ini").write_text(dump_config(cfg))
    total = cfg.run.iterations if iterations is None else iterations
    metrics = out / "metrics.csv"
    fresh = resume is None or not metrics.exists()
    with open(metrics, "w" if fresh else "a", newline="") as f:
        columns = [c for c in METRIC_COLUMNS if timing or not c.endswith("_s")]
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        if fresh:
            writer.writeheader()
        while trainer.iteration < total:
            try:
                row = trainer.iterate()
            except TrainingDivergence:
                trainer.save(out / "checkpoints" / "divergence.ckpt")
                raise
            writer.writerow({k: _fmt(v) for k, v in row.items()})
            f.flush()
            if progress is not None:
                progress(row)
            if trainer.iteration % cfg.run.checkpoint_every == 0 or trainer.iteration == total:
                path = out / "checkpoints" / f"iter_{trainer.iteration:05d}.ckpt"
                trainer.save(path)
                trainer.save(out / "checkpoints" / "last.ckpt")
    return trainer


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v
