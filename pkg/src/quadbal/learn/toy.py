"""A one-dimensional velocity-matching task for checking the PPO machinery in isolation.

A point mass must bring its velocity to a per-episode target. Observation ``(v, v_target)``,
action = velocity change per step (clipped to ±1), reward ``-|v - v_target|``.
"""
from __future__ import annotations

import numpy as np

from .. import nets as N
from .config import PpoConfig
from .ppo import RolloutBuffer, compute_gae, ppo_update


class ToyVelocityEnv:
    def __init__(self, n: int, seed: int = 0, episode_len: int = 20, gain: float = 0.5):
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.episode_len = episode_len
        self.gain = gain
        self.v = np.zeros(n)
        self.target = np.zeros(n)
        self.t = np.zeros(n, dtype=int)
        self.reset(np.arange(n))

    def reset(self, idx):
        self.v[idx] = 0.0
        self.target[idx] = self.rng.uniform(-1.0, 1.0, len(idx))
        self.t[idx] = 0

    @property
    def obs(self):
        return np.stack([self.v, self.target], 1)

    def step(self, a):
        self.v = self.v + self.gain * np.clip(a[:, 0], -1.0, 1.0)
        r = -np.abs(self.v - self.target)
        self.t += 1
        done = self.t >= self.episode_len
        return r, done


class ToyAgent:
    def __init__(self, seed: int = 0, hidden: int = 32):
        rng = np.random.default_rng(seed)
        self.store = N.ParamStore()
        for net, out, gain in (("pi", 1, 0.01), ("vf", 1, 1.0)):
            sizes = (2, hidden, hidden, out)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                g = gain if i == len(sizes) - 2 else np.sqrt(2.0)
                self.store.add(f"{net}.{i}.w", rng.normal(0.0, g / np.sqrt(a), (a, b)))
                self.store.add(f"{net}.{i}.b", np.zeros(b))
        self.store.add("pi.log_std", np.full(1, -0.5))
        self.policy_params = list(self.store.params)

    def policy(self, tape, mb):
        return N.mlp(tape, self.store, "pi", mb["o"], 3, act=N.tanh), tape.param(self.store, "pi.log_std")

    def value(self, tape, mb):
        return N.reshape(N.mlp(tape, self.store, "vf", mb["o"], 3, act=N.tanh), (len(mb["o"]),))


def train_toy(iterations: int = 200, n_envs: int = 32, horizon: int = 20, seed: int = 0, cfg: PpoConfig | None = None):
    """Returns the mean per-step reward of every iteration's rollouts."""
    cfg = cfg or PpoConfig(horizon=horizon, lr=3e-3, entropy_coef=0.0)
    env = ToyVelocityEnv(n_envs, seed)
    agent = ToyAgent(seed)
    opt = N.Adam(agent.store, agent.policy_params, lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    rng = np.random.default_rng([seed, 1])
    history = []
    for _ in range(iterations):
        buf = RolloutBuffer(cfg.horizon, n_envs)
        for _ in range(cfg.horizon):
            o = env.obs
            t = N.Tape(False)
            mean, log_std = agent.policy(t, {"o": o})
            a, logp = N.sample_action(mean.value, log_std.value, rng)
            v = agent.value(t, {"o": o}).value
            r, done = env.step(a)
            buf.add(o=o, a=a, log_prob=logp, reward=r, value=v, done=done)
            env.reset(np.flatnonzero(done))
        buf.finalize()
        last = agent.value(N.Tape(False), {"o": env.obs}).value
        buf.advantages, buf.returns = compute_gae(buf.data["reward"], buf.data["value"], buf.data["done"], last,
                                                  cfg.gamma, cfg.lam)
        ppo_update(buf, agent, opt, cfg, rng)
        history.append(float(buf.data["reward"].mean()))
    return np.array(history)
