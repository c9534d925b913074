"""PPO machinery, the estimator (online adaptation) losses and the curriculum scheduler.

The update functions are generic over an *agent* object that provides

* ``policy(tape, batch) -> (mean Var, log_std Var)``
* ``value(tape, batch) -> Var``
* ``policy_params`` / ``adapt_params``: parameter names owned by each optimizer
* ``store``: the :class:`~quadbal.nets.ParamStore`

and, for :func:`roa_losses`, ``estimate(tape, batch)`` and ``latent(tape, batch)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .. import nets as N
from .config import CurriculumConfig, PpoConfig, RoaConfig


class TrainingDivergence(FloatingPointError):
    """A loss or gradient became non-finite."""


# ---------------------------------------------------------------- rollout storage

class RolloutBuffer:
    """Per-step arrays for ``horizon`` steps of ``n_envs`` environments, stacked as ``(T, N, ...)``."""

    def __init__(self, horizon: int, n_envs: int):
        self.horizon = horizon
        self.n_envs = n_envs
        self._rows: dict[str, list] = {}
        self.data: dict[str, np.ndarray] = {}
        self.advantages = None
        self.returns = None

    def add(self, **arrays) -> None:
        for k, v in arrays.items():
            v = np.asarray(v)
            if v.shape[:1] != (self.n_envs,):
                raise ValueError(f"{k}: leading dimension must be n_envs={self.n_envs}, got {v.shape}")
            self._rows.setdefault(k, []).append(v)

    def __len__(self) -> int:
        rows = next(iter(self._rows.values()), [])
        return len(rows) * self.n_envs

    @property
    def steps(self) -> int:
        return len(next(iter(self._rows.values()), []))

    def finalize(self) -> None:
        self.data = {k: np.stack(v) for k, v in self._rows.items()}

    def flat(self) -> dict:
        """Every field flattened to ``(T*N, ...)`` (time-major)."""
        out = {k: v.reshape((-1,) + v.shape[2:]) for k, v in self.data.items()}
        if self.advantages is not None:
            out["advantages"] = self.advantages.reshape(-1)
            out["returns"] = self.returns.reshape(-1)
        return out

    def clear(self) -> None:
        self._rows.clear()
        self.data = {}
        self.advantages = self.returns = None


def minibatches(batch: dict, count: int, rng: np.random.Generator):
    n = len(next(iter(batch.values())))
    order = rng.permutation(n)
    for chunk in np.array_split(order, count):
        yield {k: v[chunk] for k, v in batch.items()}


# ---------------------------------------------------------------- advantages

def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float, normalize: bool = True):
    """Generalized advantage estimates over ``(T, N)`` arrays.

    ``dones[t]`` marks that the episode ended with transition ``t``; nothing is bootstrapped
    across it (time-limit bootstrapping, if wanted, is folded into the reward beforehand).
    Returns ``(advantages, returns)`` where ``returns = raw advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        next_v = last_value if t == rewards.shape[0] - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


# ---------------------------------------------------------------- PPO

def ppo_loss(tape: N.Tape, agent, mb: dict, cfg: PpoConfig):
    """Clipped surrogate + value loss - entropy bonus. Returns ``(loss, parts)``."""
    mean, log_std = agent.policy(tape, mb)
    logp = N.gaussian_log_prob(mb["a"], mean, log_std)
    ratio = N.exp(N.sub(logp, mb["log_prob"]))
    adv = mb["advantages"]
    surr = N.minimum(N.mul(ratio, adv), N.mul(N.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv))
    policy_loss = N.mul(N.mean(surr), -1.0)
    value_loss = N.mean(N.square(N.sub(agent.value(tape, mb), mb["returns"])))
    entropy = N.gaussian_entropy(log_std)
    loss = policy_loss + N.mul(value_loss, cfg.value_coef) - N.mul(entropy, cfg.entropy_coef)
    approx_kl = float(np.mean(mb["log_prob"] - logp.value))
    clip_frac = float(np.mean(np.abs(ratio.value - 1.0) > cfg.clip))
    return loss, {"policy_loss": float(policy_loss.value), "value_loss": float(value_loss.value),
                  "entropy": float(entropy.value), "approx_kl": approx_kl, "clip_frac": clip_frac}


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise TrainingDivergence(f"non-finite {what}")


def ppo_update(buffer: RolloutBuffer, agent, opt: N.Adam, cfg: PpoConfig, rng: np.random.Generator) -> dict:
    """``cfg.epochs`` passes of ``cfg.minibatches`` clipped-surrogate steps; returns mean losses."""
    if buffer.advantages is None:
        raise ValueError("compute advantages before the PPO update")
    batch = buffer.flat()
    logs = []
    for _ in range(cfg.epochs):
        for mb in minibatches(batch, cfg.minibatches, rng):
            tape = N.Tape()
            loss, parts = ppo_loss(tape, agent, mb, cfg)
            _check_finite(loss.value, "PPO loss")
            tape.backward(loss)
            try:
                parts["grad_norm"] = opt.step()
            except FloatingPointError:
                raise TrainingDivergence("non-finite PPO gradient") from None
            logs.append(parts)
    return {k: float(np.mean([p[k] for p in logs])) for k in logs[0]}


# ---------------------------------------------------------------- online adaptation

def roa_losses(tape: N.Tape, agent, mb: dict, lam: float):
    """``(L_exp, L_imp_estimator, L_imp_encoder)`` with the stop-gradients placed so that the
    second term trains only the implicit estimator and the third (already scaled by ``lam``)
    only the encoder. ``L_exp`` is ``None`` when the explicit estimator is ablated."""
    x_hat, l_hat = agent.estimate(tape, mb)
    l_enc = agent.latent(tape, mb)
    l_exp = None
    if x_hat is not None:
        l_exp = N.mean(N.sum_(N.square(N.sub(x_hat, agent.exp_target(mb))), -1))
    term1 = N.mean(N.sum_(N.square(N.sub(l_hat, N.stop_gradient(l_enc))), -1))
    term2 = N.mul(N.mean(N.sum_(N.square(N.sub(N.stop_gradient(l_hat), l_enc)), -1)), lam)
    return l_exp, term1, term2


def roa_update(buffer: RolloutBuffer, agent, opt: N.Adam, cfg: RoaConfig, rng: np.random.Generator) -> dict:
    """Estimator regression and encoder regularization; returns mean ``L_exp`` and ``L_imp``."""
    batch = buffer.flat()
    rec = {"L_exp": [], "L_imp": []}
    for _ in range(cfg.epochs):
        for mb in minibatches(batch, cfg.minibatches, rng):
            tape = N.Tape()
            l_exp, t1, t2 = roa_losses(tape, agent, mb, cfg.lam)
            loss = t1 + t2 if l_exp is None else l_exp + t1 + t2
            _check_finite(loss.value, "adaptation loss")
            tape.backward(loss)
            try:
                opt.step()
            except FloatingPointError:
                raise TrainingDivergence("non-finite adaptation gradient") from None
            rec["L_exp"].append(np.nan if l_exp is None else float(l_exp.value))
            rec["L_imp"].append(float(t1.value + t2.value))
    return {k: float(np.mean(v)) for k, v in rec.items()}


# ---------------------------------------------------------------- curriculum

@dataclass
class CurriculumState:
    level: int = 5
    window: tuple = ()
    cfg: CurriculumConfig = field(default_factory=CurriculumConfig)

    @classmethod
    def start(cls, cfg: CurriculumConfig | None = None) -> "CurriculumState":
        cfg = cfg or CurriculumConfig()
        return cls(cfg.start, (), cfg)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.window)) if self.window else float("nan")


def curriculum_tick(state: CurriculumState, outcomes) -> CurriculumState:
    """Feed finished-episode success flags (in order); advance one level per full window whose
    success rate reaches the threshold. Returns a new state."""
    level, window = state.level, list(state.window)
    cfg = state.cfg
    for ok in outcomes:
        window.append(bool(ok))
        if len(window) > cfg.window:
            window.pop(0)
        if len(window) == cfg.window and level < cfg.max_level and sum(window) >= cfg.threshold * cfg.window - 1e-9:
            level += 1
            window = []
    return replace(state, level=level, window=tuple(window))
