"""Training configuration: dataclasses plus an INI reader/writer.

Sections and keys mirror the dataclass fields below. Tuples are written as comma lists,
booleans as ``true``/``false``. Unknown sections or keys raise :class:`ConfigError` with the
offending line number.

``[sim]`` holds the physics settings and the per-episode environment settings
(``episode_duration``, ``action_clamp``, ``ranges``); ``[net]`` holds the network sizes.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .. import env as E
from .. import simcore as sc
from .. import trajgen as tg
from ..nets import NetSpec


class ConfigError(ValueError):
    pass


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    max_grad_norm: float = 1.0
    horizon: int = 12
    reward_scale: float = 0.02

    def __post_init__(self):
        if self.clip <= 0:
            raise ConfigError("ppo.clip must be > 0")
        if self.epochs < 1 or self.minibatches < 1 or self.horizon < 1:
            raise ConfigError("ppo.epochs, ppo.minibatches and ppo.horizon must be >= 1")
        if not 0.0 <= self.gamma < 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ConfigError("ppo.gamma must lie in [0, 1) and ppo.lam in [0, 1]")


@dataclass
class RoaConfig:
    lam: float = 0.2
    history: int = 20
    lr: float = 3e-4
    epochs: int = 5
    minibatches: int = 4
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("roa.lam must be >= 0")
        if self.history < 1 or self.epochs < 1 or self.minibatches < 1:
            raise ConfigError("roa.history, roa.epochs and roa.minibatches must be >= 1")


@dataclass
class CurriculumConfig:
    start: int = 5
    max_level: int = 15
    window: int = 200
    threshold: float = 0.8

    def __post_init__(self):
        if not 4 <= self.start <= self.max_level:
            raise ConfigError("curriculum levels must satisfy 4 <= start <= max_level")
        if self.window < 1 or not 0.0 < self.threshold <= 1.0:
            raise ConfigError("curriculum.window must be >= 1 and threshold in (0, 1]")


@dataclass
class AblationFlags:
    no_ac: bool = False
    no_ee_platform: bool = False
    no_ee: bool = False
    history_obs: bool = False

    def __post_init__(self):
        # the alignment command is built from the platform entries of x_exp
        if (self.no_ee or self.no_ee_platform) and not self.no_ac:
            raise ConfigError("ablation: no_ee and no_ee_platform require no_ac = true")

    @property
    def exp_dim(self) -> int:
        if self.no_ee:
            return 0
        return 7 if self.no_ee_platform else E.EXP_DIM


@dataclass
class NetConfig:
    actor_hidden: tuple = (512, 256, 128, 64)
    encoder_hidden: tuple = (64,)
    critic_hidden: tuple = (256, 128, 64)
    latent_dim: int = 8
    est_mlp: int = 32
    est_channels: int = 32
    est_kernel: int = 5
    est_stride: int = 2
    init_log_std: float = -1.0


@dataclass
class SimSection:
    dt: float = 0.02
    substeps: int = 4
    gravity: float = 9.81
    contact_stiffness: float = 1.0e4
    contact_damping: float = 100.0
    tangential_stiffness: float = 1.0e4
    tangential_damping: float = 100.0
    joint_inertia: float = 0.05
    torque_limit: float = 33.5
    episode_duration: float = 10.0
    action_clamp: float = 0.6
    ranges: str = "train"


@dataclass
class RewardSection:
    k: tuple = E.DEFAULT_K
    h_des: float = 0.37
    f_tol: float = 50.0
    t_swing_des: float = 0.1
    t_contact_des: float = 0.5
    abs_duration_terms: bool = False


@dataclass
class TrajgenSection:
    x: tuple = (-1.0, 1.0)
    y: tuple = (-1.0, 1.0)
    z: tuple = (0.0, 5.0)
    roll: tuple = (-0.7, 0.7)
    pitch: tuple = (-0.7, 0.7)
    yaw: tuple = (-2.6, 2.6)
    counts: tuple = (5, 15)
    duration: float = 10.0


@dataclass
class RunConfig:
    n_envs: int = 256
    iterations: int = 4000
    seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 1


@dataclass
class TrainConfig:
    sim: SimSection = field(default_factory=SimSection)
    reward: RewardSection = field(default_factory=RewardSection)
    trajgen: TrajgenSection = field(default_factory=TrajgenSection)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    roa: RoaConfig = field(default_factory=RoaConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    net: NetConfig = field(default_factory=NetConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        try:
            self.net_spec()
        except ValueError as exc:
            raise ConfigError(f"[net]/[roa]: {exc}") from None

    # -- derived objects
    def env_config(self) -> E.EnvConfig:
        s = self.sim
        sim = sc.SimConfig(dt=s.dt, substeps=s.substeps, gravity=s.gravity, contact_stiffness=s.contact_stiffness,
                           contact_damping=s.contact_damping, tangential_stiffness=s.tangential_stiffness,
                           tangential_damping=s.tangential_damping, joint_inertia=s.joint_inertia,
                           torque_limit=s.torque_limit)
        r = self.reward
        coeffs = E.RewardCoeffs(k=r.k, h_des=r.h_des, f_tol=r.f_tol, t_swing_des=r.t_swing_des,
                                t_contact_des=r.t_contact_des, gamma=self.ppo.gamma,
                                abs_duration_terms=r.abs_duration_terms)
        t = self.trajgen
        ranges = {name: tuple(float(v) for v in getattr(t, name)) for name in tg.DOF_NAMES}
        counts = tuple(range(int(t.counts[0]), int(t.counts[1]) + 1))
        traj = tg.TrajGenConfig(ranges=ranges, waypoint_counts=counts, duration=t.duration, seed=self.run.seed)
        return E.EnvConfig(sim=sim, reward=coeffs, trajgen=traj, ranges=s.ranges,
                           episode_duration=s.episode_duration, action_clamp=s.action_clamp,
                           history=self.roa.history)

    def net_spec(self) -> NetSpec:
        n = self.net
        return NetSpec(exp_dim=self.ablation.exp_dim, latent_dim=n.latent_dim,
                       aln_dim=0 if self.ablation.no_ac else E.ALN_DIM, history=self.roa.history,
                       action_scale=self.sim.action_clamp, history_obs=self.ablation.history_obs,
                       actor_hidden=n.actor_hidden, encoder_hidden=n.encoder_hidden, critic_hidden=n.critic_hidden,
                       est_mlp=n.est_mlp, est_channels=n.est_channels, est_kernel=n.est_kernel,
                       est_stride=n.est_stride, init_log_std=n.init_log_std)


SECTIONS = tuple(f.name for f in fields(TrainConfig))


# ---------------------------------------------------------------- INI round trip

def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(float(s)) if kind is int else kind(s) for s in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _line_numbers(text: str) -> dict:
    """``(section, key) -> line`` for every assignment, plus ``(section, None)`` for headers."""
    where, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), n)
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), n)
    return where


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    lines = _line_numbers(text)
    cfg = TrainConfig()
    built = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{lines.get((section, None), '?')}: unknown section [{section}]")
    for name in SECTIONS:
        current = getattr(cfg, name)
        kwargs = {f.name: getattr(current, f.name) for f in fields(current)}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                line = lines.get((name, key), "?")
                if key not in kwargs:
                    raise ConfigError(f"{source}:{line}: unknown key '{key}' in [{name}]")
                kwargs[key] = _parse(raw, kwargs[key], f"{source}:{line}")
        try:
            built[name] = type(current)(**kwargs)
        except (ConfigError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from None
    return TrainConfig(**built)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: TrainConfig) -> str:
    """Complete INI text; ``parse_config(dump_config(c)) == c``."""
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(section):
            out.append(f"{f.name} = {_format(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)
