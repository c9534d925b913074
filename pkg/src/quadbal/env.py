"""Vectorized balancing environment on a moving platform.

Layouts (all batched over environments):

* observation ``o`` (44): specific force in the body frame (3), body angular velocity (3),
  world roll/pitch (2), ``q`` (12), ``qd`` (12), previous action (12)
* explicit parameters ``x_exp`` (13): foot contacts (4), body velocity (3), platform linear
  velocity (3) and platform angular velocity (3), all velocities in the body frame
* implicit parameters ``x_imp`` (29): see :meth:`quadbal.simcore.IntrinsicParams.to_vector`
* alignment command ``u_aln`` (3): platform minus body planar velocity and yaw rate
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import simcore as sc
from . import spatial
from . import trajgen as tg

OBS_DIM = 44
EXP_DIM = 13
IMP_DIM = 29
ALN_DIM = 3
ACT_DIM = 12
OBS_LAYOUT_VERSION = 1

OBS_SLICES = {
    "accel": slice(0, 3),
    "ang_vel": slice(3, 6),
    "tilt": slice(6, 8),
    "q": slice(8, 20),
    "qd": slice(20, 32),
    "prev_action": slice(32, 44),
}
EXP_NAMES = ("c_FL", "c_FR", "c_RL", "c_RR", "v_body_x", "v_body_y", "v_body_z",
             "v_plf_x", "v_plf_y", "v_plf_z", "w_plf_x", "w_plf_y", "w_plf_z")
REWARD_TERMS = ("task_0", "task_1", "task_2", "task_3", "task_4",
                "reg_0", "reg_1", "reg_2", "reg_3", "reg_4", "reg_5", "reg_6")

DEFAULT_K = (10.0, 3.0, 1.2, 2.0, 0.3, 1.0, 0.2, 4.0, 0.1, 1e-7,
             1e-4, 1e-4, 1e-7, 1e-6, 1e-5, 0.01, 2.0, 3.0, 0.05)


class EnvContractError(RuntimeError):
    """Raised when a finished environment is stepped without a reset."""


# ---------------------------------------------------------------- randomization

@dataclass(frozen=True)
class ParamRanges:
    body_mass: tuple
    com_shift: tuple
    friction: tuple
    kp: tuple
    kd: tuple
    platform_kp: tuple
    platform_kd: tuple


TRAIN_RANGES = ParamRanges((4.0, 5.0), (-0.2, 0.2), (0.8, 1.2), (36.0, 44.0), (0.8, 1.2), (1.0, 1.5), (0.02, 0.03))
TEST_RANGES = ParamRanges((3.5, 5.5), (-0.25, 0.25), (0.7, 1.3), (32.0, 48.0), (0.6, 1.4), (0.5, 2.0), (0.01, 0.04))


def ranges_for(which) -> ParamRanges:
    if isinstance(which, ParamRanges):
        return which
    if which == "train":
        return TRAIN_RANGES
    if which == "test":
        return TEST_RANGES
    raise ValueError(f"unknown range set {which!r} (expected 'train' or 'test')")


def _uniform(rng, bounds, shape):
    lo, hi = bounds
    if lo == hi:
        return np.full(shape, float(lo))
    return rng.uniform(lo, hi, shape)


def sample_intrinsics(which, rng: np.random.Generator, n: int = 1) -> sc.IntrinsicParams:
    """Uniform draws of the robot intrinsics for ``n`` environments."""
    r = ranges_for(which)
    return sc.IntrinsicParams(
        _uniform(rng, r.body_mass, n),
        _uniform(rng, r.com_shift, (n, 3)),
        _uniform(rng, r.friction, n),
        _uniform(rng, r.kp, (n, 12)),
        _uniform(rng, r.kd, (n, 12)),
    )


def sample_platform_gains(which, rng: np.random.Generator, n: int = 1):
    r = ranges_for(which)
    return _uniform(rng, r.platform_kp, (n, 6)), _uniform(rng, r.platform_kd, (n, 6))


# ---------------------------------------------------------------- features

def build_observation(state: sc.RobotState, prev_action, gravity: float = 9.81) -> np.ndarray:
    """IMU-style observation. The accelerometer reports specific force, so a robot at rest
    reads ``(0, 0, +g)``."""
    rot = state.rot
    spec_force = spatial.world_to_frame(state.acc + np.array([0.0, 0.0, gravity]), rot)
    w_b = spatial.world_to_frame(state.ang_vel, rot)
    tilt = spatial.rotation_to_euler(rot, check=False)[:, :2]
    return np.concatenate([spec_force, w_b, tilt, state.q, state.qd, prev_action], 1)


def build_explicit_params(state: sc.RobotState, plat: sc.PlatformSim) -> np.ndarray:
    """Ground-truth ``x_exp``: contacts plus body and platform twist in the body frame."""
    rot = state.rot
    return np.concatenate([
        state.contact.astype(float),
        spatial.world_to_frame(state.vel, rot),
        spatial.world_to_frame(plat.lin_vel, rot),
        spatial.world_to_frame(plat.ang_vel, rot),
    ], 1)


def alignment_command(x_exp, omega_body_z) -> np.ndarray:
    """``u_aln`` from an explicit-parameter vector (true or estimated) and the measured yaw rate."""
    x_exp = np.asarray(x_exp, dtype=float)
    return np.concatenate([x_exp[..., 7:9] - x_exp[..., 4:6],
                           (x_exp[..., 12] - np.asarray(omega_body_z, dtype=float))[..., None]], -1)


def true_alignment(state: sc.RobotState, plat: sc.PlatformSim) -> np.ndarray:
    w_b = spatial.world_to_frame(state.ang_vel, state.rot)
    return alignment_command(build_explicit_params(state, plat), w_b[:, 2])


def body_in_platform(state: sc.RobotState, plat: sc.PlatformSim):
    """Base position and yaw expressed in the platform frame."""
    p = plat.to_platform(state.pos[:, None, :])[:, 0]
    rel = np.einsum("nji,njk->nik", plat.rot, state.rot)
    yaw = np.arctan2(rel[:, 1, 0], rel[:, 0, 0])
    return p, yaw


# ---------------------------------------------------------------- reward

@dataclass
class RewardCoeffs:
    k: tuple = DEFAULT_K
    h_des: float = 0.37
    f_tol: float = 50.0
    t_swing_des: float = 0.1
    t_contact_des: float = 0.5
    gamma: float = 0.99
    abs_duration_terms: bool = False

    def __post_init__(self):
        self.k = tuple(float(v) for v in self.k)
        if len(self.k) != 19:
            raise ValueError("expected 19 reward coefficients k0..k18")
        if any(v < 0 for v in self.k):
            raise ValueError("reward coefficients must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class RewardBreakdown:
    task_0: np.ndarray
    task_1: np.ndarray
    task_2: np.ndarray
    task_3: np.ndarray
    task_4: np.ndarray
    reg_0: np.ndarray
    reg_1: np.ndarray
    reg_2: np.ndarray
    reg_3: np.ndarray
    reg_4: np.ndarray
    reg_5: np.ndarray
    reg_6: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return sum(getattr(self, name) for name in REWARD_TERMS)

    def stack(self) -> np.ndarray:
        """``(N, 12)`` in :data:`REWARD_TERMS` order."""
        return np.stack([getattr(self, name) for name in REWARD_TERMS], -1)


def _norm(x):
    return np.linalg.norm(x, axis=-1)


def foot_slip(state: sc.RobotState, plat: sc.PlatformSim, model: sc.RobotModel) -> np.ndarray:
    """Per-foot planar velocity relative to the platform surface, in the platform frame ``(N, 4)``."""
    pos, vel = sc.foot_kinematics(state, model)
    rot_p = plat.rot
    p_ee = plat.to_platform(pos, rot_p)
    v_ee = np.einsum("nji,nkj->nki", rot_p, vel)
    w_p = spatial.world_to_frame(plat.ang_vel, rot_p)
    v_p = spatial.world_to_frame(plat.lin_vel, rot_p)
    surface = spatial.planar_cross(w_p[:, None, 2], p_ee[..., :2]) + v_p[:, None, :2]
    return _norm(v_ee[..., :2] - surface)


def mechanical_power(state: sc.RobotState) -> np.ndarray:
    """Positive joint power ``sum_j max(tau_j qd_j, 0)``."""
    return np.maximum(state.tau * state.qd, 0.0).sum(1)


def compute_reward(state: sc.RobotState, prev_state: sc.RobotState, plat: sc.PlatformSim, action, prev_action,
                   collision, coeffs: RewardCoeffs, model: sc.RobotModel) -> RewardBreakdown:
    """All twelve reward terms for one control step; a pure function of its arguments."""
    k = coeffs.k
    collision = np.asarray(collision, dtype=bool)
    p_body, _ = body_in_platform(state, plat)
    u_aln = true_alignment(state, plat)
    tilt = state.euler[:, :2]

    task_0 = -k[0] * collision.astype(float)
    task_1 = k[1] * np.exp(-_norm(p_body[:, :2]) / k[2])
    task_2 = k[3] * np.exp(-_norm(u_aln) / k[4])
    task_3 = k[5] * np.exp(-_norm(tilt) / k[6])
    task_4 = k[7] * np.exp(-np.abs(p_body[:, 2] - coeffs.h_des) / k[8])

    reg_0 = -(k[9] * _norm(state.tau - state.tau_prev) + k[10] * _norm(action - prev_action))
    reg_1 = -(k[11] * _norm(state.tau) + k[12] * _norm(state.qd) + k[13] * _norm(state.qdd))
    reg_2 = -k[14] * mechanical_power(state)
    reg_3 = -k[15] * np.maximum(_norm(state.foot_force) - coeffs.f_tol, 0.0).sum(1)

    c, c_prev = state.contact.astype(float), prev_state.contact.astype(float)
    d_swing = state.t_swing - coeffs.t_swing_des
    d_contact = state.t_contact - coeffs.t_contact_des
    if coeffs.abs_duration_terms:
        d_swing, d_contact = np.abs(d_swing), np.abs(d_contact)
    reg_4 = -k[16] * (d_swing * c * (1.0 - c_prev)).sum(1)
    reg_5 = -k[17] * (d_contact * (1.0 - c) * c_prev).sum(1)
    reg_6 = -k[18] * foot_slip(state, plat, model).sum(1)
    return RewardBreakdown(task_0, task_1, task_2, task_3, task_4, reg_0, reg_1, reg_2, reg_3, reg_4, reg_5, reg_6)


def height_violation(state: sc.RobotState, plat: sc.PlatformSim, h_des: float = 0.37, band: float = 0.1):
    p, _ = body_in_platform(state, plat)
    return np.abs(p[:, 2] - h_des) > band


# ---------------------------------------------------------------- environment

@dataclass
class EnvConfig:
    sim: sc.SimConfig = field(default_factory=sc.SimConfig)
    reward: RewardCoeffs = field(default_factory=RewardCoeffs)
    trajgen: tg.TrajGenConfig = field(default_factory=tg.TrajGenConfig.training)
    ranges: str = "train"
    episode_duration: float = 10.0
    action_clamp: float = 0.6
    history: int = 20

    @property
    def max_steps(self) -> int:
        return int(round(self.episode_duration / self.sim.dt))


@dataclass
class StepInfo:
    x_exp: np.ndarray
    x_imp: np.ndarray
    u_aln: np.ndarray
    collision: np.ndarray
    blowup: np.ndarray
    timeout: np.ndarray
    success: np.ndarray
    power: np.ndarray
    height_violation: np.ndarray


class BalanceEnv:
    """``n`` independent balancing episodes stepped in lock-step.

    Finished environments must be reset (:meth:`reset`) before the next :meth:`step`. Every
    reset draws its trajectory, intrinsics, platform gains and yaw from the environment's own
    generator, so a seeded run is reproducible.
    """

    def __init__(self, n: int, cfg: EnvConfig | None = None, seed: int = 0, level: int | None = None,
                 model: sc.RobotModel | None = None):
        self.n = n
        self.cfg = cfg or EnvConfig()
        self.model = model or sc.RobotModel()
        self.seed = seed
        self.level = level
        self.rng = np.random.default_rng(seed)
        self.episodes_started = 0
        self.state = None
        self.plat = None
        self.params = None
        self.prev_action = np.zeros((n, ACT_DIM))
        self.steps = np.zeros(n, dtype=int)
        self.done = np.ones(n, dtype=bool)
        self.obs = np.zeros((n, OBS_DIM))
        self.history = np.zeros((n, self.cfg.history, OBS_DIM))

    # -- resets
    def draw_episode(self):
        """Trajectory, intrinsics, platform gains and yaw for the next episode."""
        traj = tg.generate_one(self.cfg.trajgen, self.seed, self.episodes_started, self.level)
        self.episodes_started += 1
        params = sample_intrinsics(self.cfg.ranges, self.rng, 1)
        kp, kd = sample_platform_gains(self.cfg.ranges, self.rng, 1)
        yaw = spatial.canonicalize_angle(self.rng.uniform(-np.pi, np.pi))
        return traj, params, kp[0], kd[0], float(yaw)

    def reset(self, idx=None) -> np.ndarray:
        """Reset the given environments (all when ``idx`` is None) with fresh random episodes."""
        idx = np.arange(self.n) if idx is None else np.atleast_1d(np.asarray(idx))
        if np.issubdtype(idx.dtype, np.bool_):
            idx = np.flatnonzero(idx)
        for i in idx:
            self.reset_env(int(i), *self.draw_episode())
        return self.obs

    def reset_env(self, i: int, traj, params: sc.IntrinsicParams, kp, kd, yaw: float) -> None:
        """Start environment ``i`` on ``traj`` with explicit episode parameters."""
        params.validate()
        if self.plat is None:
            # first reset builds the batch with this trajectory as a placeholder everywhere
            self.plat = sc.PlatformSim.start([traj] * self.n, np.tile(kp, (self.n, 1)), np.tile(kd, (self.n, 1)),
                                             self.cfg.sim.platform_size)
            self.params = sc.IntrinsicParams(*(np.repeat(getattr(params, f.name), self.n, axis=0)
                                               for f in fields(sc.IntrinsicParams)))
        self.plat.reset_env(i, traj, kp, kd)
        self.params.assign([i], params)
        one = replace(self.plat, pose=self.plat.pose[i:i + 1], rate=self.plat.rate[i:i + 1],
                      time=self.plat.time[i:i + 1])
        fresh = sc.spawn_state(one, np.array([yaw]), self.model)
        if self.state is None:
            self.state = sc.RobotState(*(np.repeat(getattr(fresh, f.name), self.n, axis=0)
                                         for f in fields(sc.RobotState)))
        else:
            self.state.assign([i], fresh)
        assert not sc.detect_collision(fresh, one, self.model, self.cfg.sim).any(), "spawn in collision"
        self.prev_action[i] = 0.0
        self.steps[i] = 0
        self.done[i] = False
        self.obs[i] = build_observation(fresh, self.prev_action[i:i + 1], self.cfg.sim.gravity)[0]
        self.history[i] = self.obs[i]

    # -- stepping
    def step(self, action):
        if np.any(self.done):
            raise EnvContractError(f"environments {np.flatnonzero(self.done).tolist()} are done; reset them first")
        action = np.clip(np.asarray(action, dtype=float), -self.cfg.action_clamp, self.cfg.action_clamp)
        prev_state = self.state
        q_target = action + self.model.q_nominal
        state, plat, blown = sc.step_robot(prev_state, self.plat, q_target, self.params, self.model, self.cfg.sim)
        collision = sc.detect_collision(state, plat, self.model, self.cfg.sim) | blown
        reward = compute_reward(state, prev_state, plat, action, self.prev_action, collision, self.cfg.reward,
                                self.model)
        self.state, self.plat = state, plat
        self.steps += 1
        timeout = self.steps >= self.cfg.max_steps
        done = collision | timeout
        info = StepInfo(
            x_exp=build_explicit_params(state, plat),
            x_imp=self.params.to_vector(),
            u_aln=true_alignment(state, plat),
            collision=collision,
            blowup=blown,
            timeout=timeout & ~collision,
            success=timeout & ~collision,
            power=mechanical_power(state),
            height_violation=height_violation(state, plat, self.cfg.reward.h_des),
        )
        self.prev_action = action
        self.obs = build_observation(state, action, self.cfg.sim.gravity)
        self.history = np.concatenate([self.history[:, 1:], self.obs[:, None]], 1)
        self.done = done
        return self.obs, reward, done, info

    def explicit_params(self) -> np.ndarray:
        return build_explicit_params(self.state, self.plat)

    def implicit_params(self) -> np.ndarray:
        return self.params.to_vector()

    def alignment(self) -> np.ndarray:
        return true_alignment(self.state, self.plat)
