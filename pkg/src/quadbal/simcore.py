"""Reduced-order quadruped / moving-platform physics, batched over environments.

Model summary
-------------
* The platform is a box whose pose follows a :class:`~quadbal.trajgen.PlatformTrajectory`
  through a per-DoF PD law with acceleration feed-forward. It is kinematic with respect to
  the robot: contact forces never act back on it.
* The robot is a single rigid body carrying the whole mass (trunk + limbs) with massless
  kinematic legs. Every joint has a constant effective inertia and is driven by the PD
  torque plus the contact reaction mapped through the leg Jacobian.
* Feet are points. Contacts are spring-dampers in the normal direction and anchored
  spring-dampers tangentially, clamped to the Coulomb cone (the anchor slides when the
  clamp is active, giving stick-slip behaviour).

Every array carries a leading environment axis ``N``. Legs are ordered FL, FR, RL, RR and
joints per leg are (hip abduction, hip flexion, knee).
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import spatial
from .trajgen import PlatformTrajectory, TrajectoryBatch

LEG_NAMES = ("FL", "FR", "RL", "RR")
_SIDE = np.array([1.0, -1.0, 1.0, -1.0])


class SimulationBlowup(RuntimeError):
    pass


def _nominal_q(thigh: float, calf: float, height: float) -> np.ndarray:
    """Feet straight below the hips, front knees pointing back and rear knees forward."""
    a = np.arccos(height / (thigh + calf)) if thigh == calf else 0.8
    return np.array([0.0, a, -2.0 * a] * 2 + [0.0, -a, 2.0 * a] * 2)


def _limits(front, rear) -> np.ndarray:
    return np.array(list(front) * 2 + list(rear) * 2, dtype=float)


@dataclass
class RobotModel:
    """Geometry and mass properties.

    Mass and body size approximate a Unitree A1. The legs use an X stance (rear knees pointing
    forward) on a wider hip track with shorter links, which keeps the passive PD stance upright
    for every trunk CoM shift in the randomization ranges.
    """

    limb_mass: float = 7.24
    nominal_body_mass: float = 4.5
    body_dims: tuple = (0.48, 0.32, 0.12)
    hip_x: float = 0.183
    hip_y: float = 0.14
    abad_offset: float = 0.08
    thigh_length: float = 0.208
    calf_length: float = 0.208
    standing_height: float = 0.37
    joint_low: np.ndarray = field(default_factory=lambda: _limits([-0.802, -1.047, -2.697], [-0.802, -4.189, 0.916]))
    joint_high: np.ndarray = field(default_factory=lambda: _limits([0.802, 4.189, -0.916], [0.802, 1.047, 2.697]))
    q_nominal: np.ndarray | None = None

    def __post_init__(self):
        if self.thigh_length <= 0 or self.calf_length <= 0:
            raise ValueError("link lengths must be positive")
        if self.q_nominal is None:
            self.q_nominal = _nominal_q(self.thigh_length, self.calf_length, self.standing_height)
        self.q_nominal = np.asarray(self.q_nominal, dtype=float)
        if np.any(self.q_nominal < self.joint_low) or np.any(self.q_nominal > self.joint_high):
            raise ValueError("q_nominal outside joint limits")

    @property
    def nominal_mass(self) -> float:
        return self.limb_mass + self.nominal_body_mass

    @property
    def hip_offsets(self) -> np.ndarray:
        return np.array([[self.hip_x, self.hip_y, 0.0], [self.hip_x, -self.hip_y, 0.0],
                         [-self.hip_x, self.hip_y, 0.0], [-self.hip_x, -self.hip_y, 0.0]])

    def inertia(self, mass) -> np.ndarray:
        """Principal inertia of a uniform box of the body's dimensions, ``(N, 3)``."""
        lx, ly, lz = self.body_dims
        base = np.array([ly**2 + lz**2, lx**2 + lz**2, lx**2 + ly**2]) / 12.0
        return np.asarray(mass, dtype=float)[..., None] * base

    def body_corners(self) -> np.ndarray:
        lx, ly, lz = (0.5 * d for d in self.body_dims)
        return np.array([[sx * lx, sy * ly, sz * lz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)])


@dataclass
class IntrinsicParams:
    """Per-environment physical parameters (the robot's privileged intrinsics).

    ``body_mass`` is the randomized trunk mass; the robot's total mass is
    ``RobotModel.limb_mass + body_mass`` and ``com_shift`` displaces the trunk's centre of mass,
    so the whole-body CoM moves by ``body_mass / total * com_shift``.
    """

    body_mass: np.ndarray
    com_shift: np.ndarray
    friction: np.ndarray
    kp: np.ndarray
    kd: np.ndarray

    @classmethod
    def nominal(cls, n: int = 1, model: RobotModel | None = None, kp: float = 40.0, kd: float = 1.0,
                friction: float = 1.0) -> "IntrinsicParams":
        model = model or RobotModel()
        return cls(np.full(n, model.nominal_body_mass), np.zeros((n, 3)), np.full(n, friction),
                   np.full((n, 12), kp), np.full((n, 12), kd))

    def __len__(self) -> int:
        return len(self.body_mass)

    def to_vector(self) -> np.ndarray:
        """``(N, 29)`` layout: mass, CoM shift (3), friction, Kp (12), Kd (12)."""
        return np.concatenate([self.body_mass[:, None], self.com_shift, self.friction[:, None], self.kp, self.kd], 1)

    def select(self, idx) -> "IntrinsicParams":
        return IntrinsicParams(*(getattr(self, f.name)[idx] for f in fields(self)))

    def assign(self, idx, other: "IntrinsicParams") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def validate(self) -> None:
        if np.any(self.friction <= 0) or np.any(self.kp <= 0) or np.any(self.kd <= 0):
            raise ValueError("friction, Kp and Kd must be positive")


@dataclass
class SimConfig:
    dt: float = 0.02
    substeps: int = 4
    gravity: float = 9.81
    contact_stiffness: float = 1.0e4
    contact_damping: float = 100.0
    tangential_stiffness: float = 1.0e4
    tangential_damping: float = 100.0
    joint_inertia: float = 0.05
    torque_limit: float = 33.5
    collision_margin: float = 0.0
    min_base_height: float = 0.05
    platform_size: tuple = (2.0, 2.0, 0.2)
    blowup_limit: float = 1.0e6
    freeze_joints: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def h(self) -> float:
        return self.dt / self.substeps


@dataclass
class RobotState:
    """Batched robot state. ``rot`` is the base orientation (world from body)."""

    pos: np.ndarray
    rot: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    ang_vel: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    tau: np.ndarray
    tau_prev: np.ndarray
    contact: np.ndarray
    foot_force: np.ndarray
    t_swing: np.ndarray
    t_contact: np.ndarray
    anchor: np.ndarray
    anchor_valid: np.ndarray

    @property
    def euler(self) -> np.ndarray:
        return spatial.rotation_to_euler(self.rot, check=False)

    def __len__(self) -> int:
        return len(self.pos)

    def copy(self) -> "RobotState":
        return RobotState(*(getattr(self, f.name).copy() for f in fields(self)))

    def assign(self, idx, other: "RobotState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def select(self, idx) -> "RobotState":
        return RobotState(*(getattr(self, f.name)[idx] for f in fields(self)))

    @classmethod
    def zeros(cls, n: int) -> "RobotState":
        z3, z12, z4 = np.zeros((n, 3)), np.zeros((n, 12)), np.zeros((n, 4))
        return cls(z3.copy(), np.tile(np.eye(3), (n, 1, 1)), z3.copy(), z3.copy(), z3.copy(), z12.copy(),
                   z12.copy(), z12.copy(), z12.copy(), z12.copy(), np.zeros((n, 4), bool), np.zeros((n, 4, 3)),
                   z4.copy(), z4.copy(), np.zeros((n, 4, 3)), np.zeros((n, 4), bool))


@dataclass
class PlatformSim:
    """Batched PD-tracked platform. ``pose``/``rate`` are (x, y, z, roll, pitch, yaw) and their
    time derivatives; the origin is the centre of the top surface."""

    pose: np.ndarray
    rate: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    traj: TrajectoryBatch
    time: np.ndarray
    size: tuple = (2.0, 2.0, 0.2)

    @classmethod
    def start(cls, trajs, kp, kd, size=(2.0, 2.0, 0.2)) -> "PlatformSim":
        batch = trajs if isinstance(trajs, TrajectoryBatch) else TrajectoryBatch(trajs)
        t0 = batch.start.copy()
        return cls(batch.evaluate(t0, 0), batch.evaluate(t0, 1), np.array(kp, float), np.array(kd, float),
                   batch, t0, tuple(size))

    def reset_env(self, i: int, traj: PlatformTrajectory, kp, kd) -> None:
        self.traj.replace(i, traj)
        self.time[i] = traj.times[0]
        self.pose[i] = traj.evaluate(traj.times[0], 0)
        self.rate[i] = traj.evaluate(traj.times[0], 1)
        self.kp[i] = kp
        self.kd[i] = kd

    @property
    def position(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def rot(self) -> np.ndarray:
        return spatial.euler_to_rotation(self.pose[:, 3:])

    @property
    def lin_vel(self) -> np.ndarray:
        return self.rate[:, :3]

    @property
    def ang_vel(self) -> np.ndarray:
        return spatial.euler_rates_to_angular_velocity(self.pose[:, 3:], self.rate[:, 3:])

    def point_velocity(self, points: np.ndarray, rot: np.ndarray | None = None) -> np.ndarray:
        """World velocity of platform-fixed material points given in world coordinates ``(N, k, 3)``."""
        r = points - self.position[:, None, :]
        return self.lin_vel[:, None, :] + np.cross(self.ang_vel[:, None, :], r)

    def to_platform(self, points: np.ndarray, rot: np.ndarray | None = None) -> np.ndarray:
        rot = self.rot if rot is None else rot
        return np.einsum("nji,nkj->nki", rot, points - self.position[:, None, :])


# ---------------------------------------------------------------- actuation

def apply_pd_targets(q, qd, q_target, params: IntrinsicParams, torque_limit: float = 33.5) -> np.ndarray:
    """PD joint torques ``Kp (q_target - q) - Kd qd`` clamped to the motor limit."""
    tau = params.kp * (q_target - q) - params.kd * qd
    return np.clip(tau, -torque_limit, torque_limit)


def step_platform(plat: PlatformSim, dt: float) -> PlatformSim:
    """Advance all platforms by ``dt`` with semi-implicit Euler.

    Per DoF: ``acc = ref_acc + Kp (ref - pose) + Kd (ref_rate - rate)``, with the reference
    evaluated at the current platform time.
    """
    t = plat.time
    ref = plat.traj.evaluate(t, 0)
    ref_rate = plat.traj.evaluate(t, 1)
    ref_acc = plat.traj.evaluate(t, 2)
    acc = ref_acc + plat.kp * (ref - plat.pose) + plat.kd * (ref_rate - plat.rate)
    rate = plat.rate + dt * acc
    pose = plat.pose + dt * rate
    return replace(plat, pose=pose, rate=rate, time=t + dt)


# ---------------------------------------------------------------- kinematics

def leg_kinematics(q: np.ndarray, model: RobotModel):
    """Foot positions relative to the base origin and leg Jacobians, both in the body frame.

    Returns ``(feet (N,4,3), jac (N,4,3,3), knees (N,4,3))``.
    """
    q = q.reshape(q.shape[0], 4, 3)
    q0, q1, q2 = q[..., 0], q[..., 1], q[..., 2]
    l1, l2 = model.thigh_length, model.calf_length
    s1, c1 = np.sin(q1), np.cos(q1)
    s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
    s0, c0 = np.sin(q0), np.cos(q0)
    d = model.abad_offset * _SIDE

    xl = -l1 * s1 - l2 * s12
    zl = -l1 * c1 - l2 * c12
    # rotate (xl, d, zl) about x by q0
    foot = np.stack([xl, c0 * d - s0 * zl, s0 * d + c0 * zl], -1)
    knee = np.stack([-l1 * s1, c0 * d + s0 * l1 * c1, s0 * d - c0 * l1 * c1], -1)

    jac = np.empty(q.shape[:2] + (3, 3))
    jac[..., 0, 0] = 0.0
    jac[..., 1, 0] = -s0 * d - c0 * zl
    jac[..., 2, 0] = c0 * d - s0 * zl
    dx1, dz1 = -l1 * c1 - l2 * c12, l1 * s1 + l2 * s12
    dx2, dz2 = -l2 * c12, l2 * s12
    jac[..., 0, 1] = dx1
    jac[..., 1, 1] = -s0 * dz1
    jac[..., 2, 1] = c0 * dz1
    jac[..., 0, 2] = dx2
    jac[..., 1, 2] = -s0 * dz2
    jac[..., 2, 2] = c0 * dz2
    hips = model.hip_offsets
    return foot + hips, jac, knee + hips


def foot_kinematics(state: RobotState, model: RobotModel):
    """World positions and velocities of the four feet, ``(N,4,3)`` each."""
    feet, jac, _ = leg_kinematics(state.q, model)
    r_w = np.einsum("nij,nkj->nki", state.rot, feet)
    qd = state.qd.reshape(-1, 4, 3)
    v_rel = np.einsum("nij,nkj->nki", state.rot, np.einsum("nkij,nkj->nki", jac, qd))
    pos = state.pos[:, None, :] + r_w
    vel = state.vel[:, None, :] + np.cross(state.ang_vel[:, None, :], r_w) + v_rel
    return pos, vel


# ---------------------------------------------------------------- contact

@dataclass
class ContactResult:
    force: np.ndarray        # (N,4,3) world, acting on the feet
    contact: np.ndarray      # (N,4) bool
    anchor: np.ndarray       # (N,4,3) platform-frame stick anchors
    anchor_valid: np.ndarray
    stiffness: np.ndarray    # (N,4,3,3) world-frame linearization of -df/dx
    damping: np.ndarray      # (N,4,3,3) world-frame linearization of -df/dv
    normal: np.ndarray       # (N,4)


def _contacts(foot_pos, foot_vel, plat: PlatformSim, plat_rot, friction, anchor, anchor_valid, cfg: SimConfig):
    n = foot_pos.shape[0]
    half_x, half_y = 0.5 * plat.size[0], 0.5 * plat.size[1]
    p_local = plat.to_platform(foot_pos, plat_rot)
    v_rel_w = foot_vel - plat.point_velocity(foot_pos)
    v_rel = np.einsum("nji,nkj->nki", plat_rot, v_rel_w)

    depth = -p_local[..., 2]
    inside = (np.abs(p_local[..., 0]) <= half_x) & (np.abs(p_local[..., 1]) <= half_y)
    touching = inside & (depth > 0.0) & (depth <= plat.size[2])
    normal = np.where(touching, cfg.contact_stiffness * depth - cfg.contact_damping * v_rel[..., 2], 0.0)
    normal = np.maximum(normal, 0.0)
    active = normal > 0.0

    # anchored tangential spring, re-anchored on new contacts
    fresh = active & ~anchor_valid
    anchor = np.where(fresh[..., None], p_local, anchor)
    disp = p_local[..., :2] - anchor[..., :2]
    ft = -cfg.tangential_stiffness * disp - cfg.tangential_damping * v_rel[..., :2]
    ft_norm = np.linalg.norm(ft, axis=-1)
    cap = friction[:, None] * normal
    slipping = ft_norm > cap
    scale = np.where(slipping, cap / np.maximum(ft_norm, 1e-300), 1.0)
    ft = ft * scale[..., None]
    ft = np.where(active[..., None], ft, 0.0)
    # sliding moves the anchor so that the spring alone reproduces the clamped force
    slid = anchor.copy()
    slid[..., :2] = p_local[..., :2] + ft / cfg.tangential_stiffness
    anchor = np.where((slipping & active)[..., None], slid, anchor)
    anchor_valid = active

    f_local = np.concatenate([ft, normal[..., None]], -1)
    force = np.einsum("nij,nkj->nki", plat_rot, f_local)

    stick = (active & ~slipping).astype(float)
    kd = np.zeros((n, 4, 3))
    kd[..., 0] = kd[..., 1] = cfg.tangential_stiffness * stick
    kd[..., 2] = cfg.contact_stiffness * active
    cd = np.zeros((n, 4, 3))
    cd[..., 0] = cd[..., 1] = cfg.tangential_damping * stick
    cd[..., 2] = cfg.contact_damping * active
    rot4 = plat_rot[:, None]
    rot4_t = np.swapaxes(rot4, -1, -2)
    stiff = (rot4 * kd[..., None, :]) @ rot4_t
    damp = (rot4 * cd[..., None, :]) @ rot4_t
    return ContactResult(force, active, anchor, anchor_valid, stiff, damp, normal)


def contact_forces(state: RobotState, plat: PlatformSim, params: IntrinsicParams, cfg: SimConfig,
                   model: RobotModel):
    """Foot contact forces (world frame) and contact flags for the current state."""
    pos, vel = foot_kinematics(state, model)
    res = _contacts(pos, vel, plat, plat.rot, params.friction, state.anchor, state.anchor_valid, cfg)
    return res.force, res.contact


def platform_reaction(state: RobotState, plat: PlatformSim, model: RobotModel):
    """Force and moment (about the platform origin) the feet exert on the platform, world frame.

    Only logged; the platform is kinematic and ignores it.
    """
    pos, _ = foot_kinematics(state, model)
    force = -state.foot_force
    arm = pos - plat.position[:, None, :]
    return force.sum(1), np.cross(arm, force).sum(1)


# ---------------------------------------------------------------- dynamics

def total_mass(params: IntrinsicParams, model: RobotModel) -> np.ndarray:
    return model.limb_mass + params.body_mass


def com_offset(params: IntrinsicParams, model: RobotModel) -> np.ndarray:
    """Whole-body CoM in the body frame, ``(N, 3)``."""
    return (params.body_mass / total_mass(params, model))[:, None] * params.com_shift


def _substep(state: RobotState, plat: PlatformSim, plat_next: PlatformSim, q_target, params: IntrinsicParams,
             model: RobotModel, cfg: SimConfig):
    """One physics step, linearly implicit in the 18 generalized velocities
    ``u = (v_com, omega, qd)``: ``(M + h C + h^2 K) du = h F - h^2 K (u - u_plat)`` where ``K`` and ``C`` are
    the contact and PD stiffness/damping mapped through the foot velocity Jacobians."""
    h = cfg.h
    n = len(state)
    rot = state.rot
    mass = total_mass(params, model)
    c_b = com_offset(params, model)
    inertia_b = model.inertia(mass)

    feet_b, jac, _ = leg_kinematics(state.q, model)
    r_w = np.einsum("nij,nkj->nki", rot, feet_b)
    jac_w = np.einsum("nij,nkjl->nkil", rot, jac)
    qd4 = state.qd.reshape(n, 4, 3)
    foot_pos = state.pos[:, None, :] + r_w
    foot_vel = state.vel[:, None, :] + np.cross(state.ang_vel[:, None, :], r_w) + np.einsum("nkij,nkj->nki", jac_w, qd4)
    con = _contacts(foot_pos, foot_vel, plat, plat.rot, params.friction, state.anchor, state.anchor_valid, cfg)

    tau_raw = params.kp * (q_target - state.q) - params.kd * state.qd
    tau = np.clip(tau_raw, -cfg.torque_limit, cfg.torque_limit)
    unsat = (np.abs(tau_raw) < cfg.torque_limit).astype(float)

    c_w = np.einsum("nij,nj->ni", rot, c_b)
    p_com = state.pos + c_w
    v_com = state.vel + np.cross(state.ang_vel, c_w)
    arm = foot_pos - p_com[:, None, :]

    # foot velocity Jacobian w.r.t. u, (N, 4, 3, 18)
    g = np.zeros((n, 4, 3, 18))
    g[..., 0:3] = np.eye(3)
    g[..., 3:6] = -spatial.skew(arm)
    for k in range(4):
        g[:, k, :, 6 + 3 * k: 9 + 3 * k] = jac_w[:, k]
    if cfg.freeze_joints:
        g[..., 6:] = 0.0

    i_world = np.einsum("nij,nj,nkj->nik", rot, inertia_b, rot)
    m_mat = np.zeros((n, 18, 18))
    m_mat[:, 0:3, 0:3] = mass[:, None, None] * np.eye(3)
    m_mat[:, 3:6, 3:6] = i_world
    m_mat[:, 6:, 6:] = cfg.joint_inertia * np.eye(12)
    g_flat = g.reshape(n, 12, 18)
    g_t = np.swapaxes(g_flat, 1, 2)
    k_mat = g_t @ (con.stiffness @ g).reshape(n, 12, 18)
    c_mat = g_t @ (con.damping @ g).reshape(n, 12, 18)
    diag = np.arange(6, 18)
    k_mat[:, diag, diag] += params.kp * unsat
    c_mat[:, diag, diag] += params.kd * unsat

    gen = (g_t @ con.force.reshape(n, 12, 1))[..., 0]
    gen[:, 2] -= mass * cfg.gravity
    gen[:, 6:] += tau
    u = np.concatenate([v_com, state.ang_vel, state.qd], 1)
    if cfg.freeze_joints:
        u[:, 6:] = 0.0
        m_mat[:, 6:, 6:] = np.eye(12)
        k_mat[:, 6:, 6:] = 0.0
        c_mat[:, 6:, 6:] = 0.0
        gen[:, 6:] = 0.0
    lhs = m_mat + h * c_mat + h * h * k_mat
    # springs stretch with the foot velocity relative to the moving platform
    v_plat = plat_next.point_velocity(foot_pos)
    k_vp = (g_t @ (con.stiffness @ v_plat[..., None]).reshape(n, 12, 1))[..., 0]
    rhs = h * gen - h * h * ((k_mat @ u[..., None])[..., 0] - k_vp)
    u = u + np.linalg.solve(lhs, rhs[..., None])[..., 0]

    v_com, omega_mid, qd = u[:, 0:3], u[:, 3:6], u[:, 6:]
    q = state.q + h * qd
    hit = (q < model.joint_low) | (q > model.joint_high)
    q = np.clip(q, model.joint_low, model.joint_high)
    qd = np.where(hit, 0.0, qd)

    ang_mom = np.einsum("nij,nj->ni", i_world, omega_mid)
    p_com = p_com + h * v_com
    rot_new = spatial.rotvec_to_rotation(h * omega_mid) @ rot
    local_l = np.einsum("nji,nj->ni", rot_new, ang_mom)
    omega = np.einsum("nij,nj->ni", rot_new, local_l / inertia_b)
    c_w_new = np.einsum("nij,nj->ni", rot_new, c_b)
    pos = p_com - c_w_new
    vel = v_com - np.cross(omega, c_w_new)

    new = replace(state, pos=pos, rot=rot_new, vel=vel, ang_vel=omega, q=q, qd=qd, tau=tau,
                  contact=con.contact, foot_force=con.force, anchor=con.anchor, anchor_valid=con.anchor_valid)
    return new, con


def check_contact_invariants(con: ContactResult, friction: np.ndarray, plat_rot: np.ndarray) -> None:
    """Assert normal non-negativity and the friction cone (used by the test suite)."""
    local = np.einsum("nji,nkj->nki", plat_rot, con.force)
    assert np.all(local[..., 2] >= 0.0), "negative normal force"
    tang = np.linalg.norm(local[..., :2], axis=-1)
    assert np.all(tang <= friction[:, None] * local[..., 2] + 1e-9), "friction cone violated"
    # compare against nonzero components; squared norms underflow for denormal forces
    assert np.array_equal(con.contact, np.any(con.force != 0.0, axis=-1)), "contact flag mismatch"


def step_robot(state: RobotState, plat: PlatformSim, q_target, params: IntrinsicParams, model: RobotModel,
               cfg: SimConfig, on_substep=None):
    """Advance robot and platform by one control step (``cfg.substeps`` physics steps).

    Returns ``(state, plat, blown)`` where ``blown`` flags environments whose state diverged;
    those keep their pre-step state. ``on_substep(con, plat, params)`` is called after every
    physics step with the contact result and the platform it was computed against.
    """
    start = state
    for _ in range(cfg.substeps):
        # contacts see the platform at the same instant as the robot
        nxt = step_platform(plat, cfg.h)
        state, con = _substep(state, plat, nxt, q_target, params, model, cfg)
        if on_substep is not None:
            on_substep(con, plat, params)
        plat = nxt
    acc = (state.vel - start.vel) / cfg.dt
    qdd = (state.qd - start.qd) / cfg.dt
    touchdown = state.contact & ~start.contact
    liftoff = ~state.contact & start.contact
    t_contact = np.where(touchdown, 0.0, start.t_contact)
    t_swing = np.where(liftoff, 0.0, start.t_swing)
    t_contact = np.where(state.contact, t_contact + cfg.dt, t_contact)
    t_swing = np.where(~state.contact, t_swing + cfg.dt, t_swing)
    state = replace(state, acc=acc, qdd=qdd, tau_prev=start.tau, t_swing=t_swing, t_contact=t_contact)

    blown = _diverged(state, cfg.blowup_limit)
    if np.any(blown):
        state.assign(blown, start.select(blown))
    return state, plat, blown


def _diverged(state: RobotState, limit: float) -> np.ndarray:
    out = np.zeros(len(state), bool)
    for name in ("pos", "vel", "ang_vel", "q", "qd", "acc"):
        a = getattr(state, name).reshape(len(state), -1)
        out |= ~np.all(np.isfinite(a) & (np.abs(a) < limit), axis=1)
    return out


def detect_collision(state: RobotState, plat: PlatformSim, model: RobotModel, cfg: SimConfig) -> np.ndarray:
    """Body/knee penetration, base too low, or base off the platform's horizontal extent."""
    rot_p = plat.rot
    corners = state.pos[:, None, :] + np.einsum("nij,kj->nki", state.rot, model.body_corners())
    _, _, knees = leg_kinematics(state.q, model)
    knees = state.pos[:, None, :] + np.einsum("nij,nkj->nki", state.rot, knees)
    pts = plat.to_platform(np.concatenate([corners, knees], 1), rot_p)
    half_x, half_y = 0.5 * plat.size[0], 0.5 * plat.size[1]
    inside = (np.abs(pts[..., 0]) <= half_x) & (np.abs(pts[..., 1]) <= half_y)
    penetrating = np.any(inside & (pts[..., 2] < cfg.collision_margin), axis=1)
    base = plat.to_platform(state.pos[:, None, :], rot_p)[:, 0]
    low = base[:, 2] < cfg.min_base_height
    off = (np.abs(base[:, 0]) > half_x) | (np.abs(base[:, 1]) > half_y)
    return penetrating | low | off


def spawn_state(plat: PlatformSim, yaw, model: RobotModel, height: float | None = None) -> RobotState:
    """Robot standing at ``q_nominal`` at the platform centre, moving rigidly with the platform."""
    n = len(plat.pose)
    height = model.standing_height if height is None else height
    rot_p = plat.rot
    state = RobotState.zeros(n)
    state.pos = plat.position + rot_p[:, :, 2] * height
    state.rot = rot_p @ spatial.rot_z(yaw)
    state.ang_vel = plat.ang_vel.copy()
    state.vel = plat.point_velocity(state.pos[:, None, :])[:, 0]
    state.q = np.tile(model.q_nominal, (n, 1))
    state.acc = np.zeros((n, 3))
    return state


def mechanical_energy(state: RobotState, plat: PlatformSim, params: IntrinsicParams, model: RobotModel,
                      cfg: SimConfig) -> np.ndarray:
    """Kinetic + gravitational + contact-spring + joint kinetic energy (static platform assumed)."""
    mass = total_mass(params, model)
    c_w = np.einsum("nij,nj->ni", state.rot, com_offset(params, model))
    v_com = state.vel + np.cross(state.ang_vel, c_w)
    inertia = model.inertia(mass)
    w_b = np.einsum("nji,nj->ni", state.rot, state.ang_vel)
    kin = 0.5 * mass * (v_com**2).sum(1) + 0.5 * (inertia * w_b**2).sum(1)
    # heights are measured from the platform top so that percentages are meaningful
    pot = mass * cfg.gravity * ((state.pos + c_w)[:, 2] - plat.position[:, 2])
    pos, _ = foot_kinematics(state, model)
    local = plat.to_platform(pos)
    depth = np.where(state.anchor_valid, np.maximum(-local[..., 2], 0.0), 0.0)
    spring = 0.5 * cfg.contact_stiffness * (depth**2).sum(1)
    disp = np.where(state.anchor_valid[..., None], local[..., :2] - state.anchor[..., :2], 0.0)
    spring += 0.5 * cfg.tangential_stiffness * (disp**2).sum((1, 2))
    joints = 0.5 * cfg.joint_inertia * (state.qd**2).sum(1)
    return kin + pot + spring + joints


# ---------------------------------------------------------------- state log

STATE_LOG_COLUMNS = (
    ["env", "step", "time"]
    + [f"base_{k}" for k in ("x", "y", "z", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz")]
    + [f"q{j}" for j in range(12)] + [f"qd{j}" for j in range(12)] + [f"tau{j}" for j in range(12)]
    + [f"c{i}" for i in range(4)] + [f"fz{i}" for i in range(4)]
    + [f"plf_{k}" for k in ("x", "y", "z", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz")]
)


def state_log_rows(step: int, state: RobotState, plat: PlatformSim, envs=None) -> np.ndarray:
    """One row per environment in the :data:`STATE_LOG_COLUMNS` order."""
    envs = np.arange(len(state)) if envs is None else np.asarray(envs)
    n = len(state)
    cols = [
        envs[:, None].astype(float), np.full((n, 1), float(step)), plat.time[:, None],
        state.pos, state.euler, state.vel, state.ang_vel, state.q, state.qd, state.tau,
        state.contact.astype(float), state.foot_force[..., 2],
        plat.pose, plat.lin_vel, plat.ang_vel,
    ]
    return np.concatenate(cols, 1)
