import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadbal import simcore as sc
from quadbal import spatial
from quadbal import trajgen as tg

from physics_cases import drop_to_stand, free_body_momentum_drift, polynomial_platform, sliding_onset, static_platform


@pytest.fixture
def model():
    return sc.RobotModel()


def test_model_nominal_height(model):
    feet, _, _ = sc.leg_kinematics(model.q_nominal[None], model)
    np.testing.assert_allclose(feet[0, :, 2], -model.standing_height, atol=1e-3)
    assert model.nominal_mass == pytest.approx(11.74)


def test_model_rejects_bad_geometry():
    with pytest.raises(ValueError):
        sc.RobotModel(thigh_length=0.0)


def test_pd_targets(model):
    params = sc.IntrinsicParams.nominal(1, model)
    q = np.tile(model.q_nominal, (1, 1))
    np.testing.assert_array_equal(sc.apply_pd_targets(q, np.zeros_like(q), q, params), 0.0)
    tau = sc.apply_pd_targets(q, np.zeros_like(q), q + 0.1, params)
    np.testing.assert_allclose(tau, 4.0)
    tau = sc.apply_pd_targets(q, np.zeros_like(q), q + 10.0, params)
    np.testing.assert_allclose(tau, 33.5)


def test_static_platform_stays_put():
    plat = static_platform()
    start = plat.pose.copy()
    for _ in range(100):
        plat = sc.step_platform(plat, 0.005)
    np.testing.assert_array_equal(plat.pose, start)


def test_platform_offset_matches_scalar_ode():
    # static reference at 0, start offset 0.1; critically damped gains kd = 2 sqrt(kp)
    plat = polynomial_platform(1, kp=4.0, kd=4.0)
    plat.pose[0, 0] = 0.1
    dt, xs = 1e-4, []
    for _ in range(30000):
        plat = sc.step_platform(plat, dt)
        xs.append(plat.pose[0, 0])
    xs = np.array(xs)
    t = dt * np.arange(1, xs.size + 1)
    exact = 0.1 * (1 + 2 * t) * np.exp(-2 * t)
    np.testing.assert_allclose(xs, exact, atol=1e-4)
    assert xs.min() >= 0.0
    assert np.all(np.diff(xs) <= 0.0)


def test_platform_tracks_training_trajectories():
    rng = np.random.default_rng(0)
    trajs = tg.generate_set(tg.TrajGenConfig.training(seed=2), 32)
    plat = sc.PlatformSim.start(trajs, rng.uniform(1.0, 1.5, (32, 6)), rng.uniform(0.02, 0.03, (32, 6)))
    err = []
    for _ in range(1999):
        plat = sc.step_platform(plat, 0.005)
        err.append(plat.pose - plat.traj.evaluate(plat.time))
    rms = np.sqrt(np.mean(np.square(err), axis=0))
    assert rms.max() < 0.15


def test_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(1)
    q = model.q_nominal + rng.uniform(-0.4, 0.4, (5, 12))
    _, jac, _ = sc.leg_kinematics(q, model)
    h = 1e-6
    for j in range(12):
        dq = np.zeros(12)
        dq[j] = h
        fp, _, _ = sc.leg_kinematics(q + dq, model)
        fm, _, _ = sc.leg_kinematics(q - dq, model)
        fd = (fp - fm) / (2 * h)
        leg, k = divmod(j, 3)
        col = jac[:, leg, :, k]
        scale = np.maximum(np.linalg.norm(fd[:, leg], axis=-1), 1e-3)
        assert np.all(np.linalg.norm(col - fd[:, leg], axis=-1) / scale < 1e-5)
        # other legs do not depend on this joint
        others = [m for m in range(4) if m != leg]
        assert np.abs(fd[:, others]).max() < 1e-9


def test_left_right_mirror(model):
    rng = np.random.default_rng(2)
    half = rng.uniform(-0.3, 0.3, 6)
    q = model.q_nominal.copy()
    # mirror: abduction flips sign, flexion and knee are shared
    q[0:3] = model.q_nominal[0:3] + [half[0], half[1], half[2]]
    q[3:6] = model.q_nominal[3:6] + [-half[0], half[1], half[2]]
    q[6:9] = model.q_nominal[6:9] + [half[3], half[4], half[5]]
    q[9:12] = model.q_nominal[9:12] + [-half[3], half[4], half[5]]
    feet, _, _ = sc.leg_kinematics(q[None], model)
    flip = np.array([1.0, -1.0, 1.0])
    np.testing.assert_allclose(feet[0, 1], feet[0, 0] * flip, atol=1e-9)
    np.testing.assert_allclose(feet[0, 3], feet[0, 2] * flip, atol=1e-9)


def _feet_at(plat, local):
    return np.einsum("nij,nkj->nki", plat.rot, local) + plat.position[:, None, :]


def test_contact_above_surface_and_penetration():
    plat = static_platform()
    cfg = sc.SimConfig()
    params = sc.IntrinsicParams.nominal(1)
    local = np.array([[[0.2, 0.1, 0.01], [0.2, -0.1, -0.001], [-0.2, 0.1, 0.0], [3.0, 0.0, -0.001]]])
    res = sc._contacts(_feet_at(plat, local), np.zeros((1, 4, 3)), plat, plat.rot, params.friction,
                       np.zeros((1, 4, 3)), np.zeros((1, 4), bool), cfg)
    np.testing.assert_array_equal(res.contact[0], [False, True, False, False])
    np.testing.assert_allclose(res.force[0, 1], [0.0, 0.0, 10.0], atol=1e-12)
    np.testing.assert_array_equal(res.force[0, [0, 2, 3]], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 2.0), st.lists(st.floats(-0.005, 0.005), min_size=12, max_size=12),
       st.lists(st.floats(-2, 2), min_size=12, max_size=12), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_contact_cone_property(mu, offsets, vels, roll, pitch):
    plat = static_platform()
    plat.pose[0, 3:5] = [roll, pitch]
    cfg = sc.SimConfig()
    local = np.array(offsets).reshape(1, 4, 3) + [[[0.2, 0.1, 0], [0.2, -0.1, 0], [-0.2, 0.1, 0], [-0.2, -0.1, 0]]]
    anchors = local + 0.01
    res = sc._contacts(_feet_at(plat, local), np.array(vels).reshape(1, 4, 3), plat, plat.rot, np.array([mu]),
                       anchors, np.ones((1, 4), bool), cfg)
    sc.check_contact_invariants(res, np.array([mu]), plat.rot)


def test_contact_force_relative_to_moving_surface():
    # a foot moving with the platform surface feels no damping
    plat = polynomial_platform(1, (0.0, 0.7, 0.0, 0.0))
    plat.pose[0, 5] = 0.0
    plat.rate[0, 5] = 0.3
    local = np.array([[[0.4, 0.2, -0.001]] * 4])
    pts = _feet_at(plat, local)
    res = sc._contacts(pts, plat.point_velocity(pts), plat, plat.rot, np.array([1.0]), local.copy(),
                       np.ones((1, 4), bool), sc.SimConfig())
    np.testing.assert_allclose(res.force[0], [[0.0, 0.0, 10.0]] * 4, atol=1e-9)


def test_free_body_momentum():
    assert free_body_momentum_drift() <= 1e-10


def test_drop_to_stand():
    state, params, model = drop_to_stand()
    assert state.contact.all()
    weight = sc.total_mass(params, model)[0] * 9.81
    assert state.foot_force[0, :, 2].sum() == pytest.approx(weight, rel=0.02)


def test_frozen_robot_rides_accelerating_platform():
    # 2 m/s^2 is below mu g for mu = 0.3, and above it for mu = 0.15
    for mu, sticks in ((0.3, True), (0.15, False)):
        model = sc.RobotModel()
        plat = polynomial_platform(1, (0.0, 0.0, 1.0, 0.0))
        state = sc.spawn_state(plat, np.zeros(1), model, height=model.standing_height - 0.0025)
        params = sc.IntrinsicParams.nominal(1, model, friction=mu)
        cfg = sc.SimConfig(freeze_joints=True)
        for _ in range(50):
            state, plat, _ = sc.step_robot(state, plat, state.q, params, model, cfg)
        lag = abs(state.vel[0, 0] - plat.lin_vel[0, 0])
        assert (lag < 0.02) == sticks


@pytest.mark.parametrize("mu", [0.2, 0.3, 0.4])
def test_sliding_onset(mu):
    assert sliding_onset(mu) == pytest.approx(mu * 9.81, rel=0.05)


def test_energy_non_increasing_without_torque():
    model = sc.RobotModel()
    plat = static_platform()
    state = sc.spawn_state(plat, np.zeros(1), model, height=model.standing_height + 0.001)
    params = sc.IntrinsicParams.nominal(1, model)
    cfg = sc.SimConfig(torque_limit=0.0)
    energy = [sc.mechanical_energy(state, plat, params, model, cfg)[0]]
    for _ in range(250):
        state, plat, _ = sc.step_robot(state, plat, state.q, params, model, cfg)
        energy.append(sc.mechanical_energy(state, plat, params, model, cfg)[0])
    energy = np.array(energy)
    per_second = int(round(1.0 / cfg.dt))
    rise = energy[per_second:] - energy[:-per_second]
    assert rise.max() <= 0.01 * abs(energy[0])
    assert energy[-1] < energy[0]


def test_determinism():
    def run():
        trajs = tg.generate_set(tg.TrajGenConfig.training(seed=4), 3)
        plat = sc.PlatformSim.start(trajs, np.full((3, 6), 1.2), np.full((3, 6), 0.025))
        model = sc.RobotModel()
        state = sc.spawn_state(plat, np.array([0.1, 1.0, -2.0]), model)
        params = sc.IntrinsicParams.nominal(3, model)
        rng = np.random.default_rng(0)
        for _ in range(30):
            state, plat, _ = sc.step_robot(state, plat, model.q_nominal + rng.uniform(-0.3, 0.3, (3, 12)), params,
                                           model, sc.SimConfig())
        return state

    a, b = run(), run()
    for name in ("pos", "rot", "vel", "q", "qd", "foot_force"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_timers_follow_contact_transitions(model):
    plat = static_platform()
    state = sc.spawn_state(plat, np.zeros(1), model, height=model.standing_height + 0.05)
    params = sc.IntrinsicParams.nominal(1, model)
    cfg = sc.SimConfig()
    state, plat, _ = sc.step_robot(state, plat, state.q, params, model, cfg)
    assert not state.contact.any()
    np.testing.assert_allclose(state.t_swing, cfg.dt)
    for _ in range(30):
        prev = state
        state, plat, _ = sc.step_robot(state, plat, np.tile(model.q_nominal, (1, 1)), params, model, cfg)
        down = state.contact & ~prev.contact
        np.testing.assert_allclose(state.t_contact[down], cfg.dt)
        np.testing.assert_allclose(state.t_swing[down], prev.t_swing[down])
    assert state.contact.all()


def test_blowup_reverts_state(model):
    plat = static_platform()
    state = sc.spawn_state(plat, np.zeros(1), model)
    state.vel[:] = [2e6, 0, 0]
    params = sc.IntrinsicParams.nominal(1, model)
    _, _, blown = sc.step_robot(state, plat, state.q, params, model, sc.SimConfig())
    assert blown.all()


def test_collision_cases(model):
    plat = static_platform()
    cfg = sc.SimConfig()
    state = sc.spawn_state(plat, np.zeros(1), model)
    assert not sc.detect_collision(state, plat, model, cfg).any()
    off = state.copy()
    off.pos[0, 0] += 1.0 + 0.5
    assert sc.detect_collision(off, plat, model, cfg).all()
    rolled = state.copy()
    rolled.rot = spatial.euler_to_rotation(np.array([[np.pi / 2, 0.0, 0.0]]))
    rolled.pos[0, 2] = plat.position[0, 2] + 0.1
    assert sc.detect_collision(rolled, plat, model, cfg).all()
    low = state.copy()
    low.pos[0, 2] = plat.position[0, 2] + 0.04
    assert sc.detect_collision(low, plat, model, cfg).all()


def test_platform_reaction_balances_weight():
    state, params, model = drop_to_stand()
    force, _ = sc.platform_reaction(state, static_platform(), model)
    weight = sc.total_mass(params, model)[0] * 9.81
    assert force[0, 2] == pytest.approx(-weight, rel=0.02)


def test_state_log_rows_shape():
    plat = static_platform(2)
    model = sc.RobotModel()
    state = sc.spawn_state(plat, np.zeros(2), model)
    rows = sc.state_log_rows(3, state, plat)
    assert rows.shape == (2, len(sc.STATE_LOG_COLUMNS))
