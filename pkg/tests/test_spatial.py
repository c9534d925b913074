import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadbal import spatial
from quadbal.spatial import (
    DegenerateRotationError,
    FrameTransform,
    euler_rates_to_angular_velocity,
    euler_to_rotation,
    planar_cross,
    rotation_to_euler,
    world_to_frame,
)

angles = st.floats(-3.1, 3.1)
pitches = st.floats(-1.5, 1.5)


def test_identity():
    np.testing.assert_array_equal(euler_to_rotation([0.0, 0.0, 0.0]), np.eye(3))


def test_quarter_yaw_maps_x_to_y():
    r = euler_to_rotation([0.0, 0.0, np.pi / 2])
    np.testing.assert_allclose(r @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


def test_matches_elementary_product():
    e = np.array([0.3, -0.4, 1.2])
    ref = spatial.rot_z(e[2]) @ spatial.rot_y(e[1]) @ spatial.rot_x(e[0])
    np.testing.assert_allclose(euler_to_rotation(e), ref, atol=1e-15)


def test_orthonormal_random():
    rng = np.random.default_rng(0)
    e = rng.uniform(-np.pi, np.pi, size=(500, 3))
    r = euler_to_rotation(e)
    np.testing.assert_allclose(r @ np.swapaxes(r, -1, -2), np.broadcast_to(np.eye(3), r.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-12)


@settings(max_examples=200)
@given(angles, pitches, angles)
def test_euler_round_trip(roll, pitch, yaw):
    e = np.array([roll, pitch, yaw])
    np.testing.assert_allclose(rotation_to_euler(euler_to_rotation(e)), e, atol=1e-9)


def test_gimbal_lock_raises():
    with pytest.raises(DegenerateRotationError):
        rotation_to_euler(euler_to_rotation([0.1, np.pi / 2, 0.2]))
    # unchecked path stays finite
    assert np.all(np.isfinite(rotation_to_euler(euler_to_rotation([0.1, np.pi / 2, 0.2]), check=False)))


def test_canonicalize_half_open():
    assert spatial.canonicalize_angle(-np.pi) == pytest.approx(np.pi)
    assert spatial.canonicalize_angle(np.pi) == pytest.approx(np.pi)
    assert spatial.canonicalize_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)


def test_world_to_frame_cases():
    np.testing.assert_allclose(world_to_frame([1.0, 2.0, 3.0], np.eye(3)), [1.0, 2.0, 3.0])
    r = euler_to_rotation([0.0, 0.0, np.pi / 2])
    np.testing.assert_allclose(world_to_frame([1.0, 0.0, 0.0], r), [0.0, -1.0, 0.0], atol=1e-15)


@settings(max_examples=100)
@given(angles, pitches, angles, st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_round_trip_and_norm(roll, pitch, yaw, v):
    r = euler_to_rotation([roll, pitch, yaw])
    v = np.array(v)
    local = world_to_frame(v, r)
    np.testing.assert_allclose(spatial.frame_to_world(local, r), v, atol=1e-12)
    assert np.linalg.norm(local) == pytest.approx(np.linalg.norm(v), abs=1e-12)


def test_planar_cross_examples():
    np.testing.assert_array_equal(planar_cross(0.0, [0.7, -2.0]), [0.0, 0.0])
    np.testing.assert_allclose(planar_cross(1.0, [1.0, 0.0]), [0.0, 1.0])
    np.testing.assert_allclose(planar_cross(2.0, [0.3, -0.4]), [0.8, 0.6])


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_planar_cross_bilinear(w1, w2, x, y, s):
    p = np.array([x, y])
    np.testing.assert_allclose(planar_cross(w1 + w2, p), planar_cross(w1, p) + planar_cross(w2, p), atol=1e-9)
    np.testing.assert_allclose(planar_cross(w1, s * p), s * planar_cross(w1, p), atol=1e-9)
    # agrees with the z-component of the full cross product
    np.testing.assert_allclose(planar_cross(w1, p), np.cross([0, 0, w1], [x, y, 0.0])[:2], atol=1e-9)


def test_angular_velocity_matches_rotation_derivative():
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(20):
        e = rng.uniform(-1, 1, 3)
        ed = rng.uniform(-1, 1, 3)
        rdot = (euler_to_rotation(e + h * ed) - euler_to_rotation(e - h * ed)) / (2 * h)
        w_skew = rdot @ euler_to_rotation(e).T
        w = np.array([w_skew[2, 1], w_skew[0, 2], w_skew[1, 0]])
        np.testing.assert_allclose(euler_rates_to_angular_velocity(e, ed), w, atol=1e-8)


def test_rotvec_matches_small_and_large():
    w = np.array([0.0, 0.0, np.pi / 2])
    np.testing.assert_allclose(spatial.rotvec_to_rotation(w), euler_to_rotation([0, 0, np.pi / 2]), atol=1e-14)
    np.testing.assert_allclose(spatial.rotvec_to_rotation(np.zeros(3)), np.eye(3))


def test_frame_transform_algebra():
    rng = np.random.default_rng(1)
    a = FrameTransform.from_pose(rng.normal(size=3), rng.uniform(-1, 1, 3))
    b = FrameTransform.from_pose(rng.normal(size=3), rng.uniform(-1, 1, 3))
    c = FrameTransform.from_pose(rng.normal(size=3), rng.uniform(-1, 1, 3))
    x = rng.normal(size=3)
    np.testing.assert_allclose(((a @ b) @ c).apply(x), (a @ (b @ c)).apply(x), atol=1e-12)
    ident = a @ a.inverse()
    np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(ident.translation, 0.0, atol=1e-9)
