import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tavp.errors import InvalidInputError
from tavp.geometry import (
    CameraPose5,
    RadialBounds,
    cartesian_to_spherical,
    look_at_extrinsics,
    look_at_from_vectors,
    spherical_to_cartesian,
    squash_array,
    squash_pose,
    up_vector,
)
from tavp.render import VirtualCamera

BOUNDS = RadialBounds(0.75, 1.3)
finite = st.floats(-60.0, 60.0, allow_nan=False)


def test_squash_midpoint():
    p = squash_pose(np.zeros(5), BOUNDS)
    np.testing.assert_allclose(p.as_array(), [math.pi / 2, math.pi, 1.025, math.pi / 2, math.pi], atol=1e-15)


@pytest.mark.parametrize("x,expect", [
    (40.0, (math.pi, 2 * math.pi, 1.3, math.pi, 2 * math.pi)),
    (-40.0, (0.0, 0.0, 0.75, 0.0, 0.0)),
])
def test_squash_saturation(x, expect):
    p = squash_pose(np.full(5, x), BOUNDS)
    np.testing.assert_allclose(p.as_array(), expect, atol=1e-8)


def test_squash_extreme_inputs_do_not_overflow():
    with np.errstate(over="raise"):
        out = squash_array(np.array([[1e4, -1e4, 800.0, -800.0, 0.0]]), BOUNDS)
    assert np.all(np.isfinite(out))


def test_squash_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        squash_array(np.zeros(4), BOUNDS)
    with pytest.raises(InvalidInputError):
        squash_array(np.array([0, 0, np.nan, 0, 0]), BOUNDS)
    with pytest.raises(InvalidInputError):
        RadialBounds(1.3, 0.75)


def test_theta_cap():
    p = squash_pose(np.full(5, 40.0), BOUNDS, theta_max=math.pi / 2)
    assert p.theta == pytest.approx(math.pi / 2)


@given(st.lists(finite, min_size=5, max_size=5))
def test_squash_ranges(raw):
    p = squash_pose(np.array(raw), BOUNDS)
    assert 0 <= p.theta <= math.pi
    assert 0 <= p.phi <= 2 * math.pi
    assert 0.75 <= p.r <= 1.3
    assert 0 <= p.theta_up <= math.pi
    assert 0 <= p.phi_up <= 2 * math.pi


@given(st.lists(st.floats(-8, 8), min_size=5, max_size=5), st.lists(st.floats(-8, 8), min_size=5, max_size=5))
def test_squash_monotone(a, b):
    a, b = np.array(a), np.array(b)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(squash_array(lo, BOUNDS) <= squash_array(hi, BOUNDS) + 1e-15)


@pytest.mark.parametrize("args,expect", [
    ((math.pi / 2, 0.0, 1.0), (1, 0, 0)),
    ((0.0, 1.234, 2.0), (0, 0, 2)),
    ((math.pi / 2, math.pi / 2, 2.0), (0, 2, 0)),
])
def test_spherical_to_cartesian(args, expect):
    np.testing.assert_allclose(spherical_to_cartesian(*args), expect, atol=1e-15)


@pytest.mark.parametrize("args,expect", [
    ((0.0, 0.7), (0, 0, 1)),
    ((math.pi / 2, 0.0), (1, 0, 0)),
    ((math.pi / 2, math.pi / 2), (0, 1, 0)),
])
def test_up_vector(args, expect):
    np.testing.assert_allclose(up_vector(*args), expect, atol=1e-15)


@given(st.floats(0.01, math.pi - 0.01), st.floats(0.0, 2 * math.pi - 1e-9), st.floats(0.1, 5.0))
def test_spherical_round_trip(theta, phi, r):
    t2, p2, r2 = cartesian_to_spherical(spherical_to_cartesian(theta, phi, r))
    assert t2 == pytest.approx(theta, abs=1e-9)
    assert r2 == pytest.approx(r, rel=1e-12)
    assert math.cos(p2 - phi) == pytest.approx(1.0, abs=1e-9)


def test_look_at_up_already_orthogonal():
    ext = look_at_from_vectors([0, 0, 1], [1, 0, 0])
    np.testing.assert_allclose(ext.rotation[1], [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(ext.forward, [0, 0, -1], atol=1e-15)
    cam = VirtualCamera(ext)
    u, v, d = cam.project(np.zeros((1, 3)))
    k = cam.intrinsics
    assert abs(u[0] - k.cx) < 1e-9 and abs(v[0] - k.cy) < 1e-9 and d[0] == pytest.approx(1.0)


def test_look_at_degenerate_up_falls_back_to_world_y():
    ext = look_at_from_vectors([0, 0, 1], [0, 0, 1])
    np.testing.assert_allclose(ext.rotation[1], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(ext.rotation @ ext.rotation.T, np.eye(3), atol=1e-12)


def test_look_at_rejects_coincident_target():
    with pytest.raises(InvalidInputError):
        look_at_from_vectors([0.1, 0.2, 0.3], [0, 0, 1], target=[0.1, 0.2, 0.3])


@given(st.lists(finite, min_size=5, max_size=5))
def test_extrinsics_orthonormal(raw):
    ext = look_at_extrinsics(squash_pose(np.array(raw), BOUNDS))
    R = ext.rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@given(st.lists(finite, min_size=5, max_size=5))
def test_origin_on_optical_axis(raw):
    cam = VirtualCamera(look_at_extrinsics(squash_pose(np.array(raw), BOUNDS)))
    u, v, d = cam.project(np.zeros((1, 3)))
    k = cam.intrinsics
    assert abs(u[0] - k.cx) < 1e-6 and abs(v[0] - k.cy) < 1e-6
    assert d[0] > 0


@given(st.lists(finite, min_size=5, max_size=5), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_camera_transform_round_trip(raw, point):
    ext = look_at_extrinsics(squash_pose(np.array(raw), BOUNDS))
    p = np.array([point])
    np.testing.assert_allclose(ext.camera_to_world(ext.world_to_camera(p)), p, atol=1e-12)


def test_camera_up_has_nonnegative_hint_component():
    pose = CameraPose5(math.pi / 3, 0.4, 1.0, 0.2, 1.1)
    ext = look_at_extrinsics(pose)
    assert np.dot(ext.rotation[1], up_vector(pose.theta_up, pose.phi_up)) >= 0
