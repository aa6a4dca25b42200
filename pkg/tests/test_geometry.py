import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rigidflow.errors import DomainError, UsageError
from rigidflow.geometry import (EulerAngles, Intrinsics, RigidTransform, backproject, egomotion_flow,
                                euler_to_rotation, flow_from_scene_flow, huber, project,
                                projected_scene_flow, rotation_to_euler, scene_flow_from_flow)

from conftest import random_transform

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_project_examples(intr100):
    np.testing.assert_array_equal(project(intr100, [0, 0, 2]), [50, 50])
    np.testing.assert_array_equal(project(intr100, [1, 0, 2]), [100, 50])
    with pytest.raises(DomainError):
        project(intr100, [1, 1, 0])


def test_backproject_examples(intr100):
    np.testing.assert_array_equal(backproject(intr100, [50, 50], 2.0), [0, 0, 2])
    np.testing.assert_allclose(backproject(intr100, [55, 50], 2.0), [0.1, 0, 2], atol=1e-15)
    for z in (0.0, -1.0, np.nan):
        with pytest.raises(DomainError):
            backproject(intr100, [50, 50], z)


def test_project_backproject_round_trip():
    rng = np.random.default_rng(1)
    intr = Intrinsics(525.0, 520.0, 319.5, 239.5, 640, 480)
    u = rng.uniform(-100, 740, (1000, 2))
    z = rng.uniform(0.05, 50, 1000)
    p = backproject(intr, u, z)
    np.testing.assert_array_equal(p[:, 2], z)
    assert np.abs(project(intr, p) - u).max() <= 1e-9


@given(st.tuples(finite, finite), st.floats(1e-3, 1e3))
def test_round_trip_property(u, z):
    intr = Intrinsics(120.0, 120.0, 80.0, 60.0, 160, 120)
    assert np.allclose(project(intr, backproject(intr, np.array(u), z)), u, rtol=0, atol=1e-9)


def test_apply_examples():
    np.testing.assert_array_equal(RigidTransform.identity().apply([1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(RigidTransform.from_translation([0.1, 0, 0]).apply([0, 0, 2]), [0.1, 0, 2])
    Rz = RigidTransform.from_rotvec([0, 0, math.pi / 2])
    np.testing.assert_allclose(Rz.apply([1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_compose_invert():
    rng = np.random.default_rng(2)
    I = RigidTransform.identity()
    assert I.inverse().allclose(I, atol=0)
    for _ in range(1000):
        T = random_transform(rng, angle=math.pi, trans=10)
        assert I.compose(T).allclose(T, atol=0)
        assert T.inverse().compose(T).allclose(I, 1e-9)
        assert T.compose(T.inverse()).allclose(I, 1e-9)


@given(st.integers(0, 2**32 - 1))
def test_apply_respects_composition(seed):
    rng = np.random.default_rng(seed)
    A, B = random_transform(rng, 3.0, 5), random_transform(rng, 3.0, 5)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(A.compose(B).apply(p), A.apply(B.apply(p)), atol=1e-12)


def test_rotation_must_be_orthonormal():
    with pytest.raises(UsageError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(UsageError):
        RigidTransform(np.eye(3) * 1.01)


def test_euler_examples():
    np.testing.assert_array_equal(euler_to_rotation(EulerAngles(0, 0, 0)), np.eye(3))
    Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(euler_to_rotation((0, 0, math.pi / 2)), Rz, atol=1e-15)
    # order is Rx(a) Ry(b) Rz(g): compare with a hand-built product
    a, b, g = 0.3, -0.2, 0.7
    Rx = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    Ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    Rz = np.array([[math.cos(g), -math.sin(g), 0], [math.sin(g), math.cos(g), 0], [0, 0, 1]])
    np.testing.assert_allclose(euler_to_rotation((a, b, g)), Rx @ Ry @ Rz, atol=1e-15)


def test_euler_round_trip_random():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        e = rng.uniform([-math.pi, -math.pi / 2 + 0.01, -math.pi], [math.pi, math.pi / 2 - 0.01, math.pi])
        back = rotation_to_euler(euler_to_rotation(e))
        assert not back.degenerate
        np.testing.assert_allclose(back.as_array(), e, atol=1e-9)


def test_euler_gimbal_flagged():
    e = rotation_to_euler(euler_to_rotation((0.4, math.pi / 2, 0.1)))
    assert e.degenerate
    # only alpha + gamma is observable; it must be preserved
    assert math.isclose(e.alpha + e.gamma, 0.5, abs_tol=1e-7)


def test_egomotion_flow_examples(intr100):
    depth = np.full((101, 101), 2.0)
    assert np.abs(egomotion_flow(intr100, depth, RigidTransform.identity())).max() <= 1e-12
    f = egomotion_flow(intr100, depth, RigidTransform.from_translation([0.1, 0, 0]))
    # the point moves +0.1 m in camera-1 coordinates: u shifts by fx·0.1/2 = +5
    np.testing.assert_allclose(f[..., 0], 5.0, atol=1e-12)
    np.testing.assert_allclose(f[..., 1], 0.0, atol=1e-12)
    ref = project(intr100, RigidTransform.from_translation([0.1, 0, 0]).apply(backproject(intr100, [7, 9], 2.0)))
    np.testing.assert_allclose(f[9, 7], ref - [7, 9], atol=1e-12)


def test_egomotion_behind_camera_invalid(intr100):
    depth = np.full((101, 101), 1.0)
    depth[0, 0] = np.nan
    f = egomotion_flow(intr100, depth, RigidTransform.from_translation([0, 0, -2.0]))
    assert np.all(np.isnan(f))


def test_scene_flow_examples(intr100):
    z = np.full((101, 101), 2.0)
    zero = np.zeros((101, 101, 2))
    assert np.all(scene_flow_from_flow(intr100, z, z, zero, RigidTransform.identity()) == 0)
    flow = zero.copy()
    flow[..., 0] = 5.0
    sf = scene_flow_from_flow(intr100, z, z, flow, RigidTransform.identity())
    np.testing.assert_allclose(sf[50, 50], [0.1, 0, 0], atol=1e-15)
    # pixels whose target leaves the image are invalid
    assert np.all(np.isnan(sf[:, 96:]))
    assert np.all(np.isfinite(sf[:, :96]))


def test_projected_scene_flow():
    of = np.array([[[5.0, 0.0]]])
    cm = np.array([[[3.0, 0.0]]])
    np.testing.assert_array_equal(projected_scene_flow(of, cm), [[[2.0, 0.0]]])
    assert np.all(projected_scene_flow(of, of) == 0)
    with pytest.raises(UsageError):
        projected_scene_flow(of, np.zeros((1, 2, 2)))


@given(st.integers(0, 2**32 - 1))
def test_flow_composition_identity(seed):
    rng = np.random.default_rng(seed)
    of = rng.normal(0, 10, (4, 5, 2))
    cm = rng.normal(0, 10, (4, 5, 2))
    psf = projected_scene_flow(of, cm)
    # of - psf recovers cm; psf + cm recovers of (bit-exact when cm is the subtrahend)
    np.testing.assert_array_equal(psf, of - cm)
    np.testing.assert_allclose(psf + cm, of, rtol=0, atol=1e-12)


def test_flow_from_scene_flow(intr100):
    I = RigidTransform.identity()
    pts = backproject(intr100, np.array([[10.0, 20], [50, 50]]), np.array([2.0, 3.0]))
    assert np.all(flow_from_scene_flow(intr100, I, I, pts, np.zeros_like(pts)) == 0)
    C1 = RigidTransform.from_rotvec([0.01, -0.02, 0.03], [0.05, 0, 0.1])
    dx = np.array([[0.1, 0, 0], [0, 0.05, 0]])
    u0 = project(intr100, pts)
    # C0 = identity reduces to pi(C1 (x0 + dx)) - u0
    np.testing.assert_allclose(flow_from_scene_flow(intr100, I, C1, pts, dx),
                               project(intr100, C1.apply(pts + dx)) - u0, atol=1e-12)


def test_huber_examples():
    assert huber(np.zeros(3), 0.05) == (0.0, 1.0)
    d = 0.05
    c, w = huber([d, 0, 0], d)
    assert c == pytest.approx(d * d / 2) and w == 1.0
    c, w = huber([0, 2 * d, 0], d)
    assert c == pytest.approx(1.5 * d * d) and w == pytest.approx(0.5)
    with pytest.raises(UsageError):
        huber([1.0], 0.0)


@given(st.floats(1e-4, 10), st.floats(0, 100))
def test_huber_properties(delta, s):
    c, w = huber([s], delta)
    assert 0 < w <= 1
    assert c >= 0
    # C1 continuity at the branch point: both sides agree in value and slope
    lo, _ = huber([delta * (1 - 1e-9)], delta)
    hi, _ = huber([delta * (1 + 1e-9)], delta)
    assert abs(hi - lo) <= 1e-8 * max(delta, 1) * delta + 1e-15
