import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevcontrast.errors import SingularityError
from bevcontrast.geometry import (Affine2D, RigidTransform, affine2d_from_se3, affine2d_invert, register_3d,
                                  relative_transform, rotation_x, rotation_z)
from bevcontrast.io_kitti import PointCloud

from conftest import random_pose

ROT90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def homogeneous(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def test_relative_same_pose_is_identity(rng):
    p = random_pose(rng)
    rel = relative_transform(p, p)
    assert np.allclose(rel.R, np.eye(3), atol=1e-15)
    assert np.allclose(rel.t, 0, atol=1e-14)


def test_relative_from_identity():
    rel = relative_transform(RigidTransform.identity(), RigidTransform.translation(1, 2, 3))
    assert np.array_equal(rel.R, np.eye(3))
    assert rel.t.tolist() == [1.0, 2.0, 3.0]


def test_relative_rotated_reference():
    rel = relative_transform(RigidTransform(ROT90), RigidTransform.translation(1, 0, 0))
    oracle = np.linalg.inv(homogeneous(ROT90, np.zeros(3))) @ homogeneous(np.eye(3), [1, 0, 0])
    assert np.allclose(rel.matrix(), oracle, atol=1e-15)
    assert np.allclose(rel.t, [0, -1, 0], atol=1e-15)
    assert np.allclose(rel.R, ROT90.T, atol=1e-15)


def test_relative_maps_b_frame_into_a_frame(rng):
    pa, pb = random_pose(rng), random_pose(rng)
    x_b = rng.normal(size=(5, 3))
    world = pb.apply(x_b)
    assert np.allclose(relative_transform(pa, pb).apply(x_b), pa.inverse().apply(world), atol=1e-12)


def test_relative_round_trip(rng):
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        comp = relative_transform(a, b).compose(relative_transform(b, a))
        assert np.allclose(comp.matrix(), np.eye(4), atol=1e-10)


def test_register_identity_and_translation(rng):
    cloud = PointCloud(rng.normal(size=(20, 4)))
    assert np.array_equal(register_3d(cloud, RigidTransform.identity()).points, cloud.points)
    moved = register_3d(cloud, RigidTransform.translation(0, 0, 5))
    assert np.array_equal(moved.points[:, [0, 1, 3]], cloud.points[:, [0, 1, 3]])
    assert np.allclose(moved.points[:, 2], cloud.points[:, 2] + 5, atol=0)


def test_register_rotation_plus_translation():
    cloud = PointCloud([[1.0, 2.0, 3.0, 0.4]])
    out = register_3d(cloud, RigidTransform(ROT90, (1, 0, 0)))
    # by hand: (x, y) -> (-y, x) = (-2, 1), then + (1, 0)
    assert np.allclose(out.points, [[-1.0, 1.0, 3.0, 0.4]], atol=1e-15)


def test_register_preserves_distances(rng):
    cloud = PointCloud(rng.normal(0, 10, (60, 4)))
    out = register_3d(cloud, random_pose(rng))
    d0 = np.linalg.norm(cloud.xyz[:, None] - cloud.xyz[None], axis=-1)
    d1 = np.linalg.norm(out.xyz[:, None] - out.xyz[None], axis=-1)
    off = ~np.eye(60, dtype=bool)
    assert np.max(np.abs(d1[off] - d0[off]) / d0[off]) < 1e-9


def test_affine_truncation():
    assert np.array_equal(affine2d_from_se3(RigidTransform.identity()).A, np.eye(2))
    a = affine2d_from_se3(RigidTransform(ROT90, (1, 2, 0)))
    assert a.A.tolist() == [[0.0, -1.0], [1.0, 0.0]]
    assert a.b2.tolist() == [1.0, 2.0]


def test_affine_tilt_not_renormalised():
    th = np.deg2rad(10.0)
    a = affine2d_from_se3(RigidTransform(rotation_x(th)))
    assert np.allclose(a.A, [[1.0, 0.0], [0.0, np.cos(th)]], atol=1e-16)
    assert np.allclose(a.A[1, 1], 0.984807753012208, atol=1e-15)
    assert a.b2.tolist() == [0.0, 0.0]


def test_affine_invert_examples():
    inv = affine2d_invert(Affine2D.identity())
    assert np.array_equal(inv.A, np.eye(2)) and np.array_equal(inv.b2, [0.0, 0.0])
    inv = affine2d_invert(Affine2D(np.eye(2), (3, 4)))
    assert inv.b2.tolist() == [-3.0, -4.0]
    a = Affine2D([[0, -1], [1, 0]], (1, 2))
    inv = affine2d_invert(a)
    assert inv.A.tolist() == [[0.0, 1.0], [-1.0, 0.0]]
    assert inv.b2.tolist() == [-2.0, 1.0]
    comp = a.compose(inv)
    assert np.allclose(comp.A, np.eye(2), atol=1e-12) and np.allclose(comp.b2, 0, atol=1e-12)


def test_affine_invert_singular():
    with pytest.raises(SingularityError):
        affine2d_invert(Affine2D([[1, 2], [2, 4]], (0, 0)))


@settings(max_examples=200, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-50, 50), st.floats(-50, 50), st.floats(-20, 20),
       st.lists(st.floats(-80, 80), min_size=3, max_size=3))
def test_planar_motion_exactness(yaw, tx, ty, tz, point):
    rel = RigidTransform(rotation_z(yaw), (tx, ty, tz))
    cloud = PointCloud([[*point, 0.5]])
    xy3 = register_3d(cloud, rel).points[0, :2]
    xy2 = affine2d_from_se3(rel).apply(np.array(point[:2]))
    assert np.allclose(xy3, xy2, rtol=0, atol=1e-10)


def test_invert_composition_property(rng):
    for _ in range(100):
        a = Affine2D(rng.normal(size=(2, 2)) + 2 * np.eye(2), rng.normal(0, 10, 2))
        comp = affine2d_invert(a).compose(a)
        assert np.allclose(comp.A, np.eye(2), atol=1e-12)
        assert np.allclose(comp.b2, 0, atol=1e-12)
