import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import plane_depth, random_transform, small_camera
from refpose.errors import InvalidInputError, ProjectionDomainError
from refpose.geometry import (
    CameraIntrinsics,
    RigidTransform,
    axis_rotation,
    backproject,
    clamp_depth,
    compose,
    inverse,
    normals_from_depth,
    project,
    random_rotation,
    rotation_error_deg,
    scalar_gradient,
    scalar_gradient_adjoint,
)

seeds = st.integers(0, 2**31 - 1)


def test_intrinsics_reject_bad_focal_and_principal_point():
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)


def test_crop_moves_principal_point_only():
    k = CameraIntrinsics(100.0, 90.0, 50.0, 40.0, 100, 80)
    c = k.crop(10, 5, 60, 50)
    assert (c.fx, c.fy, c.cx, c.cy, c.width, c.height) == (100.0, 90.0, 40.0, 35.0, 60, 50)
    with pytest.raises(InvalidInputError):
        k.crop(60, 0, 30, 30)


def test_clamp_depth_keeps_zeros_and_counts():
    d = np.array([[0.0, 0.1, 1.0, 9.0]])
    out, n = clamp_depth(d)
    assert out.tolist() == [[0.0, 0.3, 1.0, 8.0]]
    assert n == 2


@given(seeds)
def test_backproject_project_roundtrip(seed):
    rng = np.random.default_rng(seed)
    k = small_camera(12, 10, 15.0)
    depth = rng.uniform(0.5, 3.0, (12, 10))
    depth[rng.random(depth.shape) < 0.2] = 0
    cloud = backproject(depth, k)
    assert len(cloud) == np.count_nonzero(depth)
    np.testing.assert_allclose(project(cloud, k), cloud.pixels, atol=1e-12)


def test_project_rejects_points_behind_camera():
    with pytest.raises(ProjectionDomainError):
        project(np.array([[0.0, 0.0, -1.0]]), small_camera())


def test_backproject_shape_mismatch():
    with pytest.raises(InvalidInputError):
        backproject(np.ones((3, 3)), small_camera())


@given(seeds)
def test_gradient_adjoint(seed):
    # <grad f, g> == <f, grad^T g> on random masks
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(7, 9))
    valid = rng.random((7, 9)) > 0.2
    gu, gv = rng.normal(size=(7, 9)), rng.normal(size=(7, 9))
    g = scalar_gradient(f, valid)
    lhs = np.sum(g.du * gu) + np.sum(g.dv * gv)
    rhs = np.sum(f * scalar_gradient_adjoint(gu, gv, valid))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_plane_normals_are_constant_and_unit():
    k = small_camera(20, 20, 30.0)
    n = np.array([0.2, -0.3, -1.0])
    n /= np.linalg.norm(n)
    nm = normals_from_depth(plane_depth(k, n, -1.5), k)
    got = nm.normals[nm.valid]
    np.testing.assert_allclose(np.linalg.norm(got, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.abs(got @ n), 1.0, atol=1e-9)


@given(seeds)
def test_transform_algebra(seed):
    rng = np.random.default_rng(seed)
    a, b = random_transform(rng), random_transform(rng)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose((inverse(a) @ a).matrix, np.eye(4), atol=1e-12)
    np.testing.assert_array_equal(RigidTransform.from_dict(a.to_dict()).matrix, a.matrix)


def test_rigid_transform_rejects_reflection():
    with pytest.raises(InvalidInputError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


@given(seeds, st.floats(0.0, 179.0))
def test_rotation_error_of_axis_rotation(seed, deg):
    R = random_rotation(np.random.default_rng(seed))
    assert rotation_error_deg(R @ axis_rotation("z", deg), R) == pytest.approx(deg, abs=1e-6)
