import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation
from kdereg.exceptions import DegenerateError, InputError
from kdereg.geometry import (
    CorrespondenceSet,
    PointCloud,
    RigidTransform,
    apply_transform,
    compose,
    polar_orthonormalize,
    rmse,
    rotation_about_axis,
    rotation_angle,
)


def test_point_cloud_is_read_only():
    cloud = PointCloud(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0


def test_point_cloud_rejects_bad_shapes_and_values():
    with pytest.raises(InputError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(InputError):
        PointCloud(np.array([[0.0, np.nan, 1.0]]))


def test_concatenate_keeps_colors_only_when_all_have_them():
    a = PointCloud(np.zeros((2, 3)), np.full((2, 3), 7, dtype=np.uint8))
    b = PointCloud(np.ones((3, 3)))
    assert PointCloud.concatenate([a, a]).colors.shape == (4, 3)
    both = PointCloud.concatenate([a, b])
    assert len(both) == 5 and both.colors is None


def test_empty_cloud():
    assert len(PointCloud.empty()) == 0


def test_identity_matrix():
    np.testing.assert_array_equal(RigidTransform.identity().matrix, np.eye(4))


def test_transform_validates_rotation():
    with pytest.raises(InputError, match="orthonormal"):
        RigidTransform(np.diag([1.0, 1.0, 1.1]), np.zeros(3))
    with pytest.raises(InputError, match="determinant"):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_orthonormalize_is_explicit(rng):
    r = random_rotation(rng) + 1e-6 * rng.standard_normal((3, 3))
    with pytest.raises(InputError):
        RigidTransform(r, np.zeros(3))
    t = RigidTransform(r, np.zeros(3), orthonormalize=True)
    np.testing.assert_allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-14)


def test_from_matrix_checks_bottom_row():
    m = np.eye(4)
    m[3, 0] = 0.5
    with pytest.raises(InputError, match="bottom row"):
        RigidTransform.from_matrix(m)
    np.testing.assert_array_equal(RigidTransform.from_matrix(np.eye(4).reshape(-1)).matrix, np.eye(4))


def test_inverse_round_trip(rng):
    t = RigidTransform(random_rotation(rng), rng.normal(size=3))
    pts = rng.normal(size=(20, 3))
    np.testing.assert_allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)
    np.testing.assert_allclose((t @ t.inverse()).matrix, np.eye(4), atol=1e-12)


def test_compose_order(rng):
    a = RigidTransform(random_rotation(rng), rng.normal(size=3))
    b = RigidTransform(random_rotation(rng), rng.normal(size=3))
    pts = rng.normal(size=(10, 3))
    np.testing.assert_allclose(compose(a, b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)
    np.testing.assert_allclose(compose(a, b).matrix, a.matrix @ b.matrix, atol=1e-12)


def test_apply_transform_keeps_colors(rng):
    colors = rng.integers(0, 255, (5, 3)).astype(np.uint8)
    cloud = PointCloud(rng.normal(size=(5, 3)), colors)
    moved = apply_transform(cloud, RigidTransform(np.eye(3), [1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(moved.colors, colors)
    np.testing.assert_allclose(moved.points, cloud.points + [1, 2, 3])


@pytest.mark.parametrize("angle", [0.0, 1e-10, 1e-5, 0.3, 1.5, 3.0, np.pi])
def test_rotation_angle_recovers_angle(angle):
    r = rotation_about_axis([0.2, -1.0, 0.4], angle)
    assert rotation_angle(r) == pytest.approx(angle, abs=1e-14, rel=1e-9)


def test_polar_orthonormalize_fixes_reflection_free_noise(rng):
    r = random_rotation(rng)
    assert np.allclose(polar_orthonormalize(r + 1e-8), r, atol=1e-7)


def test_correspondence_validation():
    with pytest.raises(InputError, match="source has"):
        CorrespondenceSet(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(InputError, match="weights"):
        CorrespondenceSet(np.zeros((3, 3)), np.zeros((3, 3)), [1.0, -1.0, 1.0])
    with pytest.raises(InputError, match="weights given"):
        CorrespondenceSet(np.zeros((3, 3)), np.zeros((3, 3)), [1.0, 1.0])
    cs = CorrespondenceSet(np.zeros((3, 3)), np.zeros((3, 3)))
    np.testing.assert_array_equal(cs.weights, np.ones(3))


def test_rmse_of_exact_pairs_is_zero(rng):
    t = RigidTransform(random_rotation(rng), rng.normal(size=3))
    src = rng.normal(size=(30, 3))
    cs = CorrespondenceSet(src, t.apply(src))
    assert rmse(cs, t) < 1e-14
    with pytest.raises(DegenerateError):
        rmse(cs.select(np.zeros(30, dtype=bool)), t)


@settings(max_examples=50, deadline=None)
@given(
    angle=st.floats(-np.pi, np.pi),
    axis=st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda a: np.linalg.norm(a) > 1e-3),
    shift=st.tuples(*[st.floats(-100, 100)] * 3),
)
def test_transform_preserves_distances(angle, axis, shift):
    t = RigidTransform(rotation_about_axis(axis, angle), shift)
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-4.0, 0.5, 2.0]])
    moved = t.apply(pts)
    before = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    after = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
    np.testing.assert_allclose(after, before, atol=1e-9)
