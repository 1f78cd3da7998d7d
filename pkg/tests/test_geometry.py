import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from posereg.geometry import (
    DegenerateOrientationError,
    Pose,
    average_pose_vectors,
    format_pose_fields,
    parse_pose_fields,
    position_error_m,
    quat_angular_error_deg,
    quat_canonicalize,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    random_unit_quaternions,
)
from posereg.geometry import _rotation_matrix

from oracles import rotation_matrix, trace_angle_deg

finite = st.floats(-10, 10, allow_nan=False)
quats = st.lists(finite, min_size=4, max_size=4).map(np.array).filter(lambda q: np.linalg.norm(q) > 1e-3)


@given(quats)
def test_normalize_gives_unit_norm(q):
    assert np.linalg.norm(quat_normalize(q)) == pytest.approx(1.0, abs=1e-12)


def test_normalize_rejects_zero():
    with pytest.raises(DegenerateOrientationError):
        quat_normalize([0.0, 0.0, 0.0, 0.0])


@given(quats)
def test_canonicalize_is_idempotent_and_sign_invariant(q):
    c = quat_canonicalize(q)
    np.testing.assert_array_equal(quat_canonicalize(c), c)
    np.testing.assert_array_equal(quat_canonicalize(-q), c)
    assert c[0] >= 0


def test_canonicalize_zero_scalar_uses_first_nonzero():
    np.testing.assert_array_equal(quat_canonicalize([0.0, 0.0, -1.0, 0.0]), [0.0, 0.0, 1.0, 0.0])
    np.testing.assert_array_equal(quat_canonicalize([0.0, 0.6, -0.8, 0.0]), [0.0, 0.6, -0.8, 0.0])


def test_canonicalize_batched_matches_single():
    q = random_unit_quaternions(np.random.default_rng(3), 50)
    q[0] = [0.0, -1.0, 0.0, 0.0]
    batch = quat_canonicalize(q)
    for row, single in zip(batch, q):
        np.testing.assert_array_equal(row, quat_canonicalize(single))


@given(quats, quats)
def test_angular_error_properties(a, b):
    a, b = quat_normalize(a), quat_normalize(b)
    e = quat_angular_error_deg(a, b)
    assert 0.0 <= e <= 180.0
    assert quat_angular_error_deg(a, -b) == pytest.approx(e, abs=1e-9)
    assert quat_angular_error_deg(b, a) == pytest.approx(e, abs=1e-9)
    assert quat_angular_error_deg(a, a) == pytest.approx(0.0, abs=1e-6)


def test_angular_error_known_values():
    qx90 = quat_from_axis_angle([1, 0, 0], math.pi / 2)
    ident = np.array([1.0, 0, 0, 0])
    assert quat_angular_error_deg(ident, qx90) == pytest.approx(90.0, abs=1e-12)
    assert quat_angular_error_deg(ident, [0.0, 0.0, 0.0, 1.0]) == pytest.approx(180.0)
    # tiny angles keep full precision
    tiny = quat_from_axis_angle([0, 0, 1], 1e-9)
    assert quat_angular_error_deg(ident, tiny) == pytest.approx(math.degrees(1e-9), rel=1e-6)


def test_angular_error_matches_arccos_form():
    rng = np.random.default_rng(5)
    a, b = random_unit_quaternions(rng, 1000), random_unit_quaternions(rng, 1000)
    ref = np.degrees(2 * np.arccos(np.clip(np.abs(np.sum(a * b, axis=1)), 0, 1)))
    np.testing.assert_allclose(quat_angular_error_deg(a, b), ref, atol=1e-6)


@settings(max_examples=200)
@given(quats, quats)
def test_angular_error_is_triangle_consistent(a, b):
    # composition: the angle between q and q*r equals the rotation angle of r
    a, b = quat_normalize(a), quat_normalize(b)
    r_angle = quat_angular_error_deg(np.array([1.0, 0, 0, 0]), b)
    assert quat_angular_error_deg(a, quat_multiply(a, b)) == pytest.approx(r_angle, abs=1e-7)


def test_rotation_matrix_matches_sandwich_product():
    for q in random_unit_quaternions(np.random.default_rng(6), 100):
        np.testing.assert_allclose(_rotation_matrix(q), rotation_matrix(q), atol=1e-12)


def test_multiply_composes_rotations():
    rng = np.random.default_rng(7)
    a, b = random_unit_quaternions(rng, 2)
    np.testing.assert_allclose(_rotation_matrix(quat_multiply(a, b)), _rotation_matrix(a) @ _rotation_matrix(b), atol=1e-12)


def test_angular_error_against_trace_oracle():
    rng = np.random.default_rng(8)
    a, b = random_unit_quaternions(rng, 500), random_unit_quaternions(rng, 500)
    got = quat_angular_error_deg(a, b)
    for i in range(500):
        assert abs(got[i] - trace_angle_deg(a[i], b[i])) < 1e-6


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_position_error_is_euclidean(p, q):
    assert position_error_m(p, q) == pytest.approx(math.dist(p, q))


# -- Pose ------------------------------------------------------------------------


def test_pose_normalizes_canonicalizes_and_freezes():
    p = Pose([1, 2, 3], [-2.0, 0, 0, 0])
    np.testing.assert_array_equal(p.orientation, [1.0, 0, 0, 0])
    with pytest.raises(ValueError):
        p.position[0] = 5.0
    with pytest.raises(DegenerateOrientationError):
        Pose([0, 0, 0], [0, 0, 0, 0])


@given(st.lists(finite, min_size=3, max_size=3), quats)
def test_pose_text_round_trip_is_exact(pos, q):
    pose = Pose(pos, q)
    back = parse_pose_fields(format_pose_fields(pose).split())
    assert back == pose


def test_parse_rejects_non_finite():
    with pytest.raises(ValueError):
        parse_pose_fields(["0", "0", "nan", "1", "0", "0", "0"])


def test_pose_vector_round_trip():
    v = np.array([1.0, 2.0, 3.0, 0.5, 0.5, 0.5, 0.5])
    np.testing.assert_array_equal(Pose.from_vector(v).as_vector(), v)
    with pytest.raises(ValueError):
        Pose.from_vector(v[:6])


# -- averaging -------------------------------------------------------------------


@given(quats, st.lists(st.booleans(), min_size=5, max_size=5))
def test_average_ignores_quaternion_signs(q, flips):
    rng = np.random.default_rng(0)
    base = quat_normalize(q)
    qs = np.array([quat_normalize(base + 0.05 * rng.normal(size=4)) for _ in flips])
    signs = np.where(flips, -1.0, 1.0)[:, None]
    vecs = np.hstack([rng.normal(size=(5, 3)), qs])
    flipped = np.hstack([vecs[:, :3], qs * signs])
    a, b = average_pose_vectors(vecs), average_pose_vectors(flipped)
    np.testing.assert_allclose(a.orientation, b.orientation, atol=1e-12)
    np.testing.assert_allclose(a.position, vecs[:, :3].mean(axis=0))


def test_average_of_identical_poses_is_that_pose():
    v = np.array([1.0, 2.0, 3.0, 0.0, 0.6, 0.8, 0.0])
    avg = average_pose_vectors(np.tile(v, (4, 1)))
    np.testing.assert_allclose(avg.as_vector(), v, atol=1e-15)


def test_average_scale_invariant_per_crop():
    v = np.array([[0, 0, 0, 1.0, 0, 0, 0], [0, 0, 0, 0.0, 0, 0, 1.0]])
    scaled = v.copy()
    scaled[0, 3:] *= 10.0
    np.testing.assert_allclose(average_pose_vectors(v).orientation, average_pose_vectors(scaled).orientation)


def test_average_of_orthogonal_pair_and_zero_quaternion():
    # alignment to the first crop keeps the mean away from zero
    v = np.array([[0, 0, 0, 1.0, 0, 0, 0], [0, 0, 0, 0.0, 1.0, 0, 0]])
    expected = np.array([1.0, 1.0, 0, 0]) / math.sqrt(2)
    np.testing.assert_allclose(average_pose_vectors(v).orientation, expected)
    with pytest.raises(DegenerateOrientationError):
        average_pose_vectors(np.array([[0, 0, 0, 0, 0, 0, 0.0]]))
    with pytest.raises(ValueError):
        average_pose_vectors(np.zeros((0, 7)))


def test_geometry_suite_speed_on_many_quaternions():
    import time

    rng = np.random.default_rng(9)
    t0 = time.perf_counter()
    a, b = random_unit_quaternions(rng, 10_000), random_unit_quaternions(rng, 10_000)
    e = quat_angular_error_deg(a, b)
    np.testing.assert_allclose(quat_angular_error_deg(a, -b), e, atol=1e-9)
    c = quat_canonicalize(a)
    np.testing.assert_array_equal(quat_canonicalize(c), c)
    assert time.perf_counter() - t0 < 10.0
