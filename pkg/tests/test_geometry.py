import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from scipy.stats import chi2

from cryorient import geometry as g
from cryorient.errors import ValidationError

from conftest import random_quats


def scipy_matrix(q):
    # scipy stores quaternions scalar-last
    return Rotation.from_quat(np.roll(q, -1, axis=-1)).as_matrix()


def test_axis_angle_closed_forms():
    np.testing.assert_allclose(g.quat_from_axis_angle([0, 0, 1], 0.0), [1, 0, 0, 0])
    np.testing.assert_allclose(g.quat_from_axis_angle([0, 0, 1], np.pi), [0, 0, 0, 1], atol=1e-15)
    s = np.sqrt(2) / 2
    np.testing.assert_allclose(g.quat_from_axis_angle([1, 0, 0], np.pi / 2), [s, s, 0, 0])


def test_axis_angle_rejects_non_unit_axis():
    with pytest.raises(ValidationError):
        g.quat_from_axis_angle([1, 1, 0], 0.3)


def test_matrix_matches_scipy(rng):
    q = random_quats(rng, 200)
    np.testing.assert_allclose(g.quat_to_matrix(q), scipy_matrix(q), atol=1e-12)


def test_matrix_identity_and_double_cover(rng):
    np.testing.assert_allclose(g.quat_to_matrix(np.array([1.0, 0, 0, 0])), np.eye(3))
    q = random_quats(rng, 10)
    np.testing.assert_allclose(g.quat_to_matrix(q), g.quat_to_matrix(-q))


def test_matrix_is_a_rotation(rng):
    R = g.quat_to_matrix(random_quats(rng, 100))
    np.testing.assert_allclose(R @ np.swapaxes(R, -1, -2), np.broadcast_to(np.eye(3), R.shape), atol=1e-8)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-8)


def test_product_homomorphism(rng):
    for _ in range(100):
        q, p = random_quats(rng, 2)
        lhs = g.quat_to_matrix(g.multiply(q, p))
        rhs = g.quat_to_matrix(q) @ g.quat_to_matrix(p)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_matrix_to_quat_round_trip(rng):
    q = g.canonicalize(random_quats(rng, 500))
    np.testing.assert_allclose(g.matrix_to_quat(g.quat_to_matrix(q)), q, atol=1e-12)


def test_euler_simple_cases():
    np.testing.assert_allclose(g.euler_zyz_to_quat([0, 0, 0]), [1, 0, 0, 0])
    np.testing.assert_allclose(g.euler_zyz_to_quat([0, np.pi / 2, 0]), g.quat_from_axis_angle([0, 1, 0], np.pi / 2))


def test_euler_matrix_is_extrinsic_product(rng):
    e = np.stack([rng.uniform(0, 2 * np.pi, 1000), rng.uniform(0, np.pi, 1000), rng.uniform(0, 2 * np.pi, 1000)], 1)
    # R = Rz(t3) Ry(t2) Rz(t1); scipy lowercase axes are extrinsic, applied first to last
    oracle = Rotation.from_euler("zyz", e[:, ::-1]).as_matrix()
    np.testing.assert_allclose(g.quat_to_matrix(g.euler_zyz_to_quat(e)), oracle, atol=1e-8)


def test_euler_round_trip_away_from_gimbal(rng):
    e = np.stack([rng.uniform(0, 2 * np.pi, 1000), rng.uniform(0.01, np.pi - 0.01, 1000),
                  rng.uniform(0, 2 * np.pi, 1000)], 1)
    back = g.quat_to_euler_zyz(g.euler_zyz_to_quat(e))
    diff = np.angle(np.exp(1j * (back - e)))
    assert np.max(np.abs(diff)) < 1e-6


@pytest.mark.parametrize("t2", [0.0, np.pi])
def test_gimbal_lock_folds_into_theta1(t2):
    e = np.array([1.1, t2, 0.4])
    back = g.quat_to_euler_zyz(g.euler_zyz_to_quat(e))
    assert back[0] == 0.0
    assert back[1] == t2
    np.testing.assert_allclose(g.quat_to_matrix(g.euler_zyz_to_quat(back)),
                               g.quat_to_matrix(g.euler_zyz_to_quat(e)), atol=1e-12)


def test_euler_out_of_range():
    with pytest.raises(ValidationError):
        g.euler_zyz_to_quat([0, 4.0, 0])
    with pytest.raises(ValidationError):
        g.euler_zyz_to_quat([2 * np.pi, 1.0, 0])


def test_distance_basics(rng):
    q = random_quats(rng, 1)[0]
    assert g.d_q(q, q) == 0
    assert g.d_q(q, -q) == 0
    z90 = g.quat_from_axis_angle([0, 0, 1], np.pi / 2)
    np.testing.assert_allclose(g.d_q([1, 0, 0, 0], z90), np.pi / 2)


def test_distance_matches_relative_rotation_angle(rng):
    a, b = random_quats(rng, 300), random_quats(rng, 300)
    rel = Rotation.from_matrix(np.swapaxes(scipy_matrix(a), -1, -2) @ scipy_matrix(b)).magnitude()
    np.testing.assert_allclose(g.d_q(a, b), rel, atol=1e-7)


def test_distance_is_a_metric_on_the_quotient(rng):
    a, b, c = (random_quats(rng, 1000) for _ in range(3))
    assert np.all(g.d_q(a, b) >= 0)
    np.testing.assert_array_equal(g.d_q(a, b), g.d_q(b, a))
    assert np.all(g.d_q(a, c) <= g.d_q(a, b) + g.d_q(b, c) + 1e-12)


def test_distance_total_under_overshoot():
    q = np.array([1.0 + 1e-15, 0, 0, 0])
    assert np.isfinite(g.d_q(q, q)) and g.d_q(q, q) == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_canonicalize_idempotent_and_matrix_preserving(v):
    q = g.normalize(np.array(v))
    c = g.canonicalize(q)
    np.testing.assert_array_equal(g.canonicalize(c), c)
    np.testing.assert_allclose(g.quat_to_matrix(c), g.quat_to_matrix(q), atol=1e-12)
    assert c[np.flatnonzero(c)[0]] > 0


def test_single_sample_is_unit():
    q = g.sample_orientations(g.SamplingScheme(), 1, seed=0)
    assert q.shape == (1, 4)
    np.testing.assert_allclose(np.linalg.norm(q), 1.0, atol=1e-12)


def test_sampling_is_deterministic():
    s = g.SamplingScheme.preset("uniform-euler", "half")
    np.testing.assert_array_equal(g.sample_orientations(s, 50, 3), g.sample_orientations(s, 50, 3))


def rotation_angle_chi2(q, bins=30):
    theta = g.rotation_angle(q)
    edges = np.linspace(0, np.pi, bins + 1)
    observed, _ = np.histogram(theta, edges)
    # CDF of (1 - cos t) / pi is (t - sin t) / pi
    cdf = (edges - np.sin(edges)) / np.pi
    expected = len(q) * np.diff(cdf)
    stat = np.sum((observed - expected) ** 2 / expected)
    return stat, chi2.ppf(0.99, bins - 1)


def test_uniform_so3_rotation_angle_density():
    q = g.sample_orientations(g.SamplingScheme(), 100_000, seed=0)
    stat, crit = rotation_angle_chi2(q)
    assert stat < crit


def test_uniform_euler_is_not_haar():
    # the chi-square test has power: Euler-uniform draws fail it
    q = g.sample_orientations(g.SamplingScheme("uniform-euler"), 100_000, seed=0)
    stat, crit = rotation_angle_chi2(q)
    assert stat > crit


@pytest.mark.parametrize("kind", ["uniform-so3", "uniform-euler"])
@pytest.mark.parametrize("directions,t2max,t1max", [("half", np.pi / 2, 2 * np.pi), ("quarter", np.pi / 2, np.pi)])
def test_direction_restriction(kind, directions, t2max, t1max):
    q = g.sample_orientations(g.SamplingScheme.preset(kind, directions), 2000, seed=1)
    e = g.quat_to_euler_zyz(q)
    assert len(q) == 2000
    assert np.all(e[:, 1] < t2max + 1e-9)
    assert np.all(e[:, 2] < t1max + 1e-9)


def test_empty_restriction_rejected():
    with pytest.raises(ValidationError):
        g.SamplingScheme("uniform-so3", (1.0, 1.0))
    with pytest.raises(ValidationError):
        g.SamplingScheme.preset("uniform-so3", "eighth")


def test_pairwise_distance_skew():
    q = g.sample_orientations(g.SamplingScheme(), 400, seed=5)
    i, j = np.triu_indices(400, 1)
    counts, edges = np.histogram(g.d_q(q[i], q[j]), bins=20, range=(0, np.pi))
    assert edges[np.argmax(counts)] > np.pi / 2
