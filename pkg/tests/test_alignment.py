import itertools

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from cryorient.alignment import AlignConfig, O4Transform, align, e_or, o4_matrix
from cryorient.errors import ValidationError

from conftest import random_quats


def plane_rotation(theta, i, j):
    R = np.eye(4)
    R[i, i] = R[j, j] = np.cos(theta)
    R[i, j], R[j, i] = -np.sin(theta), np.sin(theta)
    return R


def test_identity_and_reflection():
    np.testing.assert_allclose(o4_matrix(O4Transform()), np.eye(4))
    np.testing.assert_allclose(o4_matrix(O4Transform(m=-1)), np.diag([-1.0, 1, 1, 1]))


def test_product_order(rng):
    angles = rng.uniform(0, 2 * np.pi, 6)
    expected = np.diag([-1.0, 1, 1, 1])
    for theta, (i, j) in zip(angles, itertools.combinations(range(4), 2)):
        expected = expected @ plane_rotation(theta, i, j)
    np.testing.assert_allclose(o4_matrix(O4Transform(tuple(angles), -1)), expected, atol=1e-12)


def test_orthogonality_and_determinant(rng):
    for _ in range(100):
        m = int(rng.choice([-1, 1]))
        T = o4_matrix(O4Transform(tuple(rng.uniform(0, 2 * np.pi, 6)), m))
        np.testing.assert_allclose(T @ T.T, np.eye(4), atol=1e-8)
        assert np.linalg.det(T) == pytest.approx(m, abs=1e-8)


def test_angle_gradients_by_finite_differences(rng):
    from cryorient.alignment import _matrices_and_grads

    theta = rng.uniform(0, 2 * np.pi, (1, 6))
    _, G = _matrices_and_grads(theta, -1)
    h = 1e-6
    for k in range(6):
        tp, tm = theta.copy(), theta.copy()
        tp[0, k] += h
        tm[0, k] -= h
        fd = (_matrices_and_grads(tp, -1)[0] - _matrices_and_grads(tm, -1)[0]) / (2 * h)
        np.testing.assert_allclose(G[0, k], fd[0], atol=1e-8)


def test_e_or_fixed_transform(rng):
    q = random_quats(rng, 50)
    assert e_or(q, q) == 0
    assert e_or(q, -q) == 0
    R = special_ortho_group.rvs(4, random_state=1)
    assert e_or(q, q @ R.T, np.linalg.inv(R)) < 1e-9


def test_e_or_length_mismatch(rng):
    with pytest.raises(ValidationError):
        e_or(random_quats(rng, 3), random_quats(rng, 4))


def test_bad_reflection_flag():
    with pytest.raises(ValidationError):
        O4Transform(m=0)


def test_align_self():
    q = random_quats(np.random.default_rng(0), 100)
    assert align(q, q).e_or < 1e-3


@pytest.mark.parametrize("m", [1, -1])
def test_planted_transform(m):
    rng = np.random.default_rng(40 + m)
    q = random_quats(rng, 300)
    T0 = np.diag([m, 1.0, 1, 1]) @ special_ortho_group.rvs(4, random_state=rng)
    res = align(q, q @ T0.T, AlignConfig(seed=m + 5))
    assert res.e_or < 1e-2
    assert res.transform.m == m


def test_never_worse_than_identity(rng):
    q = random_quats(rng, 40)
    qh = random_quats(rng, 40)
    res = align(q, qh, AlignConfig(steps=5, restarts=2))
    assert res.e_or <= e_or(q, qh) + 1e-12
    assert res.e_or == pytest.approx(np.mean(res.errors))


def test_joint_permutation_invariance(rng):
    q = random_quats(rng, 60)
    qh = q @ special_ortho_group.rvs(4, random_state=3).T
    t = O4Transform(tuple(rng.uniform(0, 2 * np.pi, 6)))
    perm = rng.permutation(60)
    assert e_or(q[perm], qh[perm], t) == pytest.approx(e_or(q, qh, t), rel=1e-12)


def test_result_json_fields(rng):
    q = random_quats(rng, 30)
    out = align(q, q, AlignConfig(steps=10, restarts=2)).to_json()
    assert set(out) == {"e_or", "m", "angles", "per_orientation_errors_histogram", "restart_traces"}
    assert len(out["angles"]) == 6 and len(out["restart_traces"]) == 4
