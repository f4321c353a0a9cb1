import numpy as np
import pytest

from cryorient.errors import ValidationError
from cryorient.geometry import SamplingScheme, sample_orientations
from cryorient.reconstruct import (
    ReconstructionConfig,
    backproject,
    cgls_reconstruct,
    fsc,
    resolution_at,
)
from cryorient.simulate import ProjectionStack, Volume, make_phantom, project

from conftest import random_quats


def test_backprojection_is_adjoint(rng):
    x = rng.standard_normal((16, 16, 16))
    q = random_quats(rng, 7)
    y = rng.standard_normal((7, 16, 16))
    lhs = np.vdot(project(Volume(x), q), y)
    rhs = np.vdot(x, backproject(y, q, (16, 16, 16)).data)
    assert abs(lhs - rhs) <= 1e-4 * abs(lhs)


def test_backprojection_zero_and_linear(rng):
    q = random_quats(rng, 4)
    assert not backproject(np.zeros((4, 12, 12)), q, (12, 12, 12)).data.any()
    a, b = rng.standard_normal((2, 4, 12, 12))
    lin = backproject(2.0 * a - 3.0 * b, q, (12, 12, 12)).data
    ref = 2.0 * backproject(a, q, (12, 12, 12)).data - 3.0 * backproject(b, q, (12, 12, 12)).data
    np.testing.assert_allclose(lin, ref, atol=1e-9)


@pytest.fixture(scope="module")
def phantom16():
    return make_phantom("asymmetric-blobs", 16, seed=2)


@pytest.fixture(scope="module")
def clean16(phantom16):
    q = sample_orientations(SamplingScheme(), 200, seed=3)
    return ProjectionStack(project(phantom16, q)), q


def _rel(x, ref):
    return np.linalg.norm(x - ref) / np.linalg.norm(ref)


def test_cgls_with_true_orientations(phantom16, clean16):
    stack, q = clean16
    vol, trace = cgls_reconstruct(stack, q, ReconstructionConfig(iterations=30))
    assert _rel(vol.data, phantom16.data) < 0.1
    assert trace[0] == pytest.approx(np.linalg.norm(stack.images))
    assert np.all(np.diff(trace) <= 1e-9 * trace[0])


def test_cgls_with_random_orientations_is_worse(phantom16, clean16):
    stack, q = clean16
    good, _ = cgls_reconstruct(stack, q, ReconstructionConfig(iterations=30))
    wrong = sample_orientations(SamplingScheme(), len(q), seed=99)
    bad, _ = cgls_reconstruct(stack, wrong, ReconstructionConfig(iterations=30))
    assert _rel(bad.data, phantom16.data) > 2 * _rel(good.data, phantom16.data)


def test_cgls_zero_stack(rng):
    q = random_quats(rng, 5)
    vol, trace = cgls_reconstruct(ProjectionStack(np.zeros((5, 8, 8))), q)
    assert not vol.data.any()
    assert trace == [0.0]


def test_cgls_tikhonov_shrinks(phantom16, clean16):
    stack, q = clean16
    plain, _ = cgls_reconstruct(stack, q, ReconstructionConfig(iterations=10))
    shrunk, trace = cgls_reconstruct(stack, q, ReconstructionConfig(iterations=10, epsilon=1e3))
    assert np.linalg.norm(shrunk.data) < np.linalg.norm(plain.data)
    assert np.all(np.diff(trace) <= 1e-9 * trace[0])


def test_cgls_validation(rng):
    stack = ProjectionStack(np.zeros((3, 8, 8)))
    with pytest.raises(ValidationError):
        cgls_reconstruct(stack, random_quats(rng, 4))
    with pytest.raises(ValidationError):
        ReconstructionConfig(iterations=0)
    with pytest.raises(ValidationError):
        ReconstructionConfig(epsilon=-1.0)


def test_fsc_of_volume_with_itself(phantom16):
    curve = fsc(phantom16, phantom16)
    np.testing.assert_allclose(curve.fsc, 1.0, atol=1e-9)
    assert curve.resolution is None


def test_fsc_scale_invariant(phantom16, rng):
    other = Volume(phantom16.data + 0.05 * rng.standard_normal(phantom16.shape))
    a = fsc(phantom16, other).fsc
    b = fsc(Volume(3.0 * phantom16.data), Volume(0.5 * other.data)).fsc
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_fsc_independent_noise_is_near_zero():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 64, 64, 64))
    curve = fsc(Volume(a), Volume(b), shells=16)
    assert np.all(np.abs(curve.fsc[3:]) < 0.1)


def test_fsc_threshold_and_resolution():
    freq = np.array([0.1, 0.2, 0.3, 0.4])
    vals = np.array([0.9, 0.7, 0.3, 0.1])
    # crossing 0.5 halfway between 0.2 and 0.3
    assert resolution_at(freq, vals, 0.5) == pytest.approx(1 / 0.25)
    assert resolution_at(freq, vals, 0.143) == pytest.approx(1 / (0.3 + 0.157 / 0.2 * 0.1))
    assert resolution_at(freq, vals, 0.05) is None


def test_fsc_json_key_follows_threshold(phantom16, rng):
    noisy = Volume(phantom16.data + rng.standard_normal(phantom16.shape))
    curve = fsc(phantom16, noisy, threshold=0.143)
    assert set(curve.to_json()) == {"resolution_at_0.143", "threshold"}


def test_fsc_shape_mismatch():
    with pytest.raises(ValidationError):
        fsc(Volume(np.zeros((8, 8, 8))), Volume(np.zeros((8, 8, 9))))


def test_fsc_skips_shells_finer_than_grid(phantom16):
    curve = fsc(phantom16, phantom16, shells=16)
    assert len(curve.freq) < 16
    assert np.all(np.diff(curve.freq) > 0)
