"""Phantom volumes and synthetic projection stacks.

The imaging model is ``p = S_t P_q x + n``: project, then shift, then add
white Gaussian noise.  The microscope point-spread function is not modeled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import projector
from .errors import ValidationError

PHANTOM_KINDS = ("blobs", "shell", "asymmetric-blobs")
# phantom support stays inside this fraction of the half-width
SUPPORT_RADIUS = 0.8


@dataclass
class Volume:
    """Scalar density on a regular grid, stored ``(nz, ny, nx)``."""

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValidationError(f"volume must be 3D with positive sizes, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("volume contains non-finite values")
        if not self.voxel_size > 0:
            raise ValidationError("voxel_size must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class ProjectionStack:
    """``(count, height, width)`` images sharing one pixel size."""

    images: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3 or min(self.images.shape[1:]) < 1:
            raise ValidationError(f"stack must be (count, h, w), got {self.images.shape}")
        if not np.all(np.isfinite(self.images)):
            raise ValidationError("stack contains non-finite values")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1:]


@dataclass
class PerturbationSpec:
    """Triangular shifts in ``[-shift_limit, shift_limit]`` per axis and noise of variance ``noise_var``."""

    shift_limit: float = 0.0
    noise_var: float = 0.0

    def __post_init__(self):
        for name in ("shift_limit", "noise_var"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class GroundTruth:
    orientations: np.ndarray
    shifts: np.ndarray
    noise_seeds: list[int] = field(default_factory=list)


# --- phantoms -------------------------------------------------------------

def _centered_coords(size: int):
    c = size // 2
    ax = np.arange(size) - c
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    return x.astype(float), y.astype(float), z.astype(float)


def _random_blobs(rng, size, count, sigma_range, amp_range, distinct):
    x, y, z = _centered_coords(size)
    limit = SUPPORT_RADIUS * (size / 2.0)
    vol = np.zeros((size, size, size))
    if distinct:
        sigmas = np.linspace(*sigma_range, count) * size
        amps = np.linspace(*amp_range, count)
        rng.shuffle(amps)
    else:
        sigmas = rng.uniform(*sigma_range, count) * size
        amps = rng.uniform(*amp_range, count)
    for sigma, amp in zip(sigmas, amps):
        # center within the ball that keeps 3 sigma inside the support radius
        reach = limit - 3.0 * sigma
        while True:
            c = rng.uniform(-reach, reach, 3)
            if np.linalg.norm(c) <= reach:
                break
        r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        vol += amp * np.exp(-r2 / (2.0 * sigma**2))
    return vol


def make_phantom(kind: str, size: int, seed: int = 0, voxel_size: float = 1.0) -> Volume:
    """Synthetic non-negative density whose support sits well inside the grid.

    ``shell`` is a smooth radial shell (values depend on radius only);
    ``blobs`` is a random sum of Gaussians; ``asymmetric-blobs`` uses blobs
    of pairwise distinct widths and amplitudes so no rotation maps it onto
    itself.
    """
    if kind not in PHANTOM_KINDS:
        raise ValidationError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    if size < 8:
        raise ValidationError(f"phantom size must be at least 8, got {size}")
    rng = np.random.default_rng(seed)
    x, y, z = _centered_coords(size)
    r = np.sqrt(x**2 + y**2 + z**2)
    if kind == "shell":
        radius, width = 0.18 * size, 0.065 * size
        data = np.exp(-((r - radius) ** 2) / (2.0 * width**2))
    elif kind == "blobs":
        data = _random_blobs(rng, size, 6, (0.05, 0.09), (0.5, 1.0), distinct=False)
    else:
        data = _random_blobs(rng, size, 7, (0.045, 0.1), (0.4, 1.0), distinct=True)
    # Gaussian tails are cut at the support ball so no rotation moves mass off the grid
    data[r > SUPPORT_RADIUS * size / 2.0] = 0.0
    return Volume(data, voxel_size)


# --- imaging operators ----------------------------------------------------

def project(volume: Volume, q, out_size=None) -> np.ndarray:
    """Projection of ``volume`` along orientation ``q``; ``(h, w)`` for one quaternion."""
    if out_size is None:
        out_size = volume.shape[1:]
    elif np.isscalar(out_size):
        out_size = (int(out_size), int(out_size))
    q = np.asarray(q, dtype=float)
    images = projector.project(volume.data, q, out_size, volume.voxel_size)
    return images[0] if q.ndim == 1 else images


def _shift_axis(p: np.ndarray, t: float, axis: int) -> np.ndarray:
    n = p.shape[axis]
    if abs(t) >= n:
        raise ValidationError(f"shift {t} exceeds image size {n}")
    base = int(np.floor(t))
    frac = t - base
    out = (1.0 - frac) * _int_shift(p, base, axis)
    if frac:
        out += frac * _int_shift(p, base + 1, axis)
    return out


def _int_shift(p: np.ndarray, k: int, axis: int) -> np.ndarray:
    out = np.zeros_like(p)
    n = p.shape[axis]
    if abs(k) >= n:
        return out
    src = [slice(None)] * p.ndim
    dst = [slice(None)] * p.ndim
    if k >= 0:
        src[axis], dst[axis] = slice(0, n - k), slice(k, n)
    else:
        src[axis], dst[axis] = slice(-k, n), slice(0, n + k)
    out[tuple(dst)] = p[tuple(src)]
    return out


def apply_shift(p: np.ndarray, t) -> np.ndarray:
    """Translate an image by ``t = (t1, t2)`` pixels (t1 along columns, t2 along rows).

    Bilinear interpolation; pixels that enter from outside the frame are zero.
    """
    p = np.asarray(p, dtype=float)
    t1, t2 = float(t[0]), float(t[1])
    return _shift_axis(_shift_axis(p, t1, axis=-1), t2, axis=-2)


def add_noise(p: np.ndarray, noise_var: float, seed) -> np.ndarray:
    if noise_var < 0:
        raise ValidationError("noise variance must be non-negative")
    p = np.asarray(p, dtype=float)
    if noise_var == 0:
        return p.copy()
    rng = np.random.default_rng(seed)
    return p + rng.normal(0.0, np.sqrt(noise_var), p.shape)


def simulate_stack(
    volume: Volume,
    orientations,
    perturb: PerturbationSpec | None = None,
    seed: int = 0,
    out_size=None,
) -> tuple[ProjectionStack, GroundTruth]:
    """Project, shift and corrupt one image per orientation.

    Image ``i`` draws its shift and noise seed from the stream seeded by
    ``(seed, i)``, so any subset can be regenerated independently.
    """
    perturb = perturb or PerturbationSpec()
    q = np.atleast_2d(np.asarray(orientations, dtype=float))
    clean = project(volume, q, out_size)
    images = np.empty_like(clean)
    shifts = np.zeros((len(q), 2))
    noise_seeds = []
    for i in range(len(q)):
        rng = np.random.default_rng([seed, i])
        if perturb.shift_limit > 0:
            shifts[i] = rng.triangular(-perturb.shift_limit, 0.0, perturb.shift_limit, 2)
        noise_seed = int(rng.integers(0, 2**63 - 1))
        noise_seeds.append(noise_seed)
        img = apply_shift(clean[i], shifts[i]) if perturb.shift_limit > 0 else clean[i]
        images[i] = add_noise(img, perturb.noise_var, noise_seed)
    truth = GroundTruth(q.copy(), shifts, noise_seeds)
    return ProjectionStack(images, volume.voxel_size), truth
