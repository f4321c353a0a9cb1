"""Least-squares density reconstruction at known orientations, and Fourier shell correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import projector
from .errors import DivergenceError, ValidationError
from .simulate import ProjectionStack, Volume


def backproject(images, orientations, grid, voxel_size: float = 1.0) -> Volume:
    """Adjoint of the projector: every pixel is smeared back along its ray."""
    data = projector.backproject(images, orientations, grid, voxel_size)
    return Volume(data, voxel_size)


@dataclass
class ReconstructionConfig:
    iterations: int = 30
    size: int | None = None
    epsilon: float = 0.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be positive")
        if self.size is not None and self.size < 1:
            raise ValidationError("size must be positive")
        if not self.epsilon >= 0:
            raise ValidationError("epsilon must be non-negative")


def cgls_reconstruct(
    stack: ProjectionStack, orientations, config: ReconstructionConfig = ReconstructionConfig()
) -> tuple[Volume, list[float]]:
    """CGLS on ``min ||A x - b||^2 + eps ||x||^2`` with ``A`` the stacked projector.

    Returns the volume and the residual norm ``sqrt(||A x - b||^2 + eps ||x||^2)``
    after every iteration, starting with the value at ``x = 0``.
    """
    q = np.atleast_2d(np.asarray(orientations, dtype=float))
    if len(q) != len(stack):
        raise ValidationError(f"{len(stack)} images but {len(q)} orientations")
    h, w = stack.image_shape
    n = config.size or w
    shape = (n, n, n)
    vs = stack.pixel_size
    eps = config.epsilon
    b = stack.images

    def A(x):
        return projector.project(x, q, (h, w), vs)

    def At(y):
        return projector.backproject(y, q, shape, vs)

    x = np.zeros(shape)
    r = b.copy()
    s = At(r)
    p = s.copy()
    gamma = float(np.vdot(s, s))
    trace = [float(np.linalg.norm(r))]
    for it in range(config.iterations):
        if gamma == 0.0:
            break
        Ap = A(p)
        delta = float(np.vdot(Ap, Ap)) + eps * float(np.vdot(p, p))
        if not np.isfinite(delta) or delta <= 0:
            raise DivergenceError(f"CGLS breakdown at iteration {it}", step=it)
        alpha = gamma / delta
        x += alpha * p
        r -= alpha * Ap
        s = At(r) - eps * x
        gamma_new = float(np.vdot(s, s))
        res = float(np.sqrt(np.vdot(r, r) + eps * np.vdot(x, x)))
        if not np.isfinite(res):
            raise DivergenceError(f"non-finite residual at iteration {it}", step=it)
        trace.append(res)
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return Volume(x, vs), trace


@dataclass
class FscCurve:
    freq: np.ndarray
    fsc: np.ndarray
    threshold: float
    resolution: float | None

    def to_json(self) -> dict:
        key = f"resolution_at_{self.threshold:g}"
        return {key: self.resolution, "threshold": self.threshold}


def _shell_frequencies(shape, voxel_size):
    axes = [np.fft.fftfreq(n, d=voxel_size) for n in shape]
    kz, ky, kx = np.meshgrid(*axes, indexing="ij")
    return np.sqrt(kx**2 + ky**2 + kz**2)


def resolution_at(freq: np.ndarray, values: np.ndarray, threshold: float) -> float | None:
    """Length scale where the curve first drops below ``threshold``; ``None`` if it never does."""
    below = np.flatnonzero(values < threshold)
    if len(below) == 0:
        return None
    k = below[0]
    if k == 0:
        return float(1.0 / freq[0])
    f0, f1 = freq[k - 1], freq[k]
    c0, c1 = values[k - 1], values[k]
    f = f0 + (c0 - threshold) * (f1 - f0) / (c0 - c1)
    return float(1.0 / f)


def fsc(xa: Volume, xb: Volume, shells: int = 16, threshold: float = 0.5) -> FscCurve:
    """Fourier shell correlation between two volumes on the same grid.

    Shells have width Nyquist / ``shells``.  Shells that contain no grid
    frequency at all (more shells than the grid resolves) are left out of the
    curve; a populated shell with no power in either volume gets correlation 0.
    """
    a = xa.data if isinstance(xa, Volume) else np.asarray(xa, dtype=float)
    b = xb.data if isinstance(xb, Volume) else np.asarray(xb, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"volume shapes differ: {a.shape} vs {b.shape}")
    if shells < 1:
        raise ValidationError("shells must be positive")
    vs = xa.voxel_size if isinstance(xa, Volume) else 1.0
    Fa, Fb = np.fft.fftn(a), np.fft.fftn(b)
    radius = _shell_frequencies(a.shape, vs)
    nyquist = 0.5 / vs
    width = nyquist / shells
    idx = np.floor(radius / width).astype(np.int64).ravel()
    keep = idx < shells
    idx = idx[keep]
    populated = np.bincount(idx, minlength=shells) > 0
    cross = np.bincount(idx, (Fa * np.conj(Fb)).real.ravel()[keep], minlength=shells)
    pa = np.bincount(idx, (np.abs(Fa) ** 2).ravel()[keep], minlength=shells)
    pb = np.bincount(idx, (np.abs(Fb) ** 2).ravel()[keep], minlength=shells)
    denom = np.sqrt(pa * pb)
    values = np.divide(cross, denom, out=np.zeros(shells), where=denom > 0)
    values = np.clip(values, -1.0, 1.0)
    freq = (np.arange(shells) + 0.5) * width
    freq, values = freq[populated], values[populated]
    return FscCurve(freq, values, threshold, resolution_at(freq, values, threshold))
