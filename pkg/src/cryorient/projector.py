"""Parallel-beam x-ray transform with trilinear ray marching, and its adjoint.

Conventions (all internal units are voxels):

* a volume array has shape ``(nz, ny, nx)`` so x is the fastest index; its
  rotation center is voxel ``(nz // 2, ny // 2, nx // 2)``;
* an image array has shape ``(h, w)``, pixel ``(row, col)`` sits at
  detector coordinates ``(u, v) = (col - w // 2, row - h // 2)``;
* for orientation ``R`` the ray through ``(u, v)`` samples the volume at
  ``R.T @ (u, v, s)`` for every integer ``s``, so the beam runs along
  ``R.T @ e_z`` in the volume frame.

Because the sample lattice always contains ``s = 0`` and both kernels walk
exactly the same points with exactly the same weights, :func:`backproject`
is the exact transpose of :func:`project`.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .geometry import quat_to_matrix


@numba.njit(cache=True, inline="always")
def _slab(o, d, n, lo, hi):
    # restrict [lo, hi] to s with o + s*d inside the open interval (-1, n)
    if abs(d) < 1e-12:
        if o <= -1.0 or o >= n:
            return 1.0, -1.0
        return lo, hi
    t1 = (-1.0 - o) / d
    t2 = (n - o) / d
    if t1 > t2:
        t1, t2 = t2, t1
    return max(lo, t1), min(hi, t2)


@numba.njit(cache=True)
def _ray_bounds(ox, oy, oz, dx, dy, dz, nx, ny, nz, reach):
    lo, hi = -reach, reach
    lo, hi = _slab(ox, dx, nx, lo, hi)
    lo, hi = _slab(oy, dy, ny, lo, hi)
    lo, hi = _slab(oz, dz, nz, lo, hi)
    return int(math.ceil(lo)), int(math.floor(hi))


@numba.njit(cache=True)
def _forward(vol, rots, h, w, out):
    nz, ny, nx = vol.shape
    cz, cy, cx = nz // 2, ny // 2, nx // 2
    reach = float(nx + ny + nz)
    for n in range(rots.shape[0]):
        R = rots[n]
        dx, dy, dz = R[2, 0], R[2, 1], R[2, 2]
        for r in range(h):
            v = r - h // 2
            for c in range(w):
                u = c - w // 2
                ox = cx + R[0, 0] * u + R[1, 0] * v
                oy = cy + R[0, 1] * u + R[1, 1] * v
                oz = cz + R[0, 2] * u + R[1, 2] * v
                k0, k1 = _ray_bounds(ox, oy, oz, dx, dy, dz, nx, ny, nz, reach)
                acc = 0.0
                for k in range(k0, k1 + 1):
                    px = ox + k * dx
                    py = oy + k * dy
                    pz = oz + k * dz
                    ix = int(math.floor(px))
                    iy = int(math.floor(py))
                    iz = int(math.floor(pz))
                    fx = px - ix
                    fy = py - iy
                    fz = pz - iz
                    for a in range(2):
                        zz = iz + a
                        if zz < 0 or zz >= nz:
                            continue
                        wz = fz if a else 1.0 - fz
                        for b in range(2):
                            yy = iy + b
                            if yy < 0 or yy >= ny:
                                continue
                            wy = fy if b else 1.0 - fy
                            for e in range(2):
                                xx = ix + e
                                if xx < 0 or xx >= nx:
                                    continue
                                wx = fx if e else 1.0 - fx
                                acc += wz * wy * wx * vol[zz, yy, xx]
                out[n, r, c] = acc


@numba.njit(cache=True)
def _adjoint(images, rots, vol):
    nz, ny, nx = vol.shape
    cz, cy, cx = nz // 2, ny // 2, nx // 2
    h, w = images.shape[1], images.shape[2]
    reach = float(nx + ny + nz)
    for n in range(rots.shape[0]):
        R = rots[n]
        dx, dy, dz = R[2, 0], R[2, 1], R[2, 2]
        for r in range(h):
            v = r - h // 2
            for c in range(w):
                val = images[n, r, c]
                if val == 0.0:
                    continue
                u = c - w // 2
                ox = cx + R[0, 0] * u + R[1, 0] * v
                oy = cy + R[0, 1] * u + R[1, 1] * v
                oz = cz + R[0, 2] * u + R[1, 2] * v
                k0, k1 = _ray_bounds(ox, oy, oz, dx, dy, dz, nx, ny, nz, reach)
                for k in range(k0, k1 + 1):
                    px = ox + k * dx
                    py = oy + k * dy
                    pz = oz + k * dz
                    ix = int(math.floor(px))
                    iy = int(math.floor(py))
                    iz = int(math.floor(pz))
                    fx = px - ix
                    fy = py - iy
                    fz = pz - iz
                    for a in range(2):
                        zz = iz + a
                        if zz < 0 or zz >= nz:
                            continue
                        wz = fz if a else 1.0 - fz
                        for b in range(2):
                            yy = iy + b
                            if yy < 0 or yy >= ny:
                                continue
                            wy = fy if b else 1.0 - fy
                            for e in range(2):
                                xx = ix + e
                                if xx < 0 or xx >= nx:
                                    continue
                                wx = fx if e else 1.0 - fx
                                vol[zz, yy, xx] += wz * wy * wx * val


def _rotations(quats) -> np.ndarray:
    q = np.atleast_2d(np.asarray(quats, dtype=float))
    return np.ascontiguousarray(quat_to_matrix(q))


def project(volume: np.ndarray, quats, out_shape, voxel_size: float = 1.0) -> np.ndarray:
    """Line integrals of ``volume`` for each orientation; returns ``(N, h, w)``."""
    vol = np.ascontiguousarray(volume, dtype=np.float64)
    rots = _rotations(quats)
    h, w = out_shape
    out = np.zeros((len(rots), h, w))
    _forward(vol, rots, h, w, out)
    out *= voxel_size
    return out


def backproject(images: np.ndarray, quats, vol_shape, voxel_size: float = 1.0) -> np.ndarray:
    """Adjoint of :func:`project`: smear every pixel back along its ray."""
    imgs = np.ascontiguousarray(np.asarray(images, dtype=np.float64).reshape((-1,) + np.shape(images)[-2:]))
    rots = _rotations(quats)
    if len(rots) != len(imgs):
        raise ValueError("one orientation per image required")
    vol = np.zeros(tuple(vol_shape))
    _adjoint(imgs, rots, vol)
    vol *= voxel_size
    return vol
