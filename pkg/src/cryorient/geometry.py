"""Quaternion algebra, rotation conversions, and orientation sampling.

Quaternions are stored as float arrays of shape ``(..., 4)`` ordered
``(a, b, c, d)`` for ``q = a + bi + cj + dk``.  Every function that returns
a unit quaternion returns it canonicalized: ``a >= 0``, and when ``a == 0``
the first nonzero of ``(b, c, d)`` is positive.

Euler angles follow the extrinsic ZYZ convention used in cryo-EM,
``R = Rz(theta3) @ Ry(theta2) @ Rz(theta1)``, stored as ``(..., 3)`` arrays
ordered ``(theta3, theta2, theta1)``.  The pair ``(theta2, theta1)`` is the
projection direction and ``theta3`` the in-plane rotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

TWO_PI = 2.0 * np.pi
_UNIT_TOL = 1e-9
_GIMBAL_TOL = 1e-9


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValidationError("cannot normalize a zero quaternion")
    return q / norm


def canonicalize(q: np.ndarray) -> np.ndarray:
    """Pick the representative of ``{q, -q}`` whose first nonzero entry is positive."""
    q = np.array(q, dtype=float)
    flat = q.reshape(-1, 4)
    nonzero = flat != 0
    first = np.argmax(nonzero, axis=1)
    lead = flat[np.arange(len(flat)), first]
    flat *= np.where(lead < 0, -1.0, 1.0)[:, None]
    return flat.reshape(q.shape)


def multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product ``p * q`` (broadcasting over leading axes)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    a1, b1, c1, d1 = np.moveaxis(p, -1, 0)
    a2, b2, c2, d2 = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        ],
        axis=-1,
    )


def conjugate(q: np.ndarray) -> np.ndarray:
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1
    return q


def _check_unit(q: np.ndarray) -> None:
    norm = np.linalg.norm(q, axis=-1)
    if not np.all(np.abs(norm - 1.0) <= 1e-6):
        raise ValidationError("quaternion is not unit norm")


def quat_from_axis_angle(axis, theta) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.abs(np.linalg.norm(axis, axis=-1) - 1.0) <= _UNIT_TOL):
        raise ValidationError("rotation axis must have unit norm")
    half = theta[..., None] / 2.0
    q = np.concatenate([np.cos(half), axis * np.sin(half)], axis=-1)
    return canonicalize(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion, shape ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=float)
    _check_unit(q)
    a, b, c, d = np.moveaxis(q, -1, 0)
    rows = [
        [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
        [2 * b * c + 2 * a * d, a * a - b * b + c * c - d * d, 2 * c * d - 2 * a * b],
        [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a - b * b - c * c + d * d],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_matrix` (Shepperd's method, canonicalized)."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((len(flat), 4))
    for n, m in enumerate(flat):
        tr = np.trace(m)
        cands = np.array([tr, m[0, 0], m[1, 1], m[2, 2]])
        k = int(np.argmax(cands))
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [s / 4, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, s / 4, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, s / 4, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, s / 4]
        out[n] = q
    return canonicalize(normalize(out)).reshape(R.shape[:-2] + (4,))


def axis_rotation(axis: str, theta) -> np.ndarray:
    """Elementary rotation matrix about ``'x'``, ``'y'`` or ``'z'``."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    o, z = np.ones_like(theta), np.zeros_like(theta)
    if axis == "x":
        rows = [[o, z, z], [z, c, -s], [z, s, c]]
    elif axis == "y":
        rows = [[c, z, s], [z, o, z], [-s, z, c]]
    elif axis == "z":
        rows = [[c, -s, z], [s, c, z], [z, z, o]]
    else:
        raise ValidationError(f"unknown axis {axis!r}")
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _check_euler(e: np.ndarray) -> None:
    t3, t2, t1 = np.moveaxis(e, -1, 0)
    ok = (
        (t3 >= 0) & (t3 < TWO_PI)
        & (t2 >= 0) & (t2 <= np.pi)
        & (t1 >= 0) & (t1 < TWO_PI)
    )
    if not np.all(ok):
        raise ValidationError("Euler angles outside [0, 2pi) x [0, pi] x [0, 2pi)")


def euler_zyz_to_quat(e) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    _check_euler(e)
    t3, t2, t1 = np.moveaxis(e, -1, 0)
    z3 = np.stack([np.cos(t3 / 2), 0 * t3, 0 * t3, np.sin(t3 / 2)], axis=-1)
    y2 = np.stack([np.cos(t2 / 2), 0 * t2, np.sin(t2 / 2), 0 * t2], axis=-1)
    z1 = np.stack([np.cos(t1 / 2), 0 * t1, 0 * t1, np.sin(t1 / 2)], axis=-1)
    return canonicalize(multiply(multiply(z3, y2), z1))


def quat_to_euler_zyz(q) -> np.ndarray:
    """ZYZ angles of a unit quaternion.

    At gimbal lock (``theta2`` of 0 or pi) the in-plane angle ``theta3`` is
    reported as 0 and the whole rotation about z is folded into ``theta1``.
    """
    R = quat_to_matrix(q)
    r22 = np.clip(R[..., 2, 2], -1.0, 1.0)
    t2 = np.arccos(r22)
    sin2 = np.sqrt(R[..., 0, 2] ** 2 + R[..., 1, 2] ** 2)
    regular = sin2 > _GIMBAL_TOL
    t3 = np.where(regular, np.arctan2(R[..., 1, 2], R[..., 0, 2]), 0.0)
    t1_regular = np.arctan2(R[..., 2, 1], -R[..., 2, 0])
    # theta2 == 0: R = Rz(t1); theta2 == pi: R = Ry(pi) Rz(t1)
    t1_top = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    t1_bottom = np.arctan2(R[..., 1, 0], R[..., 1, 1])
    t1_locked = np.where(r22 > 0, t1_top, t1_bottom)
    t2 = np.where(regular, t2, np.where(r22 > 0, 0.0, np.pi))
    t1 = np.where(regular, t1_regular, t1_locked)
    t3 = np.mod(t3, TWO_PI)
    t1 = np.mod(t1, TWO_PI)
    # mod can land exactly on 2pi through rounding
    t3 = np.where(t3 >= TWO_PI, 0.0, t3)
    t1 = np.where(t1 >= TWO_PI, 0.0, t1)
    return np.stack([t3, t2, t1], axis=-1)


def d_q(qi, qj) -> np.ndarray:
    """Geodesic distance on SO(3): ``2 arccos |<qi, qj>|`` in [0, pi]."""
    qi = np.asarray(qi, dtype=float)
    qj = np.asarray(qj, dtype=float)
    ip = np.sum(qi * qj, axis=-1)
    return 2.0 * np.arccos(np.clip(np.abs(ip), -1.0, 1.0))


def rotation_angle(q) -> np.ndarray:
    """Rotation magnitude of each quaternion, i.e. its distance to the identity."""
    return d_q(np.array([1.0, 0.0, 0.0, 0.0]), q)


# --- sampling -------------------------------------------------------------

_PRESETS = {
    "full": ((0.0, np.pi), (0.0, TWO_PI)),
    "half": ((0.0, np.pi / 2), (0.0, TWO_PI)),
    "quarter": ((0.0, np.pi / 2), (0.0, np.pi)),
}


@dataclass(frozen=True)
class SamplingScheme:
    """How orientations are drawn.

    ``kind`` is ``"uniform-so3"`` (Haar measure) or ``"uniform-euler"``
    (each ZYZ angle uniform in its range).  ``theta2_range`` and
    ``theta1_range`` restrict the projection direction; both kinds honour
    them.
    """

    kind: str = "uniform-so3"
    theta2_range: tuple[float, float] = (0.0, np.pi)
    theta1_range: tuple[float, float] = (0.0, TWO_PI)

    def __post_init__(self):
        if self.kind not in ("uniform-so3", "uniform-euler"):
            raise ValidationError(f"unknown sampling kind {self.kind!r}")
        (lo2, hi2), (lo1, hi1) = self.theta2_range, self.theta1_range
        if not (0.0 <= lo2 < hi2 <= np.pi):
            raise ValidationError(f"theta2 range {self.theta2_range} is empty or outside [0, pi]")
        if not (0.0 <= lo1 < hi1 <= TWO_PI):
            raise ValidationError(f"theta1 range {self.theta1_range} is empty or outside [0, 2pi]")

    @classmethod
    def preset(cls, kind: str = "uniform-so3", directions: str = "full") -> "SamplingScheme":
        try:
            r2, r1 = _PRESETS[directions]
        except KeyError:
            raise ValidationError(f"unknown direction preset {directions!r}") from None
        return cls(kind, r2, r1)

    @property
    def restricted(self) -> bool:
        return (self.theta2_range, self.theta1_range) != _PRESETS["full"]

    def accepts(self, euler: np.ndarray) -> np.ndarray:
        (lo2, hi2), (lo1, hi1) = self.theta2_range, self.theta1_range
        t2, t1 = euler[..., 1], euler[..., 2]
        in2 = (t2 >= lo2) & ((t2 < hi2) | (hi2 == np.pi))
        in1 = (t1 >= lo1) & (t1 < hi1)
        return in2 & in1


def _uniform_so3(rng: np.random.Generator, count: int) -> np.ndarray:
    q = rng.standard_normal((count, 4))
    return canonicalize(q / np.linalg.norm(q, axis=1, keepdims=True))


def sample_orientations(scheme: SamplingScheme, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` canonical unit quaternions, deterministically from ``seed``."""
    if count < 1:
        raise ValidationError("count must be at least 1")
    rng = np.random.default_rng(seed)
    if scheme.kind == "uniform-euler":
        (lo2, hi2), (lo1, hi1) = scheme.theta2_range, scheme.theta1_range
        e = np.stack(
            [
                rng.uniform(0.0, TWO_PI, count),
                rng.uniform(lo2, hi2, count),
                rng.uniform(lo1, hi1, count),
            ],
            axis=1,
        )
        return euler_zyz_to_quat(e)
    if not scheme.restricted:
        return _uniform_so3(rng, count)
    kept: list[np.ndarray] = []
    total = 0
    while total < count:
        q = _uniform_so3(rng, max(4 * (count - total), 64))
        q = q[scheme.accepts(quat_to_euler_zyz(q))]
        kept.append(q)
        total += len(q)
    return np.concatenate(kept)[:count]
