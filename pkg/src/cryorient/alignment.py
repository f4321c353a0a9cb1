"""Score recovered orientations against ground truth up to a global O(4) transform.

A transform is ``T = diag(m, 1, 1, 1) @ T_01 @ T_02 @ T_03 @ T_12 @ T_13 @ T_23``
where ``T_ij`` rotates by ``theta_ij`` in the coordinate plane ``(i, j)``,
multiplied left to right in that ascending plane order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import TWO_PI, normalize

PLANES = tuple(itertools.combinations(range(4), 2))
_IP_CLAMP = 1.0 - 1e-12


@dataclass(frozen=True)
class O4Transform:
    angles: tuple[float, ...] = (0.0,) * 6
    m: int = 1

    def __post_init__(self):
        a = tuple(float(x) % TWO_PI for x in self.angles)
        if len(a) != 6 or not all(np.isfinite(a)):
            raise ValidationError("an O(4) transform needs six finite angles")
        if self.m not in (1, -1):
            raise ValidationError(f"reflection flag must be +1 or -1, got {self.m}")
        object.__setattr__(self, "angles", a)


def _plane_stack(theta: np.ndarray, derivative: bool = False) -> np.ndarray:
    """``(R, 6, 4, 4)`` plane rotations, or their angle derivatives, for angles ``(R, 6)``."""
    R = theta.shape[0]
    out = np.zeros((R, 6, 4, 4)) if derivative else np.tile(np.eye(4), (R, 6, 1, 1))
    c, s = np.cos(theta), np.sin(theta)
    if derivative:
        c, s = -s, c
    for k, (i, j) in enumerate(PLANES):
        out[:, k, i, i] = c[:, k]
        out[:, k, j, j] = c[:, k]
        out[:, k, i, j] = -s[:, k]
        out[:, k, j, i] = s[:, k]
    return out


def _matrices_and_grads(theta: np.ndarray, m: int):
    """Transforms ``(R, 4, 4)`` and their angle derivatives ``(R, 6, 4, 4)``."""
    M = _plane_stack(theta)
    D = _plane_stack(theta, derivative=True)
    reflect = np.diag([float(m), 1.0, 1.0, 1.0])
    R = theta.shape[0]
    prefix = [np.broadcast_to(reflect, (R, 4, 4))]
    for k in range(6):
        prefix.append(prefix[-1] @ M[:, k])
    suffix = [np.broadcast_to(np.eye(4), (R, 4, 4))]
    for k in reversed(range(6)):
        suffix.append(M[:, k] @ suffix[-1])
    suffix = suffix[::-1]  # suffix[k] = M_k ... M_5
    grads = np.stack([prefix[k] @ D[:, k] @ suffix[k + 1] for k in range(6)], axis=1)
    return prefix[-1], grads


def o4_matrix(t: O4Transform) -> np.ndarray:
    T, _ = _matrices_and_grads(np.asarray(t.angles)[None, :], t.m)
    return T[0].copy()


def _check_pair(truth, estimate):
    q = np.atleast_2d(np.asarray(truth, dtype=float))
    qh = np.atleast_2d(np.asarray(estimate, dtype=float))
    if q.shape != qh.shape or q.shape[-1] != 4 or len(q) == 0:
        raise ValidationError(f"truth and estimate must both be (P, 4) with P >= 1, got {q.shape} and {qh.shape}")
    return q, qh


def _geodesic(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Same value as ``d_q`` for unit inputs, but accurate near zero.

    ``arccos`` turns a rounding error of 1e-16 in the inner product into
    an angle of 1e-8; the half-angle ``atan2`` form does not.
    """
    s = np.where(np.sum(q * p, axis=-1) < 0, -1.0, 1.0)[..., None]
    near = np.linalg.norm(q - s * p, axis=-1)
    far = np.linalg.norm(q + s * p, axis=-1)
    return 4.0 * np.arctan2(near, far)


def per_orientation_errors(truth, estimate, t: O4Transform | np.ndarray | None = None) -> np.ndarray:
    q, qh = _check_pair(truth, estimate)
    T = np.eye(4) if t is None else (o4_matrix(t) if isinstance(t, O4Transform) else np.asarray(t))
    return _geodesic(normalize(q), normalize(qh @ T.T))


def e_or(truth, estimate, t: O4Transform | np.ndarray | None = None) -> float:
    """Mean geodesic error between ``truth`` and ``T @ estimate`` at a fixed ``T``."""
    return float(np.mean(per_orientation_errors(truth, estimate, t)))


@dataclass
class AlignConfig:
    steps: int = 300
    restarts: int = 32
    batch_size: int = 256
    learning_rate: float = 0.1
    decay: float = 0.98
    momentum: float = 0.9
    seed: int = 0
    trace_every: int = 10

    def __post_init__(self):
        if self.steps < 0 or self.restarts < 1 or self.batch_size < 1 or self.trace_every < 1:
            raise ValidationError("steps must be >= 0 and restarts, batch_size, trace_every >= 1")
        if not (self.learning_rate > 0 and 0 < self.decay <= 1 and 0 <= self.momentum < 1):
            raise ValidationError("need learning_rate > 0, decay in (0, 1], momentum in [0, 1)")


@dataclass
class AlignmentResult:
    transform: O4Transform
    e_or: float
    errors: np.ndarray
    winner: dict
    restart_traces: list[dict] = field(default_factory=list)

    def histogram(self, bins: int = 32) -> dict:
        counts, edges = np.histogram(self.errors, bins=bins, range=(0.0, np.pi))
        return {"edges": edges.tolist(), "counts": counts.tolist()}

    def to_json(self) -> dict:
        return {
            "e_or": self.e_or,
            "m": self.transform.m,
            "angles": list(self.transform.angles),
            "per_orientation_errors_histogram": self.histogram(),
            "restart_traces": self.restart_traces,
        }


def _mean_errors(q: np.ndarray, qh: np.ndarray, T: np.ndarray) -> np.ndarray:
    y = np.einsum("rij,bj->rbi", T, qh)
    y /= np.linalg.norm(y, axis=-1, keepdims=True)
    return np.mean(_geodesic(q[None], y), axis=1)


def _descend(q, qh, theta, m, cfg: AlignConfig, rng):
    """Momentum SGD on all restarts of one reflection sign at once."""
    velocity = np.zeros_like(theta)
    P = len(q)
    B = min(cfg.batch_size, P)
    traces = [[] for _ in range(len(theta))]
    for step in range(cfg.steps):
        idx = rng.choice(P, B, replace=False) if B < P else np.arange(P)
        qb, qhb = q[idx], qh[idx]
        T, G = _matrices_and_grads(theta, m)
        y = np.einsum("rij,bj->rbi", T, qhb)
        ip = np.einsum("bi,rbi->rb", qb, y)
        a = np.minimum(np.abs(ip), _IP_CLAMP)
        if step % cfg.trace_every == 0:
            batch_err = np.mean(2.0 * np.arccos(a), axis=1)
            for r in range(len(theta)):
                traces[r].append(float(batch_err[r]))
        w = -2.0 * np.sign(ip) / np.sqrt(1.0 - a * a) / B
        outer = np.einsum("rb,bi,bj->rij", w, qb, qhb)
        grad = np.einsum("rkij,rij->rk", G, outer)
        velocity = cfg.momentum * velocity + grad
        theta = theta - cfg.learning_rate * cfg.decay**step * velocity
    return theta, traces


def align(truth, estimate, config: AlignConfig = AlignConfig()) -> AlignmentResult:
    """Search ``T`` in O(4) minimizing the mean error, separately for ``m = +1`` and ``m = -1``.

    Restart 0 of each sign starts at zero angles, the rest at uniformly random
    angles.  The winner is the restart (or the untouched identity) with the
    lowest full-set error.
    """
    q, qh = _check_pair(truth, estimate)
    qh = normalize(qh)
    rng = np.random.default_rng(config.seed)
    identity = e_or(q, qh)
    best = (identity, O4Transform(), {"m": 1, "restart": 0, "optimized": False})
    traces = []
    for m in (1, -1):
        theta0 = rng.uniform(0.0, TWO_PI, (config.restarts, 6))
        theta0[0] = 0.0
        theta, batch_traces = _descend(q, qh, theta0, m, config, rng)
        T, _ = _matrices_and_grads(theta, m)
        finals = _mean_errors(q, qh, T)
        for r in range(config.restarts):
            traces.append({"m": m, "restart": r, "final_e_or": float(finals[r]), "batch_e_or": batch_traces[r]})
        r = int(np.argmin(finals))
        if finals[r] < best[0]:
            best = (float(finals[r]), O4Transform(tuple(theta[r]), m), {"m": m, "restart": r, "optimized": True})
    err, t, winner = best
    errors = per_orientation_errors(q, qh, t)
    return AlignmentResult(t, float(np.mean(errors)), errors, winner, traces)
