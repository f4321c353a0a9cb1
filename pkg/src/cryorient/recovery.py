"""Embed orientations on S^3 so their geodesic distances match a distance graph."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DivergenceError, ValidationError
from .geometry import canonicalize, d_q, normalize

# inner products are kept this far from 1 so the arccos derivative stays finite
_IP_CLAMP = 1.0 - 1e-12
_RNG_TAG = 0x5EC0


@dataclass
class DistanceGraph:
    """Records ``(i, j, d)`` over ``n_nodes`` nodes, ``i < j``, ``d`` in radians.

    ``node_ids`` optionally maps node ``k`` back to an index in the source
    stack when the graph covers only part of it.
    """

    n_nodes: int
    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    weight: np.ndarray | None = None
    node_ids: np.ndarray | None = None

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=float)
        if not (self.i.shape == self.j.shape == self.d.shape) or self.i.ndim != 1:
            raise ValidationError("i, j and d must be 1D arrays of equal length")
        if len(self.i) == 0:
            raise ValidationError("distance graph has no records")
        if np.any(self.i < 0) or np.any(self.j >= self.n_nodes) or np.any(self.i >= self.j):
            raise ValidationError("records must satisfy 0 <= i < j < n_nodes")
        if not np.all(np.isfinite(self.d)) or np.any(self.d < 0):
            raise ValidationError("distances must be finite and non-negative")
        key = self.i * self.n_nodes + self.j
        if len(np.unique(key)) != len(key):
            raise ValidationError("duplicate records in distance graph")
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=float)
            if self.weight.shape != self.d.shape or np.any(self.weight < 0):
                raise ValidationError("weights must be non-negative, one per record")
        if self.node_ids is not None:
            self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
            if self.node_ids.shape != (self.n_nodes,):
                raise ValidationError("node_ids must have one entry per node")

    def __len__(self) -> int:
        return len(self.d)

    def n_components(self) -> int:
        adj = coo_matrix((np.ones(len(self)), (self.i, self.j)), shape=(self.n_nodes, self.n_nodes))
        return connected_components(adj, directed=False)[0]


def exact_graph(orientations, i=None, j=None) -> DistanceGraph:
    """Graph of true distances; all pairs unless ``i, j`` are given."""
    q = np.asarray(orientations, dtype=float)
    if i is None:
        i, j = np.triu_indices(len(q), 1)
    return DistanceGraph(len(q), i, j, d_q(q[i], q[j]))


def perturb_graph(graph: DistanceGraph, noise_var: float, seed) -> DistanceGraph:
    """Add ``N(0, noise_var)`` to every distance, then clamp to ``[0, pi]``."""
    if not noise_var >= 0:
        raise ValidationError("noise variance must be non-negative")
    d = graph.d
    if noise_var > 0:
        d = d + np.random.default_rng(seed).normal(0.0, np.sqrt(noise_var), d.shape)
    return DistanceGraph(graph.n_nodes, graph.i, graph.j, np.clip(d, 0.0, np.pi), graph.weight, graph.node_ids)


def _residual_grad(x, i, j, d, w):
    ip = np.sum(x[i] * x[j], axis=1)
    a = np.minimum(np.abs(ip), _IP_CLAMP)
    r = 2.0 * np.arccos(a) - d
    wsum = len(d) if w is None else w.sum()
    ww = 1.0 if w is None else w
    loss = float(np.sum(ww * r * r) / wsum)
    # d/d(ip) of 2 arccos|ip| is -2 sign(ip) / sqrt(1 - ip^2)
    coef = (2.0 * ww * r / wsum) * (-2.0 * np.sign(ip) / np.sqrt(1.0 - a * a))
    grad = np.zeros_like(x)
    for k in range(4):
        grad[:, k] += np.bincount(i, coef * x[j, k], minlength=len(x))
        grad[:, k] += np.bincount(j, coef * x[i, k], minlength=len(x))
    return loss, grad


def loss_or(orientations, graph: DistanceGraph, records=None) -> float:
    """Mean squared mismatch between ``d_q`` of the orientations and the graph distances."""
    x = np.asarray(orientations, dtype=float)
    sel = slice(None) if records is None else records
    i, j, d = graph.i[sel], graph.j[sel], graph.d[sel]
    r = d_q(x[i], x[j]) - d
    if graph.weight is None:
        return float(np.mean(r * r))
    w = graph.weight[sel]
    return float(np.sum(w * r * r) / w.sum())


def loss_or_grad(orientations, graph: DistanceGraph, records=None) -> tuple[float, np.ndarray]:
    """``loss_or`` and its gradient with respect to the (ambient) quaternion coordinates."""
    x = np.asarray(orientations, dtype=float)
    sel = slice(None) if records is None else records
    w = None if graph.weight is None else graph.weight[sel]
    return _residual_grad(x, graph.i[sel], graph.j[sel], graph.d[sel], w)


@dataclass
class RecoveryConfig:
    batch_size: int = 256
    learning_rate: float = 0.05
    max_steps: int = 30000
    check_every: int = 100
    tolerance: float = 1e-5
    patience: int = 5
    lr_halvings: int = 6
    seed: int = 0
    init: str = "random-uniform"

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "check_every", "patience"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if not self.learning_rate > 0 or self.tolerance < 0 or self.lr_halvings < 0:
            raise ValidationError("learning_rate must be positive; tolerance and lr_halvings non-negative")
        if self.init not in ("random-uniform", "provided"):
            raise ValidationError(f"unknown init {self.init!r}")


@dataclass
class RecoveryResult:
    orientations: np.ndarray
    steps: int
    sampled_loss: list[float]
    checkpoint_loss: list[float]
    converged: bool
    best_loss: float
    warnings: list[str] = field(default_factory=list)

    def trace(self) -> dict:
        return {
            "steps": self.steps,
            "sampled_loss": self.sampled_loss,
            "checkpoint_loss": self.checkpoint_loss,
            "converged": self.converged,
        }


def recover(graph: DistanceGraph, config: RecoveryConfig = RecoveryConfig(), init=None) -> RecoveryResult:
    """Minimize the embedding loss with Adam on mini-batches, renormalizing after each step.

    The full-graph loss is evaluated every ``check_every`` steps and the best
    checkpoint is what gets returned.  When the best value has not improved
    by ``tolerance`` for ``patience`` checkpoints the step size is halved;
    after ``lr_halvings`` halvings the run is declared converged.
    """
    # tagged stream so a seed shared with the orientation sampler gives an unrelated start
    rng = np.random.default_rng([config.seed, _RNG_TAG])
    notes = []
    if graph.n_components() > 1:
        msg = (f"distance graph has {graph.n_components()} connected components; "
               "each is recovered up to its own global rotation")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    if config.init == "provided" or init is not None:
        if init is None:
            raise ValidationError("init='provided' needs initial orientations")
        x = normalize(np.asarray(init, dtype=float).copy())
        if x.shape != (graph.n_nodes, 4):
            raise ValidationError("initial orientations must have shape (n_nodes, 4)")
    else:
        x = normalize(rng.standard_normal((graph.n_nodes, 4)))

    b1, b2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    lr = config.learning_rate
    # learned estimators can exceed the largest attainable distance; targets are clamped to it
    graph = DistanceGraph(graph.n_nodes, graph.i, graph.j, np.minimum(graph.d, np.pi), graph.weight, graph.node_ids)
    n_rec = len(graph)
    w = graph.weight
    best, best_x = loss_or(x, graph), x.copy()
    sampled, checkpoints = [], []
    stall, halvings, converged = 0, 0, False
    step = 0
    for step in range(1, config.max_steps + 1):
        idx = rng.integers(0, n_rec, config.batch_size)
        loss, g = _residual_grad(x, graph.i[idx], graph.j[idx], graph.d[idx], None if w is None else w[idx])
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        sampled.append(loss)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        x = normalize(x)
        if step % config.check_every:
            continue
        full = loss_or(x, graph)
        if not np.isfinite(full):
            raise DivergenceError(f"non-finite checkpoint loss at step {step}", step=step)
        checkpoints.append(full)
        stall = 0 if full < best - config.tolerance else stall + 1
        if full < best:
            best, best_x = full, x.copy()
        if stall >= config.patience:
            if halvings >= config.lr_halvings:
                converged = True
                break
            lr /= 2.0
            halvings += 1
            stall = 0
    return RecoveryResult(canonicalize(best_x), step, sampled, checkpoints, converged, best, notes)
