"""Train/validation/test splits and projection-pair sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import d_q

DEFAULT_FRACTIONS = (0.50, 0.17, 0.33)
# above this many candidate pairs, pairs are thinned chunk by chunk
_MATERIALIZE_LIMIT = 4_000_000


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0

    def __post_init__(self):
        f = tuple(float(x) for x in self.fractions)
        if len(f) != 3 or any(x < 0 for x in f):
            raise ValidationError(f"need three non-negative fractions, got {self.fractions}")
        if abs(sum(f) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must sum to 1, got {sum(f)}")
        object.__setattr__(self, "fractions", f)


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)


def split(count: int, spec: SplitSpec = SplitSpec()) -> Split:
    """Randomly partition ``range(count)`` into three disjoint sorted index sets."""
    if count < 3:
        raise ValidationError("need at least 3 projections to split")
    f_train, f_val, _ = spec.fractions
    n_train = int(round(f_train * count))
    n_val = int(round(f_val * count))
    n_test = count - n_train - n_val
    sizes = (n_train, n_val, n_test)
    for name, n, f in zip(("train", "val", "test"), sizes, spec.fractions):
        if n < 0 or (f > 0 and n == 0):
            raise ValidationError(f"{name} split would be empty for {count} projections")
    perm = np.random.default_rng(spec.seed).permutation(count)
    parts = np.split(perm, [n_train, n_train + n_val])
    return Split(*(np.sort(p) for p in parts))


@dataclass
class PairSet:
    """Index pairs ``i < j`` with optional target distances (radians)."""

    i: np.ndarray
    j: np.ndarray
    d_target: np.ndarray | None = None

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        if self.i.shape != self.j.shape or self.i.ndim != 1:
            raise ValidationError("pair index arrays must be 1D and equally long")
        if np.any(self.i >= self.j):
            raise ValidationError("pairs must satisfy i < j")
        if self.d_target is not None:
            self.d_target = np.asarray(self.d_target, dtype=float)
            if self.d_target.shape != self.i.shape:
                raise ValidationError("one target per pair required")

    def __len__(self) -> int:
        return len(self.i)

    def subset(self, idx) -> "PairSet":
        d = None if self.d_target is None else self.d_target[idx]
        return PairSet(self.i[idx], self.j[idx], d)

    def with_targets(self, orientations) -> "PairSet":
        q = np.asarray(orientations)
        return PairSet(self.i, self.j, d_q(q[self.i], q[self.j]))


def all_pairs(indices) -> PairSet:
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    a, b = np.triu_indices(len(idx), 1)
    return PairSet(idx[a], idx[b])


def sample_pairs(indices, count: int, seed: int) -> PairSet:
    """Plain uniform sample of ``count`` distinct pairs (without replacement)."""
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    n = len(idx)
    total = n * (n - 1) // 2
    if total == 0:
        raise ValidationError("need at least two indices to form a pair")
    count = min(count, total)
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=count, replace=False))
    a, b = _unrank(flat, n)
    return PairSet(idx[a], idx[b])


def _unrank(flat: np.ndarray, n: int):
    # inverse of the row-major enumeration of the strict upper triangle
    row_start = np.arange(n) * (2 * n - np.arange(n) - 1) // 2
    a = np.searchsorted(row_start, flat, side="right") - 1
    b = flat - row_start[a] + a + 1
    return a, b


def _water_fill(counts: np.ndarray, target: int) -> np.ndarray:
    """Largest equal per-bin quota whose capped total does not exceed ``target``."""
    if counts.sum() <= target:
        return counts.copy()
    lo, hi = 0, int(counts.max())
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if np.minimum(counts, mid).sum() <= target:
            lo = mid
        else:
            hi = mid - 1
    take = np.minimum(counts, lo)
    # spend the remainder one pair at a time on the still-unfilled bins
    spare = target - take.sum()
    for b in np.flatnonzero(counts > take):
        if spare == 0:
            break
        take[b] += 1
        spare -= 1
    return take


def make_uniform_pairs(indices, orientations, fraction: float = 0.01, bins: int = 32, seed: int = 0) -> PairSet:
    """Stratified pair sample whose target distances are uniform over [0, pi].

    All pairs within ``indices`` are bucketed by orientation distance into
    ``bins`` equal-width bins; the same number of pairs is drawn from every
    bin, bins short of that quota contribute all their members, and the
    total is ``round(fraction * n_candidates)``.
    """
    if not (0 < fraction <= 1):
        raise ValidationError("fraction must lie in (0, 1]")
    if bins < 1:
        raise ValidationError("bins must be positive")
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    if len(idx) < 2:
        raise ValidationError("need at least two indices to form pairs")
    q = np.asarray(orientations, dtype=float)
    n = len(idx)
    n_cand = n * (n - 1) // 2
    target = max(1, int(round(fraction * n_cand)))
    rng = np.random.default_rng(seed)
    if n_cand <= _MATERIALIZE_LIMIT:
        a, b = np.triu_indices(n, 1)
        d = d_q(q[idx[a]], q[idx[b]])
        which = _bin_of(d, bins)
        counts = np.bincount(which, minlength=bins)
        take = _water_fill(counts, target)
        chosen = []
        for k in range(bins):
            members = np.flatnonzero(which == k)
            if take[k] == len(members):
                chosen.append(members)
            elif take[k]:
                chosen.append(rng.choice(members, size=take[k], replace=False))
        sel = np.sort(np.concatenate(chosen))
        return PairSet(idx[a[sel]], idx[b[sel]], d[sel])
    return _thinned_uniform_pairs(idx, q, target, bins, rng)


def _bin_of(d: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((d / np.pi * bins).astype(np.int64), bins - 1)


def _row_chunks(n: int, rows: int = 256):
    for start in range(0, n - 1, rows):
        stop = min(start + rows, n - 1)
        a = np.repeat(np.arange(start, stop), n - 1 - np.arange(start, stop))
        offsets = np.concatenate([np.arange(r + 1, n) for r in range(start, stop)])
        yield a, offsets


def _thinned_uniform_pairs(idx, q, target, bins, rng) -> PairSet:
    # pass 1 counts bin occupancy, pass 2 keeps each pair with its bin's acceptance probability
    n = len(idx)
    counts = np.zeros(bins, dtype=np.int64)
    for a, b in _row_chunks(n):
        counts += np.bincount(_bin_of(d_q(q[idx[a]], q[idx[b]]), bins), minlength=bins)
    take = _water_fill(counts, target)
    accept = np.where(counts > 0, take / np.maximum(counts, 1), 0.0)
    keep_i, keep_j, keep_d = [], [], []
    for a, b in _row_chunks(n):
        d = d_q(q[idx[a]], q[idx[b]])
        mask = rng.random(len(d)) < accept[_bin_of(d, bins)]
        keep_i.append(idx[a[mask]])
        keep_j.append(idx[b[mask]])
        keep_d.append(d[mask])
    return PairSet(np.concatenate(keep_i), np.concatenate(keep_j), np.concatenate(keep_d))


def batch_pairs(pairs: PairSet, batch_size: int, seed: int, epoch: int = 0) -> list[PairSet]:
    """One epoch of mini-batches: a fresh permutation per ``(seed, epoch)``; last batch may be short."""
    if batch_size < 1:
        raise ValidationError("batch_size must be positive")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    return [pairs.subset(order[k:k + batch_size]) for k in range(0, len(pairs), batch_size)]
