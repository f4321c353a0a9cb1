"""Pairwise distance estimators: a pixel-space baseline and a learned Siamese embedding."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dataset import PairSet, batch_pairs
from .errors import DegenerateInputError, DivergenceError, ValidationError
from .recovery import DistanceGraph

FEATURE_DISTANCES = ("cosine", "euclidean")
# keeps the arccos argument away from +-1 where its derivative is unbounded
COS_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"CRYONET\x00"
CHECKPOINT_VERSION = 1


# --- baseline ---------------------------------------------------------------

def euclidean_distance(pi, pj) -> np.ndarray:
    """Pixelwise L2 distance between images (broadcasts over leading axes)."""
    pi = np.asarray(pi, dtype=float)
    pj = np.asarray(pj, dtype=float)
    if pi.shape[-2:] != pj.shape[-2:]:
        raise ValidationError(f"image shapes differ: {pi.shape[-2:]} vs {pj.shape[-2:]}")
    diff = pi - pj
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


# --- Siamese embedding --------------------------------------------------------

class EmbeddingNet(nn.Module):
    """Stack of stride-2 3x3 convolutions with ReLU between them, then global average pooling.

    The last convolution is linear and outputs ``n_f`` channels, so the
    embedding dimension is ``channels[-1]``.  Any input at least
    ``min_size`` pixels per side is accepted.
    """

    def __init__(self, channels=(16, 32, 64, 64), seed: int = 0, dtype=torch.float32):
        super().__init__()
        channels = tuple(int(c) for c in channels)
        if len(channels) < 1 or min(channels) < 1:
            raise ValidationError("need at least one convolution with positive width")
        self.channels = channels
        gen = torch.Generator().manual_seed(int(seed))
        layers = []
        c_in = 1
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, dtype=dtype)
            bound = 1.0 / np.sqrt(c_in * 9)
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.uniform_(-bound, bound, generator=gen)
            layers.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(layers)

    @property
    def n_f(self) -> int:
        return self.channels[-1]

    @property
    def min_size(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def architecture(self) -> dict:
        return {
            "channels": list(self.channels),
            "kernel": 3,
            "stride": 2,
            "padding": 1,
            "activation": "relu",
            "pooling": "global-average",
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if min(x.shape[-2:]) < self.min_size:
            raise ValidationError(f"images must be at least {self.min_size} pixels per side, got {tuple(x.shape[-2:])}")
        for k, conv in enumerate(self.convs):
            x = conv(x)
            if k < len(self.convs) - 1:
                x = torch.relu(x)
        return x.mean(dim=(-2, -1))


def standardize(images: np.ndarray) -> np.ndarray:
    """Zero mean and unit variance per image; constant images map to zeros."""
    images = np.asarray(images, dtype=float)
    mean = images.mean(axis=(-2, -1), keepdims=True)
    std = images.std(axis=(-2, -1), keepdims=True)
    centered = images - mean
    return np.divide(centered, std, out=np.zeros_like(centered), where=std > 0)


def _as_tensor(images, net: EmbeddingNet) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    return torch.as_tensor(standardize(images), dtype=dtype)


def embed(net: EmbeddingNet, images) -> np.ndarray:
    """Feature vectors for one image ``(h, w)`` or a stack ``(N, h, w)``."""
    images = np.asarray(images, dtype=float)
    single = images.ndim == 2
    batch = images[None] if single else images
    with torch.no_grad():
        f = net(_as_tensor(batch, net)).double().numpy()
    return f[0] if single else f


def feature_distance(fi, fj, kind: str = "cosine") -> np.ndarray:
    """``2 arccos`` of the cosine similarity (range ``[0, 2 pi]``) or the Euclidean distance."""
    fi = np.asarray(fi, dtype=float)
    fj = np.asarray(fj, dtype=float)
    if kind == "euclidean":
        return np.linalg.norm(fi - fj, axis=-1)
    if kind != "cosine":
        raise ValidationError(f"unknown feature distance {kind!r}")
    ni = np.linalg.norm(fi, axis=-1)
    nj = np.linalg.norm(fj, axis=-1)
    if np.any(ni == 0) or np.any(nj == 0):
        raise DegenerateInputError("cosine distance is undefined for a zero feature vector")
    c = np.sum(fi * fj, axis=-1) / (ni * nj)
    return 2.0 * np.arccos(np.clip(c, -1.0, 1.0))


def feature_distance_torch(fi: torch.Tensor, fj: torch.Tensor, kind: str = "cosine") -> torch.Tensor:
    """Differentiable counterpart of :func:`feature_distance` with a clamped arccos argument."""
    if kind == "euclidean":
        # the tiny offset keeps the gradient finite for coincident features
        return torch.sqrt(torch.sum((fi - fj) ** 2, dim=-1) + 1e-12)
    c = torch.nn.functional.cosine_similarity(fi, fj, dim=-1, eps=1e-12)
    return 2.0 * torch.arccos(torch.clamp(c, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP))


def loss_de(d_pred, d_target):
    """Mean squared residual of predicted distances; accepts numpy arrays or tensors."""
    if isinstance(d_pred, torch.Tensor):
        target = torch.as_tensor(d_target, dtype=d_pred.dtype)
        return torch.mean((d_pred - target) ** 2)
    r = np.asarray(d_pred, dtype=float) - np.asarray(d_target, dtype=float)
    return float(np.mean(r * r))


# --- estimators -------------------------------------------------------------

class EuclideanBaseline:
    kind = "euclidean-baseline"

    def distances(self, images: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        return euclidean_distance(images[i], images[j])


class SiameseEstimator:
    kind = "siamese"

    def __init__(self, net: EmbeddingNet, distance: str = "cosine"):
        if distance not in FEATURE_DISTANCES:
            raise ValidationError(f"unknown feature distance {distance!r}")
        self.net = net
        self.distance = distance

    def distances(self, images: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        used = np.unique(np.concatenate([i, j]))
        feats = embed(self.net, images[used])
        pos = np.searchsorted(used, np.stack([i, j]))
        return feature_distance(feats[pos[0]], feats[pos[1]], self.distance)


def estimate_graph(estimator, images, pairs: PairSet) -> DistanceGraph:
    """One distance record per pair; nodes are the images the pairs touch, in ascending order."""
    images = getattr(images, "images", images)
    if len(pairs) == 0:
        raise ValidationError("no pairs to estimate")
    if pairs.j.max() >= len(images):
        raise ValidationError("pair index outside the stack")
    d = estimator.distances(np.asarray(images), pairs.i, pairs.j)
    nodes = np.unique(np.concatenate([pairs.i, pairs.j]))
    gi = np.searchsorted(nodes, pairs.i)
    gj = np.searchsorted(nodes, pairs.j)
    return DistanceGraph(len(nodes), gi, gj, d, node_ids=nodes)


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    optimizer: str = "rmsprop"
    decay: float = 0.9
    epsilon: float = 1e-7
    distance: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValidationError("epochs must be >= 0, batch_size and learning_rate positive")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.distance not in FEATURE_DISTANCES:
            raise ValidationError(f"unknown feature distance {self.distance!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_lde: float
    val_lde: float


def _pair_loss(net, images_t, pairs: PairSet, distance: str) -> torch.Tensor:
    # embed each distinct image of the batch once
    used, inv = np.unique(np.concatenate([pairs.i, pairs.j]), return_inverse=True)
    feats = net(images_t[torch.as_tensor(used)])
    n = len(pairs)
    a = torch.as_tensor(inv[:n])
    b = torch.as_tensor(inv[n:])
    pred = feature_distance_torch(feats[a], feats[b], distance)
    return loss_de(pred, pairs.d_target)


def evaluate_lde(net, images, pairs: PairSet, distance: str = "cosine", chunk: int = 4096) -> float:
    """Mean L_DE over ``pairs`` without tracking gradients."""
    images_t = _as_tensor(images, net)
    total = 0.0
    with torch.no_grad():
        for k in range(0, len(pairs), chunk):
            part = pairs.subset(slice(k, k + chunk))
            total += float(_pair_loss(net, images_t, part, distance)) * len(part)
    return total / len(pairs)


def train(
    net: EmbeddingNet,
    images,
    pairs: PairSet,
    config: TrainConfig = TrainConfig(),
    validation: PairSet | None = None,
    progress=None,
) -> list[EpochRecord]:
    """Fit ``net`` so feature distances match the pair targets.

    Row 0 of the returned history is measured before any update; row ``e``
    holds the mean training loss over epoch ``e``'s batches and the
    validation loss after it.  ``progress`` is called with each record.
    """
    images = np.asarray(getattr(images, "images", images))
    if len(pairs) == 0 or pairs.d_target is None:
        raise ValidationError("training needs a non-empty labeled PairSet")
    if validation is not None and validation.d_target is None:
        raise ValidationError("validation pairs need targets")
    torch.manual_seed(config.seed)
    images_t = _as_tensor(images, net)
    if config.optimizer == "rmsprop":
        opt = torch.optim.RMSprop(net.parameters(), lr=config.learning_rate, alpha=config.decay, eps=config.epsilon)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate)

    def val_loss():
        return float("nan") if validation is None else evaluate_lde(net, images, validation, config.distance)

    history = [EpochRecord(0, evaluate_lde(net, images, pairs, config.distance), val_loss())]
    if progress:
        progress(history[-1])
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for batch in batch_pairs(pairs, config.batch_size, config.seed, epoch):
            opt.zero_grad()
            loss = _pair_loss(net, images_t, batch, config.distance)
            if not torch.isfinite(loss):
                raise DivergenceError(f"training loss became non-finite in epoch {epoch}", step=epoch)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        record = EpochRecord(epoch, total / len(pairs), val_loss())
        if not np.isfinite(record.train_lde) or (validation is not None and not np.isfinite(record.val_lde)):
            raise DivergenceError(f"loss became non-finite in epoch {epoch}", step=epoch)
        history.append(record)
        if progress:
            progress(record)
    return history


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, net: EmbeddingNet, extra: dict | None = None) -> None:
    """Magic, format version, JSON header length, JSON header, then little-endian float32 tensors."""
    state = net.state_dict()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": net.architecture(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in state.values():
            fh.write(v.detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[EmbeddingNet, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off: off + hlen])
    off += hlen
    net = EmbeddingNet(header["architecture"]["channels"])
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        nbytes = 4 * count
        if off + nbytes > len(raw):
            raise ValidationError(f"{path}: truncated tensor {t['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
        off += nbytes
    if off != len(raw):
        raise ValidationError(f"{path}: trailing bytes after last tensor")
    net.load_state_dict(state)
    return net, header
