"""Readers and writers for every on-disk artifact.

Rasters are little-endian float32 with a JSON sidecar of the same stem; tables
are CSV with a fixed header.  Readers raise :class:`ValidationError` naming the
file and the offending field.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .dataset import PairSet
from .errors import ValidationError
from .geometry import canonicalize, normalize
from .recovery import DistanceGraph
from .simulate import GroundTruth, ProjectionStack, Volume

FLOAT_FMT = "%.17g"


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _require(meta: dict, keys, path):
    for k in keys:
        if k not in meta:
            raise ValidationError(f"{path}: missing field {k!r}")


def _read_raw(path, count: int) -> np.ndarray:
    try:
        data = np.fromfile(path, dtype="<f4")
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None
    if data.size != count:
        raise ValidationError(f"{path}: expected {count} float32 values, found {data.size}")
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: contains non-finite values")
    return data.astype(np.float64)


# --- rasters ----------------------------------------------------------------

def write_volume(path, vol: Volume) -> None:
    nz, ny, nx = vol.shape
    vol.data.astype("<f4").tofile(path)
    write_json(_sidecar(path), {"nx": nx, "ny": ny, "nz": nz, "voxel_size": vol.voxel_size})


def read_volume(path) -> Volume:
    meta = read_json(_sidecar(path))
    _require(meta, ("nx", "ny", "nz", "voxel_size"), _sidecar(path))
    nx, ny, nz = int(meta["nx"]), int(meta["ny"]), int(meta["nz"])
    data = _read_raw(path, nx * ny * nz).reshape(nz, ny, nx)
    return Volume(data, float(meta["voxel_size"]))


def write_stack(path, stack: ProjectionStack) -> None:
    count, h, w = stack.images.shape
    stack.images.astype("<f4").tofile(path)
    write_json(_sidecar(path), {"count": count, "height": h, "width": w, "pixel_size": stack.pixel_size})


def read_stack(path) -> ProjectionStack:
    meta = read_json(_sidecar(path))
    _require(meta, ("count", "height", "width", "pixel_size"), _sidecar(path))
    shape = (int(meta["count"]), int(meta["height"]), int(meta["width"]))
    data = _read_raw(path, int(np.prod(shape))).reshape(shape)
    return ProjectionStack(data, float(meta["pixel_size"]))


# --- tables -----------------------------------------------------------------

def _read_table(path, header: list[str]) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None
    if not rows or [c.strip() for c in rows[0]] != header:
        raise ValidationError(f"{path}: expected header {','.join(header)}")
    body = rows[1:]
    for n, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValidationError(f"{path}: line {n} has {len(row)} fields, expected {len(header)}")
    return body


def _floats(path, rows, col: int, name: str, allow_blank: bool = False):
    out = []
    for n, row in enumerate(rows, start=2):
        cell = row[col].strip()
        if cell == "" and allow_blank:
            out.append(np.nan)
            continue
        try:
            out.append(float(cell))
        except ValueError:
            raise ValidationError(f"{path}: line {n} field {name!r} is not a number: {cell!r}") from None
    return np.array(out, dtype=float)


def _ints(path, rows, col: int, name: str):
    vals = _floats(path, rows, col, name)
    if np.any(vals != np.round(vals)):
        raise ValidationError(f"{path}: field {name!r} must hold integers")
    return vals.astype(np.int64)


def write_orientations(path, q, index=None) -> None:
    """``index`` defaults to ``0..N-1``; pass stack indices when ``q`` covers a subset."""
    q = canonicalize(normalize(np.atleast_2d(q)))
    index = np.arange(len(q)) if index is None else np.asarray(index, dtype=np.int64)
    if index.shape != (len(q),):
        raise ValidationError("one index per orientation required")
    with open(path, "w", newline="") as fh:
        fh.write("index,a,b,c,d\n")
        for k, row in zip(index, q):
            fh.write(f"{k}," + ",".join(FLOAT_FMT % v for v in row) + "\n")


def read_orientations(path, with_index: bool = False):
    header = ["index", "a", "b", "c", "d"]
    rows = _read_table(path, header)
    if not rows:
        raise ValidationError(f"{path}: no orientations")
    idx = _ints(path, rows, 0, "index")
    if np.any(np.diff(idx) <= 0) or idx[0] < 0:
        raise ValidationError(f"{path}: field 'index' must be non-negative and strictly increasing")
    q = np.stack([_floats(path, rows, c, header[c]) for c in range(1, 5)], axis=1)
    norms = np.linalg.norm(q, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
    if len(bad):
        raise ValidationError(f"{path}: line {bad[0] + 2} quaternion is not unit norm ({norms[bad[0]]:.6g})")
    q = normalize(q)
    return (q, idx) if with_index else q


def write_ground_truth(path, truth: GroundTruth) -> None:
    q = canonicalize(truth.orientations)
    with open(path, "w", newline="") as fh:
        fh.write("index,a,b,c,d,t1,t2\n")
        for k in range(len(q)):
            vals = list(q[k]) + list(truth.shifts[k])
            fh.write(f"{k}," + ",".join(FLOAT_FMT % v for v in vals) + "\n")


def read_ground_truth(path) -> GroundTruth:
    header = ["index", "a", "b", "c", "d", "t1", "t2"]
    rows = _read_table(path, header)
    cols = [_floats(path, rows, c, header[c]) for c in range(1, 7)]
    q = normalize(np.stack(cols[:4], axis=1))
    return GroundTruth(q, np.stack(cols[4:], axis=1))


def write_pairs(path, pairs: PairSet) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("i,j,d_target\n")
        for k in range(len(pairs)):
            d = "" if pairs.d_target is None else FLOAT_FMT % pairs.d_target[k]
            fh.write(f"{pairs.i[k]},{pairs.j[k]},{d}\n")


def read_pairs(path) -> PairSet:
    rows = _read_table(path, ["i", "j", "d_target"])
    i = _ints(path, rows, 0, "i")
    j = _ints(path, rows, 1, "j")
    d = _floats(path, rows, 2, "d_target", allow_blank=True)
    if np.all(np.isnan(d)):
        d = None
    elif np.any(np.isnan(d)):
        raise ValidationError(f"{path}: field 'd_target' is blank on some rows only")
    try:
        return PairSet(i, j, d)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def write_graph(path, graph: DistanceGraph) -> None:
    """Records are written with stack indices when the graph carries ``node_ids``."""
    ids = np.arange(graph.n_nodes) if graph.node_ids is None else graph.node_ids
    with open(path, "w", newline="") as fh:
        fh.write("i,j,d\n")
        for a, b, d in zip(ids[graph.i], ids[graph.j], graph.d):
            fh.write(f"{a},{b},{FLOAT_FMT % d}\n")


def read_graph(path) -> DistanceGraph:
    """Nodes become the distinct indices in the file, ascending; ``node_ids`` maps them back."""
    rows = _read_table(path, ["i", "j", "d"])
    if not rows:
        raise ValidationError(f"{path}: graph has no records")
    i = _ints(path, rows, 0, "i")
    j = _ints(path, rows, 1, "j")
    d = _floats(path, rows, 2, "d")
    nodes = np.unique(np.concatenate([i, j]))
    try:
        return DistanceGraph(len(nodes), np.searchsorted(nodes, i), np.searchsorted(nodes, j), d, node_ids=nodes)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,train_lde,val_lde\n")
        for r in history:
            fh.write(f"{r.epoch},{FLOAT_FMT % r.train_lde},{FLOAT_FMT % r.val_lde}\n")


def read_history(path) -> list[tuple[int, float, float]]:
    rows = _read_table(path, ["epoch", "train_lde", "val_lde"])
    e = _ints(path, rows, 0, "epoch")
    t = _floats(path, rows, 1, "train_lde")
    v = _floats(path, rows, 2, "val_lde")
    return list(zip(e.tolist(), t.tolist(), v.tolist()))


def write_fsc(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("freq,fsc\n")
        for f, c in zip(curve.freq, curve.fsc):
            fh.write(f"{FLOAT_FMT % f},{FLOAT_FMT % c}\n")
    write_json(_sidecar(path), curve.to_json())


def write_rows(path, rows: list[dict], columns: list[str]) -> None:
    """Tidy CSV with one dict per row."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in columns})
