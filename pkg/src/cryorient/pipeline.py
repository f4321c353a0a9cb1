"""File-based pipeline stages operating on a workspace directory.

Each stage reads the outputs of earlier stages, writes its own outputs and a
manifest under ``manifests/``.  A stage whose input hashes, parameters and
outputs all match its manifest is skipped unless forced.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .alignment import AlignConfig, O4Transform, align, o4_matrix
from .config import ExperimentConfig
from .dataset import PairSet, SplitSpec, all_pairs, make_uniform_pairs, sample_pairs, split
from .errors import ValidationError
from .estimator import (
    EmbeddingNet,
    EuclideanBaseline,
    SiameseEstimator,
    TrainConfig,
    estimate_graph,
    load_checkpoint,
    loss_de,
    save_checkpoint,
    train,
)
from .geometry import SamplingScheme, d_q, normalize, sample_orientations
from .recovery import RecoveryConfig, exact_graph, loss_or, perturb_graph, recover
from .reconstruct import ReconstructionConfig, cgls_reconstruct, fsc
from .simulate import PerturbationSpec, ProjectionStack, make_phantom, simulate_stack

MANIFEST_DIR = "manifests"


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sidecars(names):
    out = []
    for n in names:
        out.append(n)
        if n.endswith(".raw"):
            out.append(n[:-4] + ".json")
    return out


@dataclass
class StageOutcome:
    name: str
    ran: bool
    summary: dict = field(default_factory=dict)


class Workspace:
    def __init__(self, root, config: ExperimentConfig | None = None, force: bool = False):
        self.root = Path(root)
        self.config = config or ExperimentConfig()
        self.force = force

    def path(self, name: str) -> Path:
        return self.root / name

    def manifest_path(self, stage: str) -> Path:
        return self.root / MANIFEST_DIR / f"{stage}.json"

    def manifests(self) -> dict:
        d = self.root / MANIFEST_DIR
        if not d.is_dir():
            return {}
        return {p.stem: json.loads(p.read_text()) for p in sorted(d.glob("*.json"))}

    def _need(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ValidationError(f"missing input {p}; run the '{producer}' stage first")
        return p

    def run(self, stage: str, inputs: dict[str, str], outputs: list[str], params: dict, fn) -> StageOutcome:
        """Run ``fn()`` unless an identical previous run left a valid manifest.

        ``inputs`` maps file names to the stage that produces them.
        """
        in_files = _sidecars(inputs)
        for name in inputs:
            self._need(name, inputs[name])
        hashes = {n: file_hash(self.path(n)) for n in in_files if self.path(n).exists()}
        params_blob = json.dumps(params, sort_keys=True, default=str)
        params_hash = hashlib.sha256(params_blob.encode()).hexdigest()[:16]
        out_files = _sidecars(outputs)
        mpath = self.manifest_path(stage)
        if not self.force and mpath.exists():
            old = json.loads(mpath.read_text())
            if (
                old.get("inputs") == hashes
                and old.get("params_hash") == params_hash
                and all(self.path(n).exists() for n in out_files)
                and old.get("outputs") == {n: file_hash(self.path(n)) for n in out_files}
            ):
                return StageOutcome(stage, False, old.get("summary", {}))
        self.root.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        summary = fn() or {}
        wall = time.perf_counter() - t0
        manifest = {
            "stage": stage,
            "tool_version": __version__,
            "config_hash": self.config.hash(),
            "inputs": hashes,
            "params": json.loads(params_blob),
            "params_hash": params_hash,
            "seed": params.get("seed"),
            "wall_time": wall,
            "outputs": {n: file_hash(self.path(n)) for n in out_files},
            "summary": summary,
        }
        mpath.parent.mkdir(parents=True, exist_ok=True)
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return StageOutcome(stage, True, summary)


# --- helpers shared by stages and sweeps ---------------------------------

def _scheme(cfg: ExperimentConfig) -> SamplingScheme:
    sim = cfg["simulation"]
    return SamplingScheme.preset(sim["scheme"], sim["directions"])


def _recovery_config(cfg: ExperimentConfig, seed=None) -> RecoveryConfig:
    r = cfg["recovery"]
    return RecoveryConfig(
        batch_size=r["batch_size"], learning_rate=r["learning_rate"], max_steps=r["max_steps"],
        check_every=r["check_every"], tolerance=r["tolerance"], patience=r["patience"],
        lr_halvings=r["lr_halvings"], seed=r["seed"] if seed is None else seed,
    )


def _align_config(cfg: ExperimentConfig, seed=None) -> AlignConfig:
    a = cfg["alignment"]
    return AlignConfig(
        steps=a["steps"], restarts=a["restarts"], batch_size=a["batch_size"],
        learning_rate=a["learning_rate"], decay=a["decay"], seed=a["seed"] if seed is None else seed,
    )


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    e = cfg["estimator"]
    return TrainConfig(
        epochs=e["epochs"], batch_size=e["batch_size"], learning_rate=e["learning_rate"],
        optimizer=e["optimizer"], distance=e["distance"], seed=e["seed"],
    )


def _estimator(ws: Workspace):
    e = ws.config["estimator"]
    if e["kind"] == "euclidean-baseline":
        return EuclideanBaseline()
    net, header = load_checkpoint(ws._need("model.ckpt", "train"))
    return SiameseEstimator(net, header.get("extra", {}).get("distance", e["distance"]))


def _spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


# --- stages -------------------------------------------------------------

def stage_phantom(ws: Workspace) -> StageOutcome:
    p = ws.config["phantom"]

    def go():
        vol = make_phantom(p["kind"], p["size"], p["seed"])
        io.write_volume(ws.path("volume.raw"), vol)
        return {"shape": list(vol.shape)}

    return ws.run("phantom", {}, ["volume.raw"], dict(p), go)


def stage_project(ws: Workspace) -> StageOutcome:
    s = ws.config["simulation"]

    def go():
        vol = io.read_volume(ws.path("volume.raw"))
        q = sample_orientations(_scheme(ws.config), s["count"], s["seed"])
        spec = PerturbationSpec(s["shift_limit"], s["noise_var"])
        stack, truth = simulate_stack(vol, q, spec, s["seed"], s["image_size"])
        clean, _ = simulate_stack(vol, q, None, s["seed"], s["image_size"])
        io.write_stack(ws.path("stack.raw"), stack)
        io.write_stack(ws.path("stack_clean.raw"), clean)
        io.write_ground_truth(ws.path("truth.csv"), truth)
        return {"count": len(stack)}

    return ws.run("project", {"volume.raw": "phantom"}, ["stack.raw", "stack_clean.raw", "truth.csv"], dict(s), go)


def stage_split(ws: Workspace) -> StageOutcome:
    sp = ws.config["split"]

    def go():
        count = io.read_json(ws.path("stack.json"))["count"]
        parts = split(count, SplitSpec(tuple(sp["fractions"]), sp["seed"]))
        io.write_json(ws.path("split.json"), {k: parts[k].tolist() for k in ("train", "val", "test")})
        return {k: len(parts[k]) for k in ("train", "val", "test")}

    return ws.run("split", {"stack.raw": "project"}, ["split.json"], dict(sp), go)


def _read_split(ws: Workspace) -> dict:
    d = io.read_json(ws._need("split.json", "split"))
    for k in ("train", "val", "test"):
        if k not in d:
            raise ValidationError(f"{ws.path('split.json')}: missing field {k!r}")
    return {k: np.asarray(d[k], dtype=np.int64) for k in ("train", "val", "test")}


def stage_pairs(ws: Workspace) -> StageOutcome:
    pc = ws.config["pairs"]

    def go():
        q = io.read_ground_truth(ws.path("truth.csv")).orientations
        parts = _read_split(ws)
        train_p = make_uniform_pairs(parts["train"], q, pc["train_fraction"], pc["bins"], pc["seed"])
        val_p = make_uniform_pairs(parts["val"], q, pc["val_fraction"], pc["bins"], pc["seed"] + 1)
        test_p = all_pairs(parts["test"]).with_targets(q)
        io.write_pairs(ws.path("pairs_train.csv"), train_p)
        io.write_pairs(ws.path("pairs_val.csv"), val_p)
        io.write_pairs(ws.path("pairs_test.csv"), test_p)
        return {"train": len(train_p), "val": len(val_p), "test": len(test_p)}

    return ws.run(
        "pairs", {"truth.csv": "project", "split.json": "split"},
        ["pairs_train.csv", "pairs_val.csv", "pairs_test.csv"], dict(pc), go,
    )


def stage_train(ws: Workspace, log=None) -> StageOutcome:
    e = ws.config["estimator"]
    if e["kind"] == "euclidean-baseline":
        raise ValidationError("the euclidean-baseline estimator has no parameters to train")

    def go():
        stack = io.read_stack(ws.path("stack.raw"))
        tr = io.read_pairs(ws.path("pairs_train.csv"))
        va = io.read_pairs(ws.path("pairs_val.csv"))
        net = EmbeddingNet(e["channels"], seed=e["seed"])
        history = train(net, stack.images, tr, _train_config(ws.config), va, progress=log)
        save_checkpoint(ws.path("model.ckpt"), net, {"distance": e["distance"]})
        io.write_history(ws.path("history.csv"), history)
        return {"epoch0_val_lde": history[0].val_lde, "final_val_lde": history[-1].val_lde}

    return ws.run(
        "train", {"stack.raw": "project", "pairs_train.csv": "pairs", "pairs_val.csv": "pairs"},
        ["model.ckpt", "history.csv"], dict(e), go,
    )


def stage_estimate(ws: Workspace) -> StageOutcome:
    e, pc = ws.config["estimator"], ws.config["pairs"]
    inputs = {"stack.raw": "project", "pairs_test.csv": "pairs"}
    if e["kind"] == "siamese":
        inputs["model.ckpt"] = "train"

    def go():
        stack = io.read_stack(ws.path("stack.raw"))
        test = io.read_pairs(ws.path("pairs_test.csv"))
        graph = estimate_graph(_estimator(ws), stack.images, test)
        io.write_graph(ws.path("graph.csv"), graph)
        summary = {"records": len(graph)}
        if test.d_target is not None:
            n = min(pc["test_pairs"], len(test))
            pick = np.random.default_rng(pc["seed"]).choice(len(test), n, replace=False)
            summary["spearman"] = _spearman(graph.d[pick], test.d_target[pick])
            summary["test_lde"] = loss_de(graph.d, test.d_target)
        io.write_json(ws.path("estimate.json"), summary)
        return summary

    return ws.run("estimate", inputs, ["graph.csv", "estimate.json"], {"estimator": dict(e), "pairs": dict(pc)}, go)


def stage_recover(ws: Workspace) -> StageOutcome:
    r = ws.config["recovery"]
    exact = r["graph"] == "exact"
    inputs = {"truth.csv": "project"} if exact else {"graph.csv": "estimate"}

    def go():
        if exact:
            q = io.read_ground_truth(ws.path("truth.csv")).orientations
            graph = exact_graph(q)
            graph.node_ids = np.arange(len(q))
        else:
            graph = io.read_graph(ws.path("graph.csv"))
        if r["perturb_var"] > 0:
            graph = perturb_graph(graph, r["perturb_var"], r["seed"])
        result = recover(graph, _recovery_config(ws.config))
        io.write_orientations(ws.path("recovered.csv"), result.orientations, graph.node_ids)
        trace = result.trace()
        trace["warnings"] = result.warnings
        io.write_json(ws.path("recovery.json"), trace)
        return {"steps": result.steps, "best_l_or": result.best_loss, "converged": result.converged}

    return ws.run("recover", inputs, ["recovered.csv", "recovery.json"], dict(r), go)


def stage_align(ws: Workspace) -> StageOutcome:
    a = ws.config["alignment"]

    def go():
        truth = io.read_ground_truth(ws.path("truth.csv")).orientations
        qh, idx = io.read_orientations(ws.path("recovered.csv"), with_index=True)
        if idx.max() >= len(truth):
            raise ValidationError(f"{ws.path('recovered.csv')}: index beyond ground truth")
        res = align(truth[idx], qh, _align_config(ws.config))
        io.write_json(ws.path("alignment.json"), res.to_json())
        return {"e_or": res.e_or, "m": res.transform.m}

    return ws.run("align", {"truth.csv": "project", "recovered.csv": "recover"}, ["alignment.json"], dict(a), go)


def aligned_orientations(ws: Workspace) -> tuple[np.ndarray, np.ndarray]:
    qh, idx = io.read_orientations(ws._need("recovered.csv", "recover"), with_index=True)
    if ws.path("alignment.json").exists():
        al = io.read_json(ws.path("alignment.json"))
        T = o4_matrix(O4Transform(tuple(al["angles"]), int(al["m"])))
        qh = normalize(qh @ T.T)
    return qh, idx


def stage_reconstruct(ws: Workspace, source: str = "recovered") -> StageOutcome:
    rc = ws.config["reconstruction"]
    inputs = {"stack_clean.raw": "project"}
    if source == "recovered":
        inputs.update({"recovered.csv": "recover", "alignment.json": "align"})
    else:
        inputs["truth.csv"] = "project"

    def go():
        stack = io.read_stack(ws.path("stack_clean.raw"))
        if source == "recovered":
            q, idx = aligned_orientations(ws)
        else:
            q = io.read_ground_truth(ws.path("truth.csv")).orientations
            idx = np.arange(len(q))
            if source == "random":
                q = sample_orientations(SamplingScheme.preset("uniform-so3"), len(q), rc["iterations"])
        sub = ProjectionStack(stack.images[idx], stack.pixel_size)
        vol, trace = cgls_reconstruct(sub, q, ReconstructionConfig(rc["iterations"], epsilon=rc["epsilon"]))
        io.write_volume(ws.path("reconstruction.raw"), vol)
        io.write_json(ws.path("reconstruction_trace.json"), {"residual": trace, "source": source})
        return {"final_residual": trace[-1], "images": len(idx)}

    return ws.run(
        "reconstruct", inputs, ["reconstruction.raw", "reconstruction_trace.json"],
        {"reconstruction": dict(rc), "source": source}, go,
    )


def stage_fsc(ws: Workspace) -> StageOutcome:
    rc = ws.config["reconstruction"]

    def go():
        truth = io.read_volume(ws.path("volume.raw"))
        rec = io.read_volume(ws.path("reconstruction.raw"))
        curve = fsc(truth, rec, rc["shells"], rc["threshold"])
        io.write_fsc(ws.path("fsc.csv"), curve)
        return curve.to_json()

    return ws.run("fsc", {"volume.raw": "phantom", "reconstruction.raw": "reconstruct"}, ["fsc.csv"], dict(rc), go)


# --- sweeps -------------------------------------------------------------

def perturbation_sweep(cfg: ExperimentConfig, levels, seeds: int = 1, reconstruct: bool = False, log=None):
    """Exact graph + Gaussian distance noise at each level; one row per (level, seed)."""
    s, rc = cfg["simulation"], cfg["reconstruction"]
    rows = []
    vol = clean = None
    if reconstruct:
        p = cfg["phantom"]
        vol = make_phantom(p["kind"], p["size"], p["seed"])
    for seed in range(seeds):
        q = sample_orientations(_scheme(cfg), s["count"], s["seed"] + seed)
        if reconstruct:
            clean, _ = simulate_stack(vol, q, None, s["seed"] + seed, s["image_size"])
        base = exact_graph(q)
        for level in levels:
            graph = perturb_graph(base, level, [seed, 7])
            res = recover(graph, _recovery_config(cfg, seed=cfg["recovery"]["seed"] + seed))
            al = align(q, res.orientations, _align_config(cfg, seed=cfg["alignment"]["seed"] + seed))
            row = {"sigma2": level, "seed": seed, "l_or": res.best_loss, "e_or": al.e_or,
                   "l_or_exact": loss_or(res.orientations, base)}
            if reconstruct:
                qa = normalize(res.orientations @ o4_matrix(al.transform).T)
                rec, _ = cgls_reconstruct(clean, qa, ReconstructionConfig(rc["iterations"], epsilon=rc["epsilon"]))
                row["resolution"] = fsc(vol, rec, rc["shells"], rc["threshold"]).resolution
            rows.append(row)
            if log:
                log(row)
    return rows


def invariance_sweep(ws: Workspace, kind: str, levels, log=None):
    """Train a fresh estimator on images perturbed at each level and score it.

    Images are re-simulated from the workspace phantom and orientations; the
    split and pairs are reused so every level sees the same pairs.  The row
    reports the median validation L_DE over training epochs 1..E, the final
    validation L_DE, and the median squared error on a sample of test pairs.
    Degradation is measured against the first level.
    """
    if kind not in ("shift", "noise"):
        raise ValidationError(f"unknown invariance sweep {kind!r}")
    s, e, pc = ws.config["simulation"], ws.config["estimator"], ws.config["pairs"]
    vol = io.read_volume(ws._need("volume.raw", "phantom"))
    truth = io.read_ground_truth(ws._need("truth.csv", "project")).orientations
    tr = io.read_pairs(ws._need("pairs_train.csv", "pairs"))
    va = io.read_pairs(ws._need("pairs_val.csv", "pairs"))
    test = io.read_pairs(ws._need("pairs_test.csv", "pairs"))
    n = min(pc["test_pairs"], len(test))
    test = test.subset(np.random.default_rng(pc["seed"]).choice(len(test), n, replace=False))
    rows = []
    for level in levels:
        spec = PerturbationSpec(shift_limit=level) if kind == "shift" else PerturbationSpec(noise_var=level)
        stack, _ = simulate_stack(vol, truth, spec, s["seed"], s["image_size"])
        if e["kind"] == "siamese":
            net = EmbeddingNet(e["channels"], seed=e["seed"])
            history = train(net, stack.images, tr, _train_config(ws.config), va)
            val = [h.val_lde for h in history[1:]] or [history[0].val_lde]
            est = SiameseEstimator(net, e["distance"])
        else:
            est = EuclideanBaseline()
            val = [loss_de(est.distances(stack.images, va.i, va.j), va.d_target)]
        sq = (est.distances(stack.images, test.i, test.j) - test.d_target) ** 2
        row = {"kind": kind, "level": level, "median_val_lde": float(np.median(val)),
               "final_val_lde": float(val[-1]), "test_median_sq_error": float(np.median(sq))}
        row["degradation"] = row["median_val_lde"] / rows[0]["median_val_lde"] - 1.0 if rows else 0.0
        rows.append(row)
        if log:
            log(row)
    return rows


def summarize_levels(rows, key: str, value: str):
    levels = sorted({r[key] for r in rows})
    out = []
    for lv in levels:
        vals = [r[value] for r in rows if r[key] == lv and r.get(value) is not None]
        out.append({key: lv, f"median_{value}": float(np.median(vals)) if vals else None,
                    "runs": sum(r[key] == lv for r in rows)})
    return out


# --- report -------------------------------------------------------------

def build_report(ws: Workspace) -> dict:
    """Aggregate manifests into one record and render figures for whatever stages exist."""
    from . import plotting

    manifests = ws.manifests()
    report: dict = {"config_hash": ws.config.hash()}
    if not manifests:
        return report
    report["tool_version"] = __version__
    report["stages"] = {k: {"wall_time": m["wall_time"], "seed": m.get("seed"), "summary": m.get("summary", {})}
                        for k, m in manifests.items()}
    figs = ws.path("figures")
    figs.mkdir(exist_ok=True)
    metrics = []
    if ws.path("history.csv").exists():
        hist = io.read_history(ws.path("history.csv"))
        plotting.plot_history(hist, figs / "loss_history.png")
        metrics += [("epoch0_val_lde", hist[0][2]), ("final_val_lde", hist[-1][2])]
    if ws.path("estimate.json").exists():
        est = io.read_json(ws.path("estimate.json"))
        metrics += [(f"estimate_{k}", v) for k, v in sorted(est.items())]
        if ws.path("graph.csv").exists() and ws.path("pairs_test.csv").exists():
            g = io.read_graph(ws.path("graph.csv"))
            truth = io.read_ground_truth(ws.path("truth.csv")).orientations
            ids = g.node_ids
            plotting.plot_distance_scatter(d_q(truth[ids[g.i]], truth[ids[g.j]]), g.d, figs / "distances.png")
    if ws.path("recovery.json").exists():
        tr = io.read_json(ws.path("recovery.json"))
        plotting.plot_recovery_trace(tr, figs / "recovery_trace.png", ws.config["recovery"]["check_every"])
        if tr["checkpoint_loss"]:
            metrics.append(("min_checkpoint_l_or", min(tr["checkpoint_loss"])))
    if ws.path("alignment.json").exists():
        al = io.read_json(ws.path("alignment.json"))
        plotting.plot_error_histogram(al["per_orientation_errors_histogram"], figs / "orientation_errors.png")
        metrics += [("e_or", al["e_or"]), ("m", al["m"])]
    if ws.path("fsc.csv").exists():
        import csv

        with open(ws.path("fsc.csv")) as fh:
            rows = list(csv.DictReader(fh))
        summary = io.read_json(ws.path("fsc.json"))
        thr = summary.get("threshold", 0.5)
        plotting.plot_fsc([float(r["freq"]) for r in rows], [float(r["fsc"]) for r in rows], figs / "fsc.png", thr)
        metrics.append((f"resolution_at_{thr:g}", summary.get(f"resolution_at_{thr:g}")))
    report["metrics"] = dict(metrics)
    io.write_rows(ws.path("metrics.csv"), [{"metric": k, "value": v} for k, v in metrics], ["metric", "value"])
    report["figures"] = sorted(str(p.relative_to(ws.root)) for p in figs.glob("*.png"))
    return report
