import csv
import json

import pytest

from cryorient.cli import EXIT_OK, EXIT_VALIDATION, main
from cryorient.config import ExperimentConfig

SMALL = [
    "phantom.size=16", "simulation.count=40", "simulation.image_size=16",
    "estimator.channels=[4,4,4]", "estimator.epochs=2", "pairs.train_fraction=1.0",
    "recovery.max_steps=2000", "alignment.restarts=4", "alignment.steps=50",
    "reconstruction.iterations=5", "pairs.test_pairs=50",
]


@pytest.fixture
def ws(tmp_path):
    cfg = ExperimentConfig()
    for s in SMALL:
        cfg.override(s)
    cfg.dump(tmp_path / "config.yaml")
    return tmp_path


def run(ws, *args):
    return main(["--workspace", str(ws), *args])


PIPELINE = ["phantom", "project", "split", "pairs", "train", "estimate", "recover", "align", "reconstruct", "fsc"]


def test_full_pipeline_and_report(ws, capsys):
    for stage in PIPELINE:
        assert run(ws, stage) == EXIT_OK, stage
    for name in ("volume.raw", "stack.raw", "truth.csv", "split.json", "pairs_test.csv", "model.ckpt",
                 "history.csv", "graph.csv", "recovered.csv", "alignment.json", "reconstruction.raw", "fsc.csv"):
        assert (ws / name).exists(), name
    for stage in PIPELINE:
        m = json.loads((ws / "manifests" / f"{stage}.json").read_text())
        assert {"inputs", "params", "seed", "wall_time", "outputs", "config_hash", "tool_version"} <= set(m)
    assert run(ws, "report") == EXIT_OK
    report = json.loads((ws / "report.json").read_text())
    assert "e_or" in report["metrics"]
    assert "figures/fsc.png" in report["figures"]
    with open(ws / "metrics.csv") as fh:
        assert {r["metric"] for r in csv.DictReader(fh)} >= {"e_or", "final_val_lde"}

    capsys.readouterr()
    assert run(ws, "phantom") == EXIT_OK
    assert "up to date" in capsys.readouterr().out
    assert run(ws, "phantom", "--force") == EXIT_OK
    assert "done" in capsys.readouterr().out


def test_changed_parameter_reruns(ws, capsys):
    run(ws, "phantom")
    capsys.readouterr()
    assert run(ws, "phantom", "--set", "phantom.seed=5") == EXIT_OK
    assert "phantom: done" in capsys.readouterr().out


def test_missing_input_exits_2(ws, capsys):
    assert run(ws, "train") == EXIT_VALIDATION
    assert "run the 'project' stage first" in capsys.readouterr().err


def test_bad_override_exits_2(ws, capsys):
    assert run(ws, "phantom", "--set", "phantom.colour=red") == EXIT_VALIDATION
    assert "unknown config key" in capsys.readouterr().err


def test_report_on_empty_workspace(tmp_path, capsys):
    assert main(["--workspace", str(tmp_path / "empty"), "report"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"config_hash"}


def test_global_flags_after_subcommand(ws, capsys):
    assert main(["phantom", "--workspace", str(ws), "--seed", "3"]) == EXIT_OK
    m = json.loads((ws / "manifests" / "phantom.json").read_text())
    assert m["seed"] == 3


def test_perturbation_sweep(ws, capsys):
    assert run(ws, "sweep", "--perturb", "0,0.2,0.4,0.8") == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("sigma2,median_e_or")
    assert len(lines) == 5
    with open(ws / "sweep_perturb_runs.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    assert (ws / "figures" / "sweep_perturb.png").exists()


def test_invariance_sweep(ws, capsys):
    for stage in ("phantom", "project", "split", "pairs"):
        run(ws, stage)
    capsys.readouterr()
    assert run(ws, "sweep", "--shift", "0,2") == EXIT_OK
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0].startswith("kind,level,median_val_lde")
    assert len(out) == 3
    assert (ws / "sweep_shift.csv").exists()


def test_sweep_needs_a_kind(ws, capsys):
    assert run(ws, "sweep") == EXIT_VALIDATION


def test_stage_outputs_are_byte_identical(tmp_path):
    roots = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        cfg = ExperimentConfig()
        for s in SMALL:
            cfg.override(s)
        cfg.dump(root / "config.yaml")
        for stage in ("phantom", "project", "split", "pairs", "train", "estimate", "recover"):
            assert main(["--workspace", str(root), stage]) == EXIT_OK
        roots.append(root)
    for name in ("volume.raw", "stack.raw", "truth.csv", "pairs_train.csv", "model.ckpt",
                 "history.csv", "graph.csv", "recovered.csv"):
        assert (roots[0] / name).read_bytes() == (roots[1] / name).read_bytes(), name
