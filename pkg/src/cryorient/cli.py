"""Command-line entry point: ``cryorient <stage> [options]``.

Exit status is 0 on success, 2 for invalid input or configuration and 3
when an iterative solver diverges.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import io, pipeline
from .config import ExperimentConfig
from .errors import DivergenceError, ValidationError

WORKSPACE_ENV = "CRYORIENT_WORKSPACE"
EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED = 0, 2, 3
INVARIANCE_COLUMNS = ["kind", "level", "median_val_lde", "final_val_lde", "degradation", "test_median_sq_error"]
STAGES = ("phantom", "project", "split", "pairs", "train", "estimate", "recover", "align",
          "reconstruct", "fsc", "report", "sweep")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--workspace", default=d(None),
                   help=f"workspace directory (default: ${WORKSPACE_ENV} or the current directory)")
    p.add_argument("--config", default=d(None), help="YAML experiment config (default: <workspace>/config.yaml if present)")
    p.add_argument("--set", dest="overrides", action="append", default=d([]), metavar="SECTION.KEY=VALUE",
                   help="override one config field; repeatable")
    p.add_argument("--seed", type=int, default=d(None), help="replace every seed in the config")
    p.add_argument("--threads", type=int, default=d(None), help="worker threads for numba and torch")
    p.add_argument("--force", action="store_true", default=d(False), help="re-run even if outputs are up to date")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cryorient", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "phantom": "write the synthetic volume",
        "project": "simulate the projection stack and ground truth",
        "split": "split projections into train/val/test",
        "pairs": "form distance-uniform training pairs and all test pairs",
        "train": "train the Siamese distance estimator",
        "estimate": "estimate distances for the test pairs",
        "recover": "recover orientations from the distance graph",
        "align": "align recovered orientations to ground truth and report E_OR",
        "reconstruct": "CGLS reconstruction from the clean stack",
        "fsc": "Fourier shell correlation against the phantom",
        "report": "aggregate manifests, write report.json, metrics.csv and figures",
        "sweep": "perturbation or invariance sweeps, written as tidy CSV plus a figure",
    }
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "reconstruct":
            sp.add_argument("--source", choices=("recovered", "truth", "random"), default="recovered",
                            help="orientations to reconstruct with")
        if name == "sweep":
            sp.add_argument("--perturb", type=_float_list, help="distance-noise variances, e.g. 0,0.2,0.4,0.8")
            sp.add_argument("--noise", type=_float_list, help="image-noise variances; one estimator is trained per level")
            sp.add_argument("--shift", type=_float_list, help="shift limits in pixels; one estimator is trained per level")
            sp.add_argument("--seeds", type=int, default=1, help="repetitions per perturbation level")
            sp.add_argument("--reconstruct", action="store_true", help="also reconstruct and score FSC per run")
    return parser


def _load_config(args, root: Path) -> ExperimentConfig:
    path = args.config or (root / "config.yaml" if (root / "config.yaml").exists() else None)
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    for assignment in args.overrides:
        cfg.override(assignment)
    if args.seed is not None:
        for section in cfg.data.values():
            if "seed" in section:
                section["seed"] = args.seed
    return cfg


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValidationError("--threads must be positive")
    import numba
    import torch

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    torch.set_num_threads(n)


def _print_rows(rows, columns):
    print(",".join(columns))
    for r in rows:
        print(",".join("" if r.get(c) is None else f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c])
                       for c in columns))


def _sweep(ws: pipeline.Workspace, args) -> int:
    from . import plotting

    if not (args.perturb or args.noise or args.shift):
        raise ValidationError("sweep needs at least one of --perturb, --noise, --shift")
    if args.seeds < 1:
        raise ValidationError("--seeds must be positive")
    ws.root.mkdir(parents=True, exist_ok=True)
    figs = ws.path("figures")
    if args.perturb:
        outputs = ["sweep_perturb_runs.csv", "sweep_perturb.csv"]
        params = {"levels": args.perturb, "seeds": args.seeds, "reconstruct": args.reconstruct,
                  "config": ws.config.to_dict()}
        cols = ["sigma2", "seed", "l_or", "l_or_exact", "e_or"] + (["resolution"] if args.reconstruct else [])

        def go():
            rows = pipeline.perturbation_sweep(ws.config, args.perturb, args.seeds, args.reconstruct)
            io.write_rows(ws.path(outputs[0]), rows, cols)
            summary = pipeline.summarize_levels(rows, "sigma2", "e_or")
            if args.reconstruct:
                res = pipeline.summarize_levels(rows, "sigma2", "resolution")
                for s, r in zip(summary, res):
                    s["median_resolution"] = r["median_resolution"]
            io.write_rows(ws.path(outputs[1]), summary, list(summary[0]))
            figs.mkdir(exist_ok=True)
            plotting.plot_sweep([s["sigma2"] for s in summary], [s["median_e_or"] for s in summary],
                                figs / "sweep_perturb.png", "distance noise variance", "E_OR (rad)",
                                per_seed=[[r["e_or"] for r in rows if r["sigma2"] == s["sigma2"]] for s in summary])
            return {"rows": summary}

        out = ws.run("sweep_perturb", {}, outputs, params, go)
        _print_rows(out.summary["rows"], ["sigma2", "median_e_or"] + (["median_resolution"] if args.reconstruct else []) + ["runs"])
    for kind, levels in (("noise", args.noise), ("shift", args.shift)):
        if not levels:
            continue
        name = f"sweep_{kind}"
        inputs = {"volume.raw": "phantom", "truth.csv": "project", "pairs_train.csv": "pairs",
                  "pairs_val.csv": "pairs", "pairs_test.csv": "pairs"}

        def go(kind=kind, levels=levels, name=name):
            rows = pipeline.invariance_sweep(ws, kind, levels)
            io.write_rows(ws.path(f"{name}.csv"), rows, INVARIANCE_COLUMNS)
            figs.mkdir(exist_ok=True)
            plotting.plot_sweep(levels, [r["median_val_lde"] for r in rows], figs / f"{name}.png",
                                "shift limit (px)" if kind == "shift" else "image noise variance",
                                "median validation L_DE over epochs")
            return {"rows": rows}

        out = ws.run(name, inputs, [f"{name}.csv"], {"kind": kind, "levels": levels, "config": ws.config.to_dict()}, go)
        _print_rows(out.summary["rows"], INVARIANCE_COLUMNS)
    return EXIT_OK


def _dispatch(args) -> int:
    root = Path(args.workspace or os.environ.get(WORKSPACE_ENV) or ".")
    cfg = _load_config(args, root)
    _set_threads(args.threads)
    ws = pipeline.Workspace(root, cfg, force=args.force)
    cmd = args.command
    if cmd == "report":
        report = pipeline.build_report(ws)
        root.mkdir(parents=True, exist_ok=True)
        io.write_json(ws.path("report.json"), report)
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    if cmd == "sweep":
        return _sweep(ws, args)
    if cmd == "train":
        def log(r):
            print(f"epoch {r.epoch}: train {r.train_lde:.4f} val {r.val_lde:.4f}", flush=True)
        outcome = pipeline.stage_train(ws, log)
    elif cmd == "reconstruct":
        outcome = pipeline.stage_reconstruct(ws, args.source)
    else:
        outcome = getattr(pipeline, f"stage_{cmd}")(ws)
    state = "done" if outcome.ran else "up to date (use --force to re-run)"
    print(f"{cmd}: {state}")
    for k, v in outcome.summary.items():
        print(f"  {k} = {v}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except DivergenceError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
