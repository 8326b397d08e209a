"""Command-line surface: convert, train, evaluate, sweep, report.

Every artifact-producing command writes exactly one ``manifest.json``
into its output directory recording the command, the fully resolved
configuration, the derived seeds, sha256 hashes of its inputs, the tool
version, and timestamps; the manifest alone suffices to re-run the
command (``afnet train --config <dir>/manifest.json``).

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
error.  Setting overrides follow flag > config file > default.  The
dataset root comes from ``AFNET_DATA_DIR`` (default ``./data``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .bench import (
    SweepPlan,
    load_run_reports,
    report as render_report,
    run_experiment,
    sweep_fraction,
    sweep_spatial,
)
from .convert import convert_cube, convert_ground_truth
from .errors import AfnetError, ConfigError
from .hsio import find_dataset, load_cube, load_ground_truth
from .metrics import evaluate, format_percent, render_map
from .net import MODEL_KINDS, load_checkpoint
from .prep import (
    BORDER_MODES,
    SplitAssignment,
    extract_patches,
    pca_reduce,
)
from .trainer import predict

_TRAIN_DEFAULTS = {
    "dataset": None,
    "data_dir": None,
    "model": "afnet",
    "patch_size": 9,
    "components": 15,
    "fractions": (0.15, 0.15, 0.70),
    "epochs": 100,
    "batch_size": 256,
    "lr": 0.001,
    "seed": 0,
    "border_mode": "mirror",
    "attention": "both",
    "best_validation": False,
    "out": "runs/train",
}


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths) -> dict[str, str]:
    return {str(p): _sha256(p) for p in paths if p and Path(p).is_file()}


def _data_dir(resolved: dict) -> str:
    return (
        resolved.get("data_dir")
        or os.environ.get("AFNET_DATA_DIR")
        or "data"
    )


def _parse_fractions(text: str) -> tuple[float, float, float]:
    parts = text.split("/")
    if len(parts) != 3:
        raise ConfigError(f"fractions must be a/b/c, got {text!r}")
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"fractions must be numeric, got {text!r}") from exc
    total = sum(values)
    if abs(total - 100.0) < 1e-6:
        values = [v / 100.0 for v in values]
    elif abs(total - 1.0) > 1e-9:
        raise ConfigError(
            f"fractions must sum to 1 (or 100%), got {text!r}"
        )
    return tuple(values)


def _load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    # A run manifest re-runs through its recorded config.
    if "command" in doc and "config" in doc:
        doc = doc["config"]
    return doc


def _resolve_train_settings(args) -> dict:
    resolved = dict(_TRAIN_DEFAULTS)
    if args.config:
        doc = _load_config_file(args.config)
        unknown = set(doc) - set(_TRAIN_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "fractions" in doc and isinstance(doc["fractions"], str):
            doc["fractions"] = _parse_fractions(doc["fractions"])
        resolved.update(doc)
    overrides = {
        "dataset": args.dataset,
        "model": args.model,
        "patch_size": args.patch_size,
        "components": args.components,
        "fractions": _parse_fractions(args.fractions) if args.fractions else None,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "border_mode": args.border_mode,
        "attention": args.attention,
        "best_validation": True if args.best_validation else None,
        "out": args.out,
        "data_dir": getattr(args, "data_dir", None),
    }
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    resolved["fractions"] = tuple(float(f) for f in resolved["fractions"])
    if resolved["dataset"] is None:
        raise ConfigError("no dataset given (flag --dataset or config file)")
    return resolved


def _write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    seeds: dict,
    input_paths,
    started: str,
) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "input_hashes": _hash_inputs(input_paths),
        "tool_version": __version__,
        "threads": _torch_threads(),
        "timestamps": {"started": started, "finished": _utc_now()},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def _torch_threads() -> int:
    import torch

    env = os.environ.get("AFNET_THREADS")
    if env:
        torch.set_num_threads(int(env))
    return torch.get_num_threads()


def _derived_seeds(root: int) -> dict:
    import numpy as np

    split, init, shuffle = (
        int(v) for v in np.random.SeedSequence([int(root)]).generate_state(3)
    )
    return {"root": int(root), "split": split, "init": init, "shuffle": shuffle}


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_convert(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = convert_cube(args.source, out, key=args.key)
    print(f"wrote {header} and {header.with_suffix('.hsib')}")
    if args.gt:
        gt_header = convert_ground_truth(
            args.gt, str(out) + "_gt", key=args.gt_key
        )
        print(f"wrote {gt_header} and {gt_header.with_suffix('.hsib')}")
    return 0


def cmd_train(args) -> int:
    started = _utc_now()
    resolved = _resolve_train_settings(args)
    data_dir = _data_dir(resolved)
    resolved["data_dir"] = data_dir
    cube_path, gt_path = find_dataset(resolved["dataset"], data_dir)
    cube = load_cube(cube_path)
    gt, legend = load_ground_truth(gt_path)
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _torch_threads()
    report, history, _ = run_experiment(
        cube,
        gt,
        model_kind=resolved["model"],
        patch_size=int(resolved["patch_size"]),
        components=int(resolved["components"]),
        fractions=resolved["fractions"],
        border_mode=resolved["border_mode"],
        attention=resolved["attention"],
        epochs=int(resolved["epochs"]),
        batch_size=int(resolved["batch_size"]),
        learning_rate=float(resolved["lr"]),
        seed=int(resolved["seed"]),
        best_validation=bool(resolved["best_validation"]),
        out_dir=out_dir,
        legend=legend,
        resume_from=args.resume,
    )
    inputs = [cube_path, cube_path.with_suffix(".hsib"), gt_path,
              gt_path.with_suffix(".hsib")]
    if args.config:
        inputs.append(args.config)
    _write_manifest(
        out_dir,
        "train",
        resolved,
        _derived_seeds(int(resolved["seed"])),
        inputs,
        started,
    )
    print(f"epochs completed: {history.epochs_completed}")
    print(f"train seconds:    {history.train_seconds:.2f}")
    print(f"OA (%):    {format_percent(report.oa)}")
    print(f"AA (%):    {format_percent(report.aa)}")
    print(f"Kappa (%): {format_percent(report.kappa)}")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    started = _utc_now()
    data_dir = args.data_dir or os.environ.get("AFNET_DATA_DIR") or "data"
    cube_path, gt_path = find_dataset(args.dataset, data_dir)
    cube = load_cube(cube_path)
    gt, legend = load_ground_truth(gt_path)
    _torch_threads()
    model, manifest, _ = load_checkpoint(args.checkpoint)
    config = model.config
    reduced = pca_reduce(cube, config.components)
    patches = extract_patches(reduced, gt, config.patch_size, args.border_mode)
    if args.split:
        split = SplitAssignment.load(args.split)
        eval_idx = split.test_idx
    else:
        import numpy as np

        eval_idx = np.arange(len(patches), dtype=np.int64)
    tr_seconds = (
        manifest.get("metrics", {}).get("history", {}).get("train_seconds", 0.0)
    )
    t0 = time.perf_counter()
    labels, _ = predict(model, patches, eval_idx, args.batch_size)
    te_seconds = time.perf_counter() - t0
    report = evaluate(
        labels,
        patches.labels[eval_idx],
        gt.class_count,
        timings=(float(tr_seconds), te_seconds),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    names = [e.name for e in legend.entries] if legend else None
    (out_dir / "report.txt").write_text(report.to_text(names), encoding="utf-8")
    all_labels, _ = predict(model, patches, None, args.batch_size)
    from .hsio import ClassLegend

    use_legend = legend or ClassLegend.default(gt.class_count)
    pred_img, gt_img = render_map(
        all_labels, patches.coords, use_legend, gt, args.scale
    )
    pred_img.save(out_dir / "map.png")
    gt_img.save(out_dir / "gt_map.png")
    ckpt = Path(args.checkpoint)
    ckpt_stem = ckpt if ckpt.suffix == "" else ckpt.with_suffix("")
    inputs = [
        cube_path, cube_path.with_suffix(".hsib"),
        gt_path, gt_path.with_suffix(".hsib"),
        ckpt_stem.with_suffix(".json"), ckpt_stem.with_suffix(".params"),
    ]
    if args.split:
        inputs.append(args.split)
    config_doc = {
        "checkpoint": str(args.checkpoint),
        "dataset": args.dataset,
        "data_dir": data_dir,
        "split": args.split,
        "border_mode": args.border_mode,
        "batch_size": args.batch_size,
        "scale": args.scale,
        "out": str(out_dir),
    }
    _write_manifest(
        out_dir, "evaluate", config_doc,
        {"root": manifest.get("seed")}, inputs, started,
    )
    print(report.to_text(names))
    print(f"artifacts in {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    started = _utc_now()
    plan = SweepPlan.load(args.plan)
    axis = args.axis or plan.axis
    if axis is None:
        if plan.sizes and not plan.fractions:
            axis = "spatial"
        elif plan.fractions and not plan.sizes:
            axis = "fraction"
        else:
            raise ConfigError(
                "plan is ambiguous: set 'axis' or pass --axis"
            )
    data_dir = args.data_dir or os.environ.get("AFNET_DATA_DIR") or "data"
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _torch_threads()
    runner = sweep_spatial if axis == "spatial" else sweep_fraction
    result = runner(plan, data_dir, out_dir=out_dir, jobs=args.jobs)
    text, doc = render_report(result)
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    (out_dir / "report.json").write_text(
        json.dumps(doc, indent=1), encoding="utf-8"
    )
    config_doc = {"plan": plan.to_dict(), "axis": axis, "jobs": args.jobs,
                  "data_dir": data_dir, "out": str(out_dir)}
    _write_manifest(
        out_dir, "sweep", config_doc,
        {"root": plan.base_seed}, [args.plan], started,
    )
    print(text, end="")
    if result.failure_count:
        print(
            f"{result.failure_count} cell(s) failed; see report for details",
            file=sys.stderr,
        )
        return 1
    return 0


def cmd_report(args) -> int:
    result = load_run_reports(args.results)
    text, doc = render_report(result)
    if args.json:
        print(json.dumps(doc, indent=1))
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring.
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afnet",
        description=(
            "Hyperspectral patch classification: attention-fused hybrid "
            "3D/2D model and inception baselines"
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="ingest .mat/.npy into the native pair")
    p.add_argument("source", help="cube source file (.mat or .npy)")
    p.add_argument("--out", required=True, help="output stem for .hsij/.hsib")
    p.add_argument("--key", default=None, help="array key inside a .mat file")
    p.add_argument("--gt", default=None, help="label raster source file")
    p.add_argument("--gt-key", default=None, help="array key for the labels")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train one model and evaluate its test split")
    p.add_argument("--config", default=None,
                   help="JSON settings file or a previous run's manifest.json")
    p.add_argument("--dataset", default=None, help="dataset name or alias")
    p.add_argument("--model", default=None, choices=MODEL_KINDS)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--fractions", default=None, metavar="A/B/C",
                   help="train/val/test fractions, e.g. 15/15/70")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--border-mode", default=None, choices=BORDER_MODES)
    p.add_argument("--attention", default=None,
                   choices=("channel", "spatial", "both", "none"))
    p.add_argument("--best-validation", action="store_true", default=False,
                   help="keep the best-validation-accuracy parameters")
    p.add_argument("--resume", default=None,
                   help="checkpoint stem to continue training from")
    p.add_argument("--out", default=None, help="artifact directory")
    p.add_argument("--data-dir", default=None,
                   help="dataset root (default: AFNET_DATA_DIR or ./data)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint and render maps")
    p.add_argument("--checkpoint", required=True, help="checkpoint stem or .json")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default=None,
                   help="split.json (uses its test indices); default all patches")
    p.add_argument("--border-mode", default="mirror", choices=BORDER_MODES)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--scale", type=int, default=1, help="map upscale factor")
    p.add_argument("--out", default="runs/evaluate")
    p.add_argument("--data-dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a spatial or fraction sweep plan")
    p.add_argument("plan", help="sweep plan JSON file")
    p.add_argument("--axis", default=None, choices=("spatial", "fraction"))
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes")
    p.add_argument("--out", default="results")
    p.add_argument("--data-dir", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-render tables from a results tree")
    p.add_argument("results", help="results directory of a previous sweep")
    p.add_argument("--json", action="store_true", help="print JSON instead")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AfnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # unexpected runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
