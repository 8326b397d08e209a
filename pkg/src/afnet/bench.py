"""Sweep orchestration: spatial-size and training-fraction ablations.

A sweep cell is one (dataset, axis value, repeat) triple; every cell is
a full train + evaluate run whose root seed derives deterministically
from (base seed, cell index, repeat), so cells reproduce bit-identically
regardless of scheduling.  Failures are recorded per cell and the sweep
continues.  Artifacts land under
``results/<dataset>/<model>/<axis>=<value>/run<k>/``.
"""

from __future__ import annotations

import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .hsio import ClassLegend, find_dataset, load_cube, load_ground_truth
from .metrics import (
    EvaluationReport,
    evaluate,
    format_percent,
    render_map,
)
from .net import MODEL_KINDS, build_model, default_config
from .prep import extract_patches, pca_reduce, stratified_split
from .trainer import TrainConfig, predict, train

SPATIAL_SIZES = (9, 11, 13, 15)
FRACTION_LEVELS = (5, 7, 10, 12, 15)
AXES = ("spatial", "fraction")


@dataclass(frozen=True)
class SweepPlan:
    """Which cells to run, plus the hyperparameters shared by all cells."""

    datasets: tuple[str, ...]
    model: str = "afnet"
    sizes: tuple[int, ...] = ()
    fractions: tuple[int, ...] = ()
    repeats: int = 3
    base_seed: int = 0
    components: int = 15
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 0.001
    attention: str = "both"
    border_mode: str = "mirror"
    axis: str | None = None

    def __post_init__(self):
        datasets = tuple(str(d) for d in self.datasets)
        if not datasets:
            raise ConfigError("plan needs at least one dataset")
        object.__setattr__(self, "datasets", datasets)
        if self.model not in MODEL_KINDS:
            raise ConfigError(
                f"model must be one of {MODEL_KINDS}, got {self.model!r}"
            )
        sizes = tuple(int(s) for s in self.sizes)
        for s in sizes:
            if s not in SPATIAL_SIZES:
                raise ConfigError(
                    f"spatial sizes must be within {SPATIAL_SIZES}, got {s}"
                )
        fractions = tuple(int(f) for f in self.fractions)
        for f in fractions:
            if f not in FRACTION_LEVELS:
                raise ConfigError(
                    f"fractions must be within {FRACTION_LEVELS}, got {f}"
                )
            if f >= 34:
                raise ConfigError(
                    f"fraction {f}% leaves no room for a test split"
                )
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "fractions", fractions)
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.axis is not None and self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}, got {self.axis!r}")

    def to_dict(self) -> dict:
        return {
            "datasets": list(self.datasets),
            "model": self.model,
            "sizes": list(self.sizes),
            "fractions": list(self.fractions),
            "repeats": self.repeats,
            "base_seed": self.base_seed,
            "components": self.components,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "attention": self.attention,
            "border_mode": self.border_mode,
            "axis": self.axis,
        }

    @staticmethod
    def from_dict(doc: dict) -> "SweepPlan":
        known = {
            "datasets", "model", "sizes", "fractions", "repeats",
            "base_seed", "components", "epochs", "batch_size",
            "learning_rate", "attention", "border_mode", "axis",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown plan keys {sorted(unknown)}")
        if "datasets" not in doc:
            raise ConfigError("plan is missing 'datasets'")
        kwargs = dict(doc)
        kwargs["datasets"] = tuple(doc["datasets"])
        kwargs["sizes"] = tuple(doc.get("sizes", ()))
        kwargs["fractions"] = tuple(doc.get("fractions", ()))
        return SweepPlan(**kwargs)

    @staticmethod
    def load(path) -> "SweepPlan":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed plan {path}: {exc}") from exc
        return SweepPlan.from_dict(doc)


@dataclass
class CellResult:
    dataset: str
    value: int
    repeat: int
    seed: int
    run_dir: str | None = None
    report: EvaluationReport | None = None
    error: str | None = None


@dataclass
class SweepResult:
    plan: SweepPlan
    axis: str
    cells: list[CellResult] = field(default_factory=list)

    @property
    def failure_count(self) -> int:
        return sum(1 for c in self.cells if c.error is not None)

    def values(self) -> tuple[int, ...]:
        return self.plan.sizes if self.axis == "spatial" else self.plan.fractions

    def group(self, dataset: str, value: int) -> list[CellResult]:
        return [
            c for c in self.cells if c.dataset == dataset and c.value == value
        ]


def derive_cell_seed(base_seed: int, cell_index: int, repeat: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), int(cell_index), int(repeat)])
    return int(ss.generate_state(1)[0])


def run_experiment(
    cube,
    gt,
    *,
    model_kind: str = "afnet",
    patch_size: int = 9,
    components: int = 15,
    fractions: tuple[float, float, float] = (0.15, 0.15, 0.70),
    border_mode: str = "mirror",
    attention: str = "both",
    block_topology: str = "parallel",
    epochs: int = 100,
    batch_size: int = 256,
    learning_rate: float = 0.001,
    seed: int = 0,
    best_validation: bool = False,
    out_dir=None,
    legend: ClassLegend | None = None,
    render_scale: int = 1,
    resume_from=None,
):
    """One end-to-end run: PCA, patches, split, train, evaluate, render.

    The root ``seed`` fans out into the split, init, and shuffle seeds
    through a SeedSequence, so the whole run is a pure function of its
    arguments.  Returns (EvaluationReport, TrainingHistory, artifacts).
    """
    ss = np.random.SeedSequence([int(seed)])
    split_seed, init_seed, shuffle_seed = (int(v) for v in ss.generate_state(3))
    reduced = pca_reduce(cube, components)
    patches = extract_patches(reduced, gt, patch_size, border_mode)
    split = stratified_split(patches, fractions, split_seed)
    config = default_config(
        patch_size=patch_size,
        components=components,
        class_count=gt.class_count,
        attention=attention,
        block_topology=block_topology,
    )
    model = build_model(model_kind, config, init_seed)
    tcfg = TrainConfig(
        learning_rate=learning_rate,
        batch_size=batch_size,
        epochs=epochs,
        seed=shuffle_seed,
        best_validation=best_validation,
    )
    artifacts: dict[str, str] = {}
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        split.save(out / "split.json")
        artifacts["split"] = str(out / "split.json")
    checkpoint_to = out / "checkpoint" if out is not None else None
    model, history = train(
        model, patches, split, tcfg,
        resume_from=resume_from, checkpoint_to=checkpoint_to,
    )
    started = time.perf_counter()
    test_labels, _ = predict(model, patches, split.test_idx, batch_size)
    te_seconds = time.perf_counter() - started
    history.test_seconds = te_seconds
    report = evaluate(
        test_labels,
        patches.labels[split.test_idx],
        gt.class_count,
        timings=(history.train_seconds, te_seconds),
    )
    if out is not None:
        history.save(out / "history.json")
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        names = [e.name for e in legend.entries] if legend else None
        (out / "report.txt").write_text(
            report.to_text(names), encoding="utf-8"
        )
        use_legend = legend or ClassLegend.default(gt.class_count)
        all_labels, _ = predict(model, patches, None, batch_size)
        pred_img, gt_img = render_map(
            all_labels, patches.coords, use_legend, gt, render_scale
        )
        pred_img.save(out / "map.png")
        gt_img.save(out / "gt_map.png")
        artifacts.update(
            checkpoint=str(out / "checkpoint.json"),
            history=str(out / "history.json"),
            report_json=str(out / "report.json"),
            report_text=str(out / "report.txt"),
            map=str(out / "map.png"),
            gt_map=str(out / "gt_map.png"),
        )
    return report, history, artifacts


def _run_cell(task: dict) -> dict:
    """Worker entry: load the dataset, run one cell, serialize the result."""
    try:
        cube = load_cube(task["cube_path"])
        gt, legend = load_ground_truth(task["gt_path"])
        report, history, _ = run_experiment(
            cube,
            gt,
            model_kind=task["model"],
            patch_size=task["patch_size"],
            components=task["components"],
            fractions=tuple(task["fractions"]),
            border_mode=task["border_mode"],
            attention=task["attention"],
            epochs=task["epochs"],
            batch_size=task["batch_size"],
            learning_rate=task["learning_rate"],
            seed=task["seed"],
            out_dir=task["run_dir"],
            legend=legend,
        )
        return {"task": task, "report": report.to_dict(), "error": None}
    except Exception as exc:  # cell failures must not kill the sweep
        return {
            "task": task,
            "report": None,
            "error": f"{type(exc).__name__}: {exc}",
            "trace": traceback.format_exc(),
        }


def _report_from_dict(doc: dict) -> EvaluationReport:
    from .metrics import ConfusionMatrix

    return EvaluationReport(
        oa=float(doc["oa"]),
        aa=float(doc["aa"]),
        kappa=float(doc["kappa"]),
        per_class=tuple(
            float("nan") if v is None else float(v) for v in doc["per_class"]
        ),
        confusion=ConfusionMatrix(np.asarray(doc["confusion"])),
        tr_seconds=float(doc["tr_seconds"]),
        te_seconds=float(doc["te_seconds"]),
    )


def _run_sweep(
    plan: SweepPlan,
    axis: str,
    data_dir,
    out_dir=None,
    jobs: int = 1,
) -> SweepResult:
    values = plan.sizes if axis == "spatial" else plan.fractions
    if not values:
        raise ConfigError(f"plan has no values on the {axis} axis")
    tasks = []
    cell_index = 0
    for dataset in plan.datasets:
        cube_path, gt_path = find_dataset(dataset, data_dir)
        for value in values:
            if axis == "spatial":
                patch_size = value
                f = 15
            else:
                patch_size = 9
                f = value
            fractions = (f / 100.0, f / 100.0, (100 - 2 * f) / 100.0)
            for repeat in range(plan.repeats):
                run_dir = None
                if out_dir is not None:
                    run_dir = str(
                        Path(out_dir)
                        / dataset
                        / plan.model
                        / f"{axis}={value}"
                        / f"run{repeat}"
                    )
                tasks.append(
                    {
                        "dataset": dataset,
                        "cube_path": str(cube_path),
                        "gt_path": str(gt_path),
                        "model": plan.model,
                        "value": int(value),
                        "repeat": repeat,
                        "seed": derive_cell_seed(
                            plan.base_seed, cell_index, repeat
                        ),
                        "patch_size": patch_size,
                        "components": plan.components,
                        "fractions": fractions,
                        "border_mode": plan.border_mode,
                        "attention": plan.attention,
                        "epochs": plan.epochs,
                        "batch_size": plan.batch_size,
                        "learning_rate": plan.learning_rate,
                        "run_dir": run_dir,
                    }
                )
            cell_index += 1
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell, tasks))
    else:
        outcomes = [_run_cell(t) for t in tasks]
    result = SweepResult(plan=plan, axis=axis)
    for outcome in outcomes:
        task = outcome["task"]
        cell = CellResult(
            dataset=task["dataset"],
            value=task["value"],
            repeat=task["repeat"],
            seed=task["seed"],
            run_dir=task["run_dir"],
            error=outcome["error"],
        )
        if outcome["report"] is not None:
            cell.report = _report_from_dict(outcome["report"])
        result.cells.append(cell)
    return result


def sweep_spatial(plan: SweepPlan, data_dir, out_dir=None, jobs: int = 1) -> SweepResult:
    """Train+evaluate at each spatial size with the fixed 15/15/70 split."""
    return _run_sweep(plan, "spatial", data_dir, out_dir, jobs)


def sweep_fraction(plan: SweepPlan, data_dir, out_dir=None, jobs: int = 1) -> SweepResult:
    """Train+evaluate at each training fraction with fixed 9x9 patches."""
    return _run_sweep(plan, "fraction", data_dir, out_dir, jobs)


# ---------------------------------------------------------------------------
# Reporting.
# ---------------------------------------------------------------------------

_METRIC_ROWS = (
    ("kappa", "Kappa (%)"),
    ("oa", "OA (%)"),
    ("aa", "AA (%)"),
    ("tr_seconds", "Tr Time (s)"),
    ("te_seconds", "Te Time (s)"),
)


def _format_seconds(value: float) -> str:
    from decimal import ROUND_HALF_EVEN, Decimal

    return str(
        Decimal(repr(float(value))).quantize(
            Decimal("0.01"), rounding=ROUND_HALF_EVEN
        )
    )


def _cell_stats(reports: list[EvaluationReport]) -> dict:
    stats: dict[str, dict] = {}
    for key, _ in _METRIC_ROWS:
        values = [getattr(r, key) for r in reports]
        if values:
            mean = float(np.mean(values))
            std = float(np.std(values))
            if key in ("kappa", "oa", "aa"):
                display = format_percent(mean)
            else:
                display = _format_seconds(mean)
        else:
            mean, std, display = float("nan"), float("nan"), "FAILED"
        stats[key] = {
            "mean": mean,
            "std": std,
            "values": [float(v) for v in values],
            "display": display,
        }
    return stats


def report(result: SweepResult, layout: str | None = None) -> tuple[str, dict]:
    """Render Table-style text plus a JSON document with the same numbers.

    Rows are Kappa/OA/AA/TrTime/TeTime per dataset; columns follow the
    swept axis.  Display cells average the repeats; the JSON carries the
    same display strings alongside full-precision means, stds, and raw
    per-repeat values.
    """
    axis = layout or result.axis
    if axis not in AXES:
        raise ConfigError(f"layout must be one of {AXES}, got {axis!r}")
    values = result.values()
    label = (lambda v: f"{v}x{v}") if axis == "spatial" else (lambda v: f"{v}%")
    doc: dict = {
        "axis": axis,
        "model": result.plan.model,
        "repeats": result.plan.repeats,
        "base_seed": result.plan.base_seed,
        "failures": result.failure_count,
        "tables": {},
    }
    lines: list[str] = []
    width = 12
    for dataset in result.plan.datasets:
        table: dict = {"columns": [label(v) for v in values], "rows": {}}
        errors: list[str] = []
        per_value_stats = []
        for v in values:
            cells = result.group(dataset, v)
            reports = [c.report for c in cells if c.report is not None]
            errors.extend(
                f"{label(v)} run{c.repeat}: {c.error}"
                for c in cells
                if c.error is not None
            )
            per_value_stats.append(_cell_stats(reports))
        for key, _ in _METRIC_ROWS:
            table["rows"][key] = [s[key]["display"] for s in per_value_stats]
        table["stats"] = {
            label(v): per_value_stats[i] for i, v in enumerate(values)
        }
        if errors:
            table["errors"] = errors
        doc["tables"][dataset] = table
        lines.append(f"{dataset} ({result.plan.model}, {axis} sweep, "
                     f"{result.plan.repeats} repeat(s))")
        header = f"{'':<{width}}" + "".join(
            f"{label(v):>{width}}" for v in values
        )
        lines.append(header)
        for key, name in _METRIC_ROWS:
            row = f"{name:<{width}}" + "".join(
                f"{s[key]['display']:>{width}}" for s in per_value_stats
            )
            lines.append(row)
        for err in errors:
            lines.append(f"  FAILED {err}")
        lines.append("")
    return "\n".join(lines) + "\n" if lines else "", doc


def load_run_reports(results_dir) -> SweepResult:
    """Rebuild a SweepResult from a results directory written by a sweep.

    Walks ``<dataset>/<model>/<axis>=<value>/run<k>/report.json``; the
    walk is read-only.
    """
    base = Path(results_dir)
    if not base.is_dir():
        raise ConfigError(f"no results directory at {base}")
    found = sorted(base.glob("*/*/*=*/run*/report.json"))
    if not found:
        raise ConfigError(f"no results found under {base}")
    cells = []
    datasets: list[str] = []
    models: list[str] = []
    axes: list[str] = []
    values: list[int] = []
    for path in found:
        run_dir = path.parent
        axis_part = run_dir.parent.name
        axis, _, raw_value = axis_part.partition("=")
        model = run_dir.parent.parent.name
        dataset = run_dir.parent.parent.parent.name
        repeat = int(run_dir.name.removeprefix("run"))
        doc = json.loads(path.read_text(encoding="utf-8"))
        cells.append(
            CellResult(
                dataset=dataset,
                value=int(raw_value),
                repeat=repeat,
                seed=-1,
                run_dir=str(run_dir),
                report=_report_from_dict(doc),
            )
        )
        if dataset not in datasets:
            datasets.append(dataset)
        if model not in models:
            models.append(model)
        if axis not in axes:
            axes.append(axis)
        if int(raw_value) not in values:
            values.append(int(raw_value))
    if len(axes) != 1:
        raise ConfigError(f"results mix sweep axes {sorted(axes)}")
    if len(models) != 1:
        raise ConfigError(f"results mix models {sorted(models)}")
    axis = axes[0]
    repeats = max(c.repeat for c in cells) + 1
    plan = SweepPlan(
        datasets=tuple(datasets),
        model=models[0],
        sizes=tuple(sorted(values)) if axis == "spatial" else (),
        fractions=tuple(sorted(values)) if axis == "fraction" else (),
        repeats=repeats,
        axis=axis,
    )
    return SweepResult(plan=plan, axis=axis, cells=cells)
