"""Confusion-matrix metrics (OA, AA, kappa) and classification-map rendering.

Definitions used everywhere: OA = trace/n; AA = mean per-class recall
over classes that actually occur in the truth; kappa = (Po - Pe)/(1 - Pe)
with Pe the product of row and column marginals over n^2.  Percentages
are formatted half-even to 2 decimals.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from .errors import DataError
from .hsio import ClassLegend, GroundTruthMap


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C counts; entry (i, j) = samples of true class i+1 predicted j+1."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer):
            as_int = counts.astype(np.int64)
            if not np.array_equal(as_int, counts):
                raise DataError("confusion counts must be integers")
            counts = as_int
        else:
            counts = counts.astype(np.int64)
        if counts.min(initial=0) < 0:
            raise DataError("confusion counts must be non-negative")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def confusion(
    predicted: np.ndarray, truth: np.ndarray, class_count: int
) -> ConfusionMatrix:
    """Tally label pairs into a matrix; labels must lie in [1, C]."""
    pred = np.asarray(predicted, dtype=np.int64).ravel()
    true = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise DataError(
            f"{pred.size} predictions against {true.size} truth labels"
        )
    for name, arr in (("predicted", pred), ("truth", true)):
        if arr.size and (arr.min() < 1 or arr.max() > class_count):
            bad = arr[(arr < 1) | (arr > class_count)][0]
            raise DataError(
                f"{name} label {bad} outside [1, {class_count}]"
            )
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(counts, (true - 1, pred - 1), 1)
    return ConfusionMatrix(counts)


def overall_accuracy(m: ConfusionMatrix) -> float:
    n = m.n
    if n == 0:
        raise DataError("empty confusion matrix has no accuracy")
    return float(np.trace(m.counts)) / n


def per_class_recall(m: ConfusionMatrix) -> np.ndarray:
    """Recall per class; NaN where the class never occurs in the truth."""
    row_sums = m.counts.sum(axis=1)
    diag = np.diag(m.counts).astype(np.float64)
    out = np.full(m.class_count, np.nan)
    present = row_sums > 0
    out[present] = diag[present] / row_sums[present]
    return out


def average_accuracy(m: ConfusionMatrix) -> float:
    recalls = per_class_recall(m)
    present = ~np.isnan(recalls)
    if not present.any():
        raise DataError("empty confusion matrix has no accuracy")
    return float(recalls[present].mean())


def kappa(m: ConfusionMatrix) -> float:
    """Chance-corrected agreement; the degenerate Pe = 1 case maps to 0."""
    n = m.n
    if n == 0:
        raise DataError("empty confusion matrix has no kappa")
    # Integer-space form of (Po - Pe)/(1 - Pe): one correctly rounded
    # division, so exact hand cases stay exact (e.g. [[2,1],[1,2]] -> 1/3).
    rc = int(m.counts.sum(axis=1) @ m.counts.sum(axis=0))
    if rc == n * n:
        warnings.warn(
            "every sample shares one true and one predicted class; "
            "kappa is undefined and reported as 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return (n * int(m.counts.trace()) - rc) / (n * n - rc)


def format_percent(fraction: float) -> str:
    """fraction -> percentage string with 2 decimals, ties to even."""
    return str(
        Decimal(repr(float(fraction) * 100.0)).quantize(
            Decimal("0.01"), rounding=ROUND_HALF_EVEN
        )
    )


@dataclass(frozen=True)
class EvaluationReport:
    """OA/AA/kappa as fractions plus per-class recalls and timings."""

    oa: float
    aa: float
    kappa: float
    per_class: tuple
    confusion: ConfusionMatrix
    tr_seconds: float = 0.0
    te_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "per_class": [
                None if v is None or np.isnan(v) else float(v)
                for v in self.per_class
            ],
            "confusion": self.confusion.counts.tolist(),
            "tr_seconds": self.tr_seconds,
            "te_seconds": self.te_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self, class_names: list[str] | None = None) -> str:
        """Metric table (percentages, 2 decimals), then per-class recalls."""
        lines = [
            "definitions: OA = correct/total; AA = mean per-class recall "
            "over classes present; kappa = (Po - Pe)/(1 - Pe)",
            "",
            f"{'Kappa (%)':<12} {format_percent(self.kappa):>8}",
            f"{'OA (%)':<12} {format_percent(self.oa):>8}",
            f"{'AA (%)':<12} {format_percent(self.aa):>8}",
            f"{'Tr Time (s)':<12} {self.tr_seconds:>8.2f}",
            f"{'Te Time (s)':<12} {self.te_seconds:>8.2f}",
            "",
        ]
        for i, r in enumerate(self.per_class):
            name = (
                class_names[i]
                if class_names and i < len(class_names)
                else f"class_{i + 1}"
            )
            shown = "absent" if r is None or np.isnan(r) else format_percent(r)
            lines.append(f"{name:<24} {shown:>8}")
        return "\n".join(lines) + "\n"


def evaluate(
    predicted: np.ndarray,
    truth: np.ndarray,
    class_count: int,
    timings: tuple[float, float] = (0.0, 0.0),
) -> EvaluationReport:
    m = confusion(predicted, truth, class_count)
    recalls = per_class_recall(m)
    return EvaluationReport(
        oa=overall_accuracy(m),
        aa=average_accuracy(m),
        kappa=kappa(m),
        per_class=tuple(float(r) for r in recalls),
        confusion=m,
        tr_seconds=float(timings[0]),
        te_seconds=float(timings[1]),
    )


# ---------------------------------------------------------------------------
# Map rendering.
# ---------------------------------------------------------------------------

def _to_image(rgb: np.ndarray, scale: int):
    from PIL import Image

    img = Image.fromarray(rgb, mode="RGB")
    if scale != 1:
        img = img.resize(
            (rgb.shape[1] * scale, rgb.shape[0] * scale), Image.NEAREST
        )
    return img


def render_ground_truth(gt: GroundTruthMap, legend: ClassLegend, scale: int = 1):
    """Label raster as an RGB image: legend colors, black where unlabeled."""
    if len(legend) < gt.class_count:
        raise DataError(
            f"legend covers {len(legend)} classes, map needs {gt.class_count}"
        )
    palette = np.zeros((len(legend) + 1, 3), dtype=np.uint8)
    for e in legend.entries:
        palette[e.label] = e.rgb
    return _to_image(palette[gt.labels], scale)


def render_map(
    predictions: np.ndarray,
    coords: np.ndarray,
    legend: ClassLegend,
    gt: GroundTruthMap,
    scale: int = 1,
):
    """Predicted-class image plus the matching ground-truth rendering.

    Every (row, col) in ``coords`` takes its predicted class's legend
    color; everything else stays black.  Returns (prediction image,
    ground-truth image), both PNG-ready PIL images at the same scale.
    """
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    xy = np.asarray(coords, dtype=np.int64)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise DataError(f"coords must be (n, 2), got {xy.shape}")
    if pred.size != xy.shape[0]:
        raise DataError(
            f"{pred.size} predictions for {xy.shape[0]} coordinates"
        )
    if pred.size and (pred.min() < 1 or pred.max() > len(legend)):
        raise DataError(
            f"prediction outside legend range [1, {len(legend)}]"
        )
    rgb = np.zeros((gt.height, gt.width, 3), dtype=np.uint8)
    for e in legend.entries:
        hit = pred == e.label
        rgb[xy[hit, 0], xy[hit, 1]] = e.rgb
    return _to_image(rgb, scale), render_ground_truth(gt, legend, scale)
