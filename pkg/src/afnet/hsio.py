"""Hyperspectral cube / ground-truth I/O in a portable native container.

The native container is a pair of files sharing a stem:

* ``<name>.hsij`` -- UTF-8 JSON header with keys ``height``, ``width``,
  ``bands``, ``dtype`` ("f32" | "f64"), ``order`` ("bip") and an optional
  ``legend`` array of ``{id, name, rgb}`` entries.  Extra optional keys
  (``wavelengths``, ``removed_bands``, ``name``) are preserved.
* ``<name>.hsib`` -- raw little-endian payload, band-interleaved-by-pixel
  (row-major pixels, bands fastest), exactly height*width*bands values.

Ground-truth rasters reuse the same container with ``bands == 1`` and
integer-valued payloads; the class legend rides in their header.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ExtentMismatchError, NonFiniteDataError

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}

# Community short names for the benchmark scenes.
DATASET_ALIASES = {
    "ip": "indian_pines",
    "pu": "pavia_university",
    "sa": "salinas",
    "bs": "botswana",
}


def _check_finite(data: np.ndarray) -> None:
    finite = np.isfinite(data)
    if not finite.all():
        bad = ~finite
        count = int(bad.sum())
        first = np.unravel_index(int(np.argmax(bad)), data.shape)
        raise NonFiniteDataError(count, tuple(int(i) for i in first))


@dataclass(frozen=True)
class HyperspectralCube:
    """An (height, width, bands) reflectance array, immutable after load."""

    data: np.ndarray
    band_wavelengths: tuple[float, ...] | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DataError(f"cube must have 3 axes, got {data.ndim}")
        if min(data.shape) < 1:
            raise DataError(f"cube axes must be >= 1, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        _check_finite(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if self.band_wavelengths is not None:
            wl = tuple(float(w) for w in self.band_wavelengths)
            if len(wl) != data.shape[2]:
                raise DataError(
                    f"{len(wl)} wavelengths for {data.shape[2]} bands"
                )
            object.__setattr__(self, "band_wavelengths", wl)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class GroundTruthMap:
    """Integer label raster; 0 marks unlabeled pixels, classes are 1..C."""

    labels: np.ndarray
    class_count: int = -1  # inferred from max label when negative

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DataError(f"label raster must have 2 axes, got {labels.ndim}")
        if not np.issubdtype(labels.dtype, np.integer):
            as_int = labels.astype(np.int64)
            if not np.array_equal(as_int, labels):
                raise DataError("labels must be integer-valued")
            labels = as_int
        else:
            labels = labels.astype(np.int64)
        if labels.min(initial=0) < 0:
            bad = int(np.argmax(labels.ravel() < 0))
            raise DataError(
                f"negative label at flat index {bad}: {labels.ravel()[bad]}"
            )
        inferred = int(labels.max(initial=0))
        count = inferred if self.class_count < 0 else int(self.class_count)
        if inferred > count:
            raise DataError(f"max label {inferred} exceeds class_count {count}")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_count", count)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def labeled_count(self) -> int:
        return int(np.count_nonzero(self.labels))


@dataclass(frozen=True)
class LegendEntry:
    label: int
    name: str
    rgb: tuple[int, int, int]


@dataclass(frozen=True)
class ClassLegend:
    """Ordered class ids 1..C with display names and unique RGB colors."""

    entries: tuple[LegendEntry, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = [e.label for e in entries]
        if ids != list(range(1, len(entries) + 1)):
            raise DataError(f"legend ids must be contiguous 1..C, got {ids}")
        colors = [e.rgb for e in entries]
        if len(set(colors)) != len(colors):
            raise DataError("legend colors must be unique")
        for c in colors:
            if len(c) != 3 or any(not 0 <= v <= 255 for v in c):
                raise DataError(f"invalid RGB triple {c}")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def color_for(self, label: int) -> tuple[int, int, int]:
        return self.entries[label - 1].rgb

    @staticmethod
    def default(class_count: int) -> "ClassLegend":
        """Deterministic distinct palette (golden-angle hue walk)."""
        import colorsys

        entries = []
        for i in range(class_count):
            h = (i * 0.6180339887498949) % 1.0
            v = 0.95 if i % 2 == 0 else 0.70
            r, g, b = colorsys.hsv_to_rgb(h, 0.85, v)
            rgb = (int(r * 255), int(g * 255), int(b * 255))
            entries.append(LegendEntry(i + 1, f"class_{i + 1}", rgb))
        return ClassLegend(tuple(entries))


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    height: int
    width: int
    bands: int
    class_count: int
    labeled_sample_count: int
    sensor_note: str = ""


def _header_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    if p.suffix == ".hsib":
        return p.with_suffix(".hsij")
    if p.suffix == ".hsij":
        return p
    return p.with_name(p.name + ".hsij")


def _read_container(path: str | os.PathLike) -> tuple[dict, np.ndarray]:
    header_path = _header_path(path)
    payload_path = header_path.with_suffix(".hsib")
    if not header_path.exists():
        raise FileNotFoundError(f"missing header file {header_path}")
    if not payload_path.exists():
        raise FileNotFoundError(f"missing payload file {payload_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed header {header_path}: {exc}") from exc
    for key in ("height", "width", "bands", "dtype", "order"):
        if key not in header:
            raise DataError(f"header {header_path} missing key '{key}'")
    if header["order"] != "bip":
        raise DataError(f"unsupported payload order {header['order']!r}")
    if header["dtype"] not in _DTYPES:
        raise DataError(f"unsupported dtype {header['dtype']!r}")
    h, w, b = int(header["height"]), int(header["width"]), int(header["bands"])
    if min(h, w, b) < 1:
        raise DataError(f"header dims must be >= 1, got {(h, w, b)}")
    dtype = _DTYPES[header["dtype"]]
    raw = np.fromfile(payload_path, dtype=dtype)
    if raw.size != h * w * b:
        raise DataError(
            f"payload holds {raw.size} values, header implies {h * w * b} "
            f"({h}x{w}x{b})"
        )
    return header, raw.reshape(h, w, b)


def _write_container(
    stem: str | os.PathLike, data: np.ndarray, extra: dict | None = None
) -> tuple[Path, Path]:
    header_path = _header_path(stem)
    payload_path = header_path.with_suffix(".hsib")
    dtype_name = "f32" if data.dtype == np.float32 else "f64"
    header = {
        "height": int(data.shape[0]),
        "width": int(data.shape[1]),
        "bands": int(data.shape[2]),
        "dtype": dtype_name,
        "order": "bip",
    }
    if extra:
        header.update(extra)
    header_path.write_text(json.dumps(header, indent=1), encoding="utf-8")
    np.ascontiguousarray(data.astype(_DTYPES[dtype_name])).tofile(payload_path)
    return header_path, payload_path


def legend_to_json(legend: ClassLegend) -> list[dict]:
    return [
        {"id": e.label, "name": e.name, "rgb": list(e.rgb)}
        for e in legend.entries
    ]


def legend_from_json(items: list[dict]) -> ClassLegend:
    return ClassLegend(
        tuple(
            LegendEntry(int(d["id"]), str(d["name"]), tuple(int(v) for v in d["rgb"]))
            for d in items
        )
    )


def save_cube(cube: HyperspectralCube, stem: str | os.PathLike) -> Path:
    extra: dict = {}
    if cube.band_wavelengths is not None:
        extra["wavelengths"] = list(cube.band_wavelengths)
    header_path, _ = _write_container(stem, cube.data, extra)
    return header_path


def load_cube(
    path: str | os.PathLike, expect: DatasetDescriptor | None = None
) -> HyperspectralCube:
    """Load a cube, validating finiteness and (optionally) expected dims."""
    header, data = _read_container(path)
    wavelengths = header.get("wavelengths")
    cube = HyperspectralCube(
        data, tuple(wavelengths) if wavelengths else None
    )
    if expect is not None:
        got = (cube.height, cube.width, cube.bands)
        want = (expect.height, expect.width, expect.bands)
        if got != want:
            raise DataError(f"cube dims {got} do not match descriptor {want}")
    return cube


def save_ground_truth(
    gt: GroundTruthMap, stem: str | os.PathLike, legend: ClassLegend | None = None
) -> Path:
    extra: dict = {}
    if legend is not None:
        extra["legend"] = legend_to_json(legend)
    data = gt.labels.astype(np.float32)[:, :, None]
    header_path, _ = _write_container(stem, data, extra)
    return header_path


def load_ground_truth(
    path: str | os.PathLike,
) -> tuple[GroundTruthMap, ClassLegend | None]:
    """Load a label raster; class count is inferred as the maximum label."""
    header, data = _read_container(path)
    if data.shape[2] != 1:
        raise DataError(
            f"ground-truth container must have bands == 1, got {data.shape[2]}"
        )
    _check_finite(data)
    plane = data[:, :, 0]
    rounded = np.rint(plane)
    if not np.array_equal(rounded, plane):
        bad = int(np.argmax((rounded != plane).ravel()))
        raise DataError(f"non-integer label at flat index {bad}")
    gt = GroundTruthMap(rounded.astype(np.int64))
    legend = None
    if "legend" in header and header["legend"]:
        legend = legend_from_json(header["legend"])
    return gt, legend


def validate_pair(
    cube: HyperspectralCube,
    gt: GroundTruthMap,
    name: str = "",
    sensor_note: str = "",
) -> DatasetDescriptor:
    """Check that cube and labels share an extent; summarize the pair."""
    a = (cube.height, cube.width)
    b = (gt.height, gt.width)
    if a != b:
        raise ExtentMismatchError(a, b)
    return DatasetDescriptor(
        name=name,
        height=cube.height,
        width=cube.width,
        bands=cube.bands,
        class_count=gt.class_count,
        labeled_sample_count=gt.labeled_count(),
        sensor_note=sensor_note,
    )


def find_dataset(name: str, data_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Resolve a dataset name to (cube header, ground-truth header) paths.

    Looks for ``<name>.hsij`` and ``<name>_gt.hsij`` under ``data_dir``;
    short aliases (ip, pu, sa, bs) map to the full scene names.
    """
    base = Path(data_dir)
    key = DATASET_ALIASES.get(name.lower(), name)
    cube_path = base / f"{key}.hsij"
    gt_path = base / f"{key}_gt.hsij"
    if not cube_path.exists() or not gt_path.exists():
        raise FileNotFoundError(
            f"dataset '{name}' not found under {base} "
            f"(expected {cube_path.name} and {gt_path.name})"
        )
    return cube_path, gt_path
