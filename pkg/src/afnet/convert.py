"""Ingest third-party cube/label files into the native container pair.

Supported sources:

* MATLAB ``.mat`` files (the format the benchmark scenes ship in); the
  data key is auto-detected as the unique non-metadata array, or chosen
  explicitly with ``key``.
* NumPy ``.npy`` arrays.

Cubes must be (height, width, bands); label rasters (height, width) with
integer values where 0 means unlabeled.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DataError
from .hsio import (
    ClassLegend,
    GroundTruthMap,
    HyperspectralCube,
    save_cube,
    save_ground_truth,
)


def _load_mat_array(path: Path, key: str | None) -> np.ndarray:
    from scipy.io import loadmat

    try:
        contents = loadmat(path)
    except Exception as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    arrays = {
        k: v
        for k, v in contents.items()
        if not k.startswith("__") and isinstance(v, np.ndarray)
    }
    if key is not None:
        if key not in arrays:
            raise DataError(
                f"key '{key}' not in {path.name}; found {sorted(arrays)}"
            )
        return arrays[key]
    if len(arrays) != 1:
        raise DataError(
            f"{path.name} holds {len(arrays)} arrays {sorted(arrays)}; "
            "pass an explicit key"
        )
    return next(iter(arrays.values()))


def load_source_array(path: str | os.PathLike, key: str | None = None) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file {p}")
    if p.suffix == ".mat":
        return _load_mat_array(p, key)
    if p.suffix == ".npy":
        try:
            return np.load(p)
        except Exception as exc:
            raise DataError(f"cannot read {p}: {exc}") from exc
    raise DataError(f"unsupported source format {p.suffix!r} (want .mat or .npy)")


def convert_cube(
    source: str | os.PathLike,
    out_stem: str | os.PathLike,
    key: str | None = None,
) -> Path:
    """Convert a cube file to the native pair; returns the header path."""
    arr = load_source_array(source, key)
    if arr.ndim != 3:
        raise DataError(f"cube source must have 3 axes, got shape {arr.shape}")
    cube = HyperspectralCube(np.ascontiguousarray(arr, dtype=np.float64))
    return save_cube(cube, out_stem)


def convert_ground_truth(
    source: str | os.PathLike,
    out_stem: str | os.PathLike,
    key: str | None = None,
    class_names: list[str] | None = None,
) -> Path:
    """Convert a label raster; a legend is synthesized from the max label."""
    arr = load_source_array(source, key)
    if arr.ndim != 2:
        raise DataError(f"label source must have 2 axes, got shape {arr.shape}")
    gt = GroundTruthMap(arr)
    legend = ClassLegend.default(gt.class_count)
    if class_names is not None:
        if len(class_names) != gt.class_count:
            raise DataError(
                f"{len(class_names)} names for {gt.class_count} classes"
            )
        from .hsio import LegendEntry

        legend = ClassLegend(
            tuple(
                LegendEntry(e.label, class_names[i], e.rgb)
                for i, e in enumerate(legend.entries)
            )
        )
    return save_ground_truth(gt, out_stem, legend)
