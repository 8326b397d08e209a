"""Spectral reduction, patch extraction, and stratified splitting.

The pipeline turns an (H, W, L) cube plus a label raster into the model's
training currency: S x S x B patches labeled by their center pixel.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ExtentMismatchError
from .hsio import GroundTruthMap, HyperspectralCube

BORDER_MODES = ("interior", "mirror")


@dataclass(frozen=True)
class ReducedCube:
    """Cube projected onto its top principal spectral components.

    ``data`` is (height, width, components); ``projection`` is the L x B
    loading matrix whose columns are unit eigenvectors of the band
    covariance; ``band_means`` is the per-band mean removed before
    projection, so ``original ~= data @ projection.T + band_means``.
    """

    data: np.ndarray
    explained_variance: np.ndarray
    projection: np.ndarray
    band_means: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        ev = np.asarray(self.explained_variance, dtype=np.float64)
        proj = np.asarray(self.projection, dtype=np.float64)
        means = np.asarray(self.band_means, dtype=np.float64)
        if data.ndim != 3:
            raise DataError(f"reduced data must have 3 axes, got {data.ndim}")
        B = data.shape[2]
        if proj.shape != (means.shape[0], B):
            raise DataError(
                f"projection shape {proj.shape} inconsistent with "
                f"{means.shape[0]} bands and {B} components"
            )
        if ev.shape != (B,):
            raise DataError(f"expected {B} variance fractions, got {ev.shape}")
        if np.any(ev < -1e-12) or np.any(ev > 1 + 1e-12):
            raise DataError("explained_variance entries must lie in [0, 1]")
        if np.any(np.diff(ev) > 1e-12):
            raise DataError("explained_variance must be non-increasing")
        gram = proj.T @ proj
        if not np.allclose(gram, np.eye(B), atol=1e-6):
            raise DataError("projection columns are not orthonormal")
        for arr in (data, ev, proj, means):
            arr.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "explained_variance", ev)
        object.__setattr__(self, "projection", proj)
        object.__setattr__(self, "band_means", means)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def components(self) -> int:
        return self.data.shape[2]


def pca_reduce(
    cube: HyperspectralCube, components: int, use_correlation: bool = False
) -> ReducedCube:
    """Project mean-centered bands onto the top eigenvectors of their
    covariance (or correlation, when ``use_correlation``) matrix.

    Statistics are computed over all pixels.  Each eigenvector's sign is
    fixed so its largest-magnitude entry is positive, making the output
    deterministic across linear-algebra backends.
    """
    L = cube.bands
    if not 1 <= components <= L:
        raise ConfigError(f"components must be in [1, {L}], got {components}")
    H, W = cube.height, cube.width
    if H * W < 2:
        raise ConfigError("PCA needs at least 2 pixels")
    flat = cube.data.reshape(H * W, L).astype(np.float64)
    means = flat.mean(axis=0)
    centered = flat - means
    if use_correlation:
        stds = centered.std(axis=0, ddof=1)
        zero = np.flatnonzero(stds == 0)
        if zero.size:
            raise DataError(
                f"band {int(zero[0])} is constant; correlation PCA undefined"
            )
        centered = centered / stds
    cov = (centered.T @ centered) / (H * W - 1)
    total = float(np.trace(cov))
    if total == 0.0:
        raise DataError("cube is constant everywhere; covariance is zero")
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    vals = np.clip(vals, 0.0, None)
    top_vals = vals[:components]
    top_vecs = vecs[:, :components].copy()
    for j in range(components):
        peak = int(np.argmax(np.abs(top_vecs[:, j])))
        if top_vecs[peak, j] < 0:
            top_vecs[:, j] = -top_vecs[:, j]
    fractions = np.clip(top_vals / vals.sum(), 0.0, 1.0)
    projected = (centered @ top_vecs).reshape(H, W, components)
    return ReducedCube(
        data=projected,
        explained_variance=fractions,
        projection=top_vecs,
        band_means=means,
    )


class PatchSet:
    """Center-labeled S x S x B windows over a reduced cube.

    Patches are gathered on demand from a shared read-only source array
    rather than materialized as a copied 5-D block; ``patch`` and
    ``gather`` are safe to call concurrently from data-loading workers.
    """

    def __init__(
        self,
        source: np.ndarray,
        coords: np.ndarray,
        labels: np.ndarray,
        patch_size: int,
        border_mode: str,
    ):
        self._source = source
        self.coords = coords
        self.labels = labels
        self.patch_size = patch_size
        self.border_mode = border_mode
        self._pad = (patch_size - 1) // 2 if border_mode == "mirror" else 0

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def components(self) -> int:
        return int(self._source.shape[2])

    def patch(self, index: int) -> np.ndarray:
        a, b = self.coords[index]
        s, p = self.patch_size, self._pad
        if self.border_mode == "mirror":
            return self._source[a : a + s, b : b + s, :]
        r = (s - 1) // 2
        return self._source[a - r : a + r + 1, b - r : b + r + 1, :]

    def gather(self, indices: np.ndarray | list[int]) -> np.ndarray:
        """Stack the requested patches into an (n, S, S, B) array."""
        idx = np.asarray(indices, dtype=np.int64)
        out = np.empty(
            (idx.size, self.patch_size, self.patch_size, self.components),
            dtype=self._source.dtype,
        )
        for k, i in enumerate(idx):
            out[k] = self.patch(int(i))
        return out


def extract_patches(
    reduced: ReducedCube,
    gt: GroundTruthMap,
    patch_size: int,
    border_mode: str = "mirror",
) -> PatchSet:
    """Window the reduced cube around every eligible labeled pixel.

    ``interior`` keeps only centers whose full window fits on the image,
    giving at most (U - S + 1)(V - S + 1) patches; ``mirror`` reflects
    the cube at its borders so every labeled pixel yields a patch.
    """
    if border_mode not in BORDER_MODES:
        raise ConfigError(f"border_mode must be one of {BORDER_MODES}")
    S = int(patch_size)
    if S % 2 == 0 or S < 1:
        raise ConfigError(f"patch_size must be odd and positive, got {S}")
    U, V = reduced.height, reduced.width
    if S > min(U, V):
        raise ConfigError(f"patch_size {S} exceeds cube extent {(U, V)}")
    if (gt.height, gt.width) != (U, V):
        raise ExtentMismatchError((U, V), (gt.height, gt.width))
    r = (S - 1) // 2
    labels2d = gt.labels
    if border_mode == "interior":
        mask = np.zeros_like(labels2d, dtype=bool)
        mask[r : U - r, r : V - r] = True
        mask &= labels2d > 0
        source = reduced.data
    else:
        mask = labels2d > 0
        source = np.pad(reduced.data, ((r, r), (r, r), (0, 0)), mode="reflect")
        source.flags.writeable = False
    rows, cols = np.nonzero(mask)
    coords = np.stack([rows, cols], axis=1).astype(np.int64)
    labels = labels2d[rows, cols].astype(np.int64)
    return PatchSet(source, coords, labels, S, border_mode)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/validation/test indices into a PatchSet.

    ``by_class`` keeps the per-class index arrays the flat lists were
    concatenated from (ascending class order), which is what serializes.
    """

    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    fractions: tuple[float, float, float]
    seed: int
    by_class: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=dict
    )

    def __post_init__(self):
        parts = [
            np.asarray(p, dtype=np.int64)
            for p in (self.train_idx, self.val_idx, self.test_idx)
        ]
        union = np.concatenate(parts)
        if union.size != np.unique(union).size:
            raise DataError("split index lists overlap or repeat")
        object.__setattr__(self, "train_idx", parts[0])
        object.__setattr__(self, "val_idx", parts[1])
        object.__setattr__(self, "test_idx", parts[2])

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "classes": {
                str(c): {
                    "train": tr.tolist(),
                    "val": va.tolist(),
                    "test": te.tolist(),
                }
                for c, (tr, va, te) in sorted(self.by_class.items())
            },
        }
        return json.dumps(doc, indent=1)

    @staticmethod
    def from_json(text: str) -> "SplitAssignment":
        doc = json.loads(text)
        by_class = {}
        for key, sets in doc["classes"].items():
            by_class[int(key)] = tuple(
                np.asarray(sets[name], dtype=np.int64)
                for name in ("train", "val", "test")
            )
        ordered = [by_class[c] for c in sorted(by_class)]
        def cat(i: int) -> np.ndarray:
            if not ordered:
                return np.empty(0, dtype=np.int64)
            return np.concatenate([np.asarray(t[i]) for t in ordered])
        return SplitAssignment(
            train_idx=cat(0),
            val_idx=cat(1),
            test_idx=cat(2),
            fractions=tuple(float(f) for f in doc["fractions"]),
            seed=int(doc["seed"]),
            by_class=by_class,
        )

    def save(self, path: str | os.PathLike) -> None:
        from pathlib import Path

        Path(path).write_text(self.to_json(), encoding="utf-8")

    @staticmethod
    def load(path: str | os.PathLike) -> "SplitAssignment":
        from pathlib import Path

        return SplitAssignment.from_json(Path(path).read_text(encoding="utf-8"))


def stratified_split(
    patches: PatchSet,
    fractions: tuple[float, float, float],
    seed: int,
) -> SplitAssignment:
    """Partition patch indices per class at the requested fractions.

    Per class of size n: train gets round(f_tr * n), validation gets
    round(f_val * n), test gets the rest, where rounding is half away
    from zero with a floor of 1; train and validation are additionally
    capped so the test split keeps at least one sample.  Classes are
    processed in ascending order from a single generator, so the result
    is a pure function of (labels, fractions, seed).
    """
    f_tr, f_val, f_te = (float(f) for f in fractions)
    if min(f_tr, f_val, f_te) <= 0:
        raise ConfigError(f"fractions must be positive, got {fractions}")
    if abs(f_tr + f_val + f_te - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    labels = patches.labels
    if labels.size == 0:
        raise ConfigError("patch set is empty")
    rng = np.random.default_rng(seed)
    by_class: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for c in range(1, int(labels.max()) + 1):
        idx = np.flatnonzero(labels == c)
        n_c = int(idx.size)
        if n_c < 3:
            raise ConfigError(
                f"class {c} has {n_c} patch(es); need at least 3 to "
                "populate train, validation, and test"
            )
        n_tr = min(max(1, _round_half_up(f_tr * n_c)), n_c - 2)
        n_val = min(max(1, _round_half_up(f_val * n_c)), n_c - 1 - n_tr)
        shuffled = idx[rng.permutation(n_c)]
        by_class[c] = (
            shuffled[:n_tr],
            shuffled[n_tr : n_tr + n_val],
            shuffled[n_tr + n_val :],
        )
    ordered = [by_class[c] for c in sorted(by_class)]
    return SplitAssignment(
        train_idx=np.concatenate([t[0] for t in ordered]),
        val_idx=np.concatenate([t[1] for t in ordered]),
        test_idx=np.concatenate([t[2] for t in ordered]),
        fractions=(f_tr, f_val, f_te),
        seed=int(seed),
        by_class=by_class,
    )
