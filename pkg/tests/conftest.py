"""Shared fixtures: synthetic separable scenes, small configs, a disk dataset."""

import numpy as np
import pytest
import torch

from afnet import (
    AfNetConfig,
    AttentionSpec,
    BlockSpec,
    ClassLegend,
    ConvSpec2D,
    ConvSpec3D,
    GroundTruthMap,
    HyperspectralCube,
    extract_patches,
    pca_reduce,
    save_cube,
    save_ground_truth,
    stratified_split,
)

torch.set_num_threads(1)


def make_scene(height, width, bands, classes, per_class, noise=0.05, seed=0):
    """Random cube where each labeled pixel adds its class signature.

    Signatures are unit-scale Gaussian spectra over a low-noise floor,
    so the center pixel of every patch separates the classes cleanly.
    """
    rng = np.random.default_rng(seed)
    signatures = rng.normal(size=(classes, bands))
    data = rng.normal(scale=noise, size=(height, width, bands))
    labels = np.zeros((height, width), dtype=np.int64)
    chosen = rng.permutation(height * width)[: classes * per_class]
    for i, p in enumerate(chosen):
        c = i % classes + 1
        labels.flat[p] = c
        data.reshape(-1, bands)[p] += signatures[c - 1]
    return HyperspectralCube(data), GroundTruthMap(labels, classes)


def small_config(classes=4, patch=7, comps=6, attention="both"):
    """Two branches per block: exercises middle links at toy scale."""
    att = AttentionSpec(kind=attention, reduction_ratio=4, spatial_kernel=3)
    blocks_3d = tuple(
        BlockSpec((ConvSpec3D((3, 3, 5), 8), ConvSpec3D((3, 3, 3), 4)), att)
        for _ in range(3)
    )
    blocks_2d = tuple(
        BlockSpec((ConvSpec2D((3, 3), 8), ConvSpec2D((1, 1), 8)), att)
        for _ in range(3)
    )
    return AfNetConfig(
        blocks_3d=blocks_3d,
        blocks_2d=blocks_2d,
        patch_size=patch,
        components=comps,
        class_count=classes,
        head_filters=16,
    )


def tiny_config(classes=3, patch=5, comps=4, attention="both"):
    """One branch per block, ~1e3 parameters: sized for gradient checks."""
    att = AttentionSpec(kind=attention, reduction_ratio=4, spatial_kernel=3)
    blocks_3d = tuple(
        BlockSpec((ConvSpec3D((3, 3, 3), 2),), att) for _ in range(3)
    )
    blocks_2d = tuple(
        BlockSpec((ConvSpec2D((3, 3), 2),), att) for _ in range(3)
    )
    return AfNetConfig(
        blocks_3d=blocks_3d,
        blocks_2d=blocks_2d,
        patch_size=patch,
        components=comps,
        class_count=classes,
        head_filters=4,
    )


@pytest.fixture(scope="session")
def scene():
    return make_scene(26, 24, 8, 4, 20, seed=11)


@pytest.fixture(scope="session")
def patches(scene):
    cube, gt = scene
    return extract_patches(pca_reduce(cube, 5), gt, 7, "mirror")


@pytest.fixture(scope="session")
def split(patches):
    return stratified_split(patches, (0.5, 0.25, 0.25), seed=3)


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    """Dataset root with one healthy scene and one with a starved class."""
    root = tmp_path_factory.mktemp("data")
    cube, gt = make_scene(24, 24, 8, 3, 20, seed=5)
    save_cube(cube, root / "indian_pines")
    save_ground_truth(gt, root / "indian_pines_gt", ClassLegend.default(3))

    cube2, gt2 = make_scene(24, 24, 8, 3, 20, seed=6)
    labels = np.array(gt2.labels)
    starved = np.flatnonzero(labels.ravel() == 3)[2:]
    labels.reshape(-1)[starved] = 0  # class 3 keeps 2 pixels: splits must fail
    save_cube(cube2, root / "salinas")
    save_ground_truth(
        GroundTruthMap(labels, 3), root / "salinas_gt", ClassLegend.default(3)
    )
    return root
