"""Attention-fused hybrid 3D/2D convolutional network and its baselines.

The hybrid model runs a patch through three multi-scale 3D convolution
blocks, folds the spectral axis into channels (reshape + 3x3 max-pool),
runs three multi-scale 2D blocks, concatenates all three 2D block
outputs, and classifies through a 128-filter 1x1 conv, flatten, and a
dense softmax head.  Blocks of the same dimensionality are densely
wired: block 3 sees block 1's output through a gated skip, and the
second conv of each block is linked to the second conv of the previous
block.  The 3D-only and 2D-only baselines reuse one stage plus the same
fusion tail.

Public tensor layouts are channels-last: 2D features are (N, H, W, C)
and 3D features are (N, H, W, D, C) with D the spectral axis.  Torch's
(N, C, D, H, W) layout is an internal detail of the modules.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, WiringError

ATTENTION_KINDS = ("channel", "spatial", "both", "none")
MODEL_KINDS = ("afnet", "inception2d", "inception3d")
TOPOLOGIES = ("parallel", "sequential")

_CONSECUTIVE_EDGES = ((1, 2), (2, 3))
_ALLOWED_DENSE_EDGES = ((1, 2), (1, 3), (2, 3))


def _check_odd(values, what: str) -> None:
    for v in values:
        if v < 1 or v % 2 == 0:
            raise ConfigError(f"{what} must be odd and >= 1, got {values}")


@dataclass(frozen=True)
class ConvSpec3D:
    """One 3D conv branch: kernel is (height, width, spectral)."""

    kernel: tuple[int, int, int]
    filters: int
    activation: str = "relu"

    def __post_init__(self):
        kernel = tuple(int(k) for k in self.kernel)
        if len(kernel) != 3:
            raise ConfigError(f"3D kernel needs 3 dims, got {kernel}")
        _check_odd(kernel, "3D kernel dims")
        if self.filters < 1:
            raise ConfigError(f"filters must be >= 1, got {self.filters}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "kernel", kernel)


@dataclass(frozen=True)
class ConvSpec2D:
    """One 2D conv branch: kernel is (height, width)."""

    kernel: tuple[int, int]
    filters: int
    activation: str = "relu"

    def __post_init__(self):
        kernel = tuple(int(k) for k in self.kernel)
        if len(kernel) != 2:
            raise ConfigError(f"2D kernel needs 2 dims, got {kernel}")
        _check_odd(kernel, "2D kernel dims")
        if self.filters < 1:
            raise ConfigError(f"filters must be >= 1, got {self.filters}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "kernel", kernel)


@dataclass(frozen=True)
class AttentionSpec:
    """How gated skips behave on cross-block edges.

    ``channel`` squeezes the skip through a reduction-ratio bottleneck
    into per-channel sigmoid weights; ``spatial`` convolves channel
    mean/max statistics into a per-position sigmoid weight; ``both``
    composes them; ``none`` degrades the fuse to a plain concatenation.
    """

    kind: str = "both"
    reduction_ratio: int = 4
    spatial_kernel: int = 7
    gate: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ConfigError(
                f"attention kind must be one of {ATTENTION_KINDS}, "
                f"got {self.kind!r}"
            )
        if self.reduction_ratio < 1:
            raise ConfigError(
                f"reduction_ratio must be >= 1, got {self.reduction_ratio}"
            )
        _check_odd((self.spatial_kernel,), "spatial gate kernel")
        if self.gate != "sigmoid":
            raise ConfigError(f"unsupported gate {self.gate!r}")


@dataclass(frozen=True)
class BlockSpec:
    """A block of parallel conv branches sharing one attention policy."""

    branches: tuple
    attention: AttentionSpec = field(default_factory=AttentionSpec)

    def __post_init__(self):
        branches = tuple(self.branches)
        if not branches:
            raise ConfigError("a block needs at least one branch")
        kinds = {type(b) for b in branches}
        if kinds not in ({ConvSpec3D}, {ConvSpec2D}):
            raise ConfigError(
                "block branches must be homogeneous ConvSpec3D or ConvSpec2D"
            )
        object.__setattr__(self, "branches", branches)

    @property
    def dims(self) -> int:
        return 3 if isinstance(self.branches[0], ConvSpec3D) else 2


@dataclass(frozen=True)
class AfNetConfig:
    """Complete architecture description; serializes field-for-field.

    ``dense_edges`` lists block-to-block edges within each stage: the
    consecutive edges (1,2) and (2,3) are the trunk and must be present,
    while (1,3) adds the gated long skip.  ``middle_edges`` lists the
    second-conv-to-second-conv links between consecutive blocks.
    """

    blocks_3d: tuple[BlockSpec, BlockSpec, BlockSpec]
    blocks_2d: tuple[BlockSpec, BlockSpec, BlockSpec]
    patch_size: int = 9
    components: int = 15
    class_count: int = 16
    bridge_pool: tuple[int, int] = (3, 3)
    head_filters: int = 128
    block_topology: str = "parallel"
    dense_edges: tuple[tuple[int, int], ...] = ((1, 2), (1, 3), (2, 3))
    middle_edges: tuple[tuple[int, int], ...] = ((1, 2), (2, 3))

    def __post_init__(self):
        for name, blocks, dims in (
            ("blocks_3d", self.blocks_3d, 3),
            ("blocks_2d", self.blocks_2d, 2),
        ):
            blocks = tuple(blocks)
            if len(blocks) != 3:
                raise ConfigError(f"{name} needs exactly 3 blocks")
            for b in blocks:
                if b.dims != dims:
                    raise ConfigError(f"{name} holds a {b.dims}D block")
            object.__setattr__(self, name, blocks)
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(
                f"patch_size must be odd and >= 1, got {self.patch_size}"
            )
        if self.components < 1:
            raise ConfigError(f"components must be >= 1, got {self.components}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.head_filters < 1:
            raise ConfigError(f"head_filters must be >= 1, got {self.head_filters}")
        pool = tuple(int(k) for k in self.bridge_pool)
        if len(pool) != 2:
            raise ConfigError(f"bridge_pool needs 2 dims, got {pool}")
        _check_odd(pool, "bridge_pool dims")
        object.__setattr__(self, "bridge_pool", pool)
        if self.block_topology not in TOPOLOGIES:
            raise ConfigError(
                f"block_topology must be one of {TOPOLOGIES}, "
                f"got {self.block_topology!r}"
            )
        dense = tuple(sorted(tuple(int(v) for v in e) for e in self.dense_edges))
        for e in _CONSECUTIVE_EDGES:
            if e not in dense:
                raise ConfigError(f"dense_edges must include trunk edge {e}")
        for e in dense:
            if e not in _ALLOWED_DENSE_EDGES:
                raise ConfigError(f"unsupported dense edge {e}")
        middle = tuple(sorted(tuple(int(v) for v in e) for e in self.middle_edges))
        for e in middle:
            if e not in _CONSECUTIVE_EDGES:
                raise ConfigError(f"unsupported middle edge {e}")
        object.__setattr__(self, "dense_edges", dense)
        object.__setattr__(self, "middle_edges", middle)

    def with_overrides(self, **kwargs) -> "AfNetConfig":
        return replace(self, **kwargs)


def default_config(
    patch_size: int = 9,
    components: int = 15,
    class_count: int = 16,
    attention: str = "both",
    block_topology: str = "parallel",
    reduction_ratio: int = 4,
    spatial_kernel: int = 7,
) -> AfNetConfig:
    """The reference architecture: 19 conv layers (9 3D + 9 2D + head).

    Every 3D block runs (7,7,9), (5,5,7), (3,3,5) branches; the filter
    triples grow (30,20,10) -> (40,20,10) -> (60,30,10).  Every 2D block
    runs (3,3), (3,3), (1,1) branches at (16,32,64) filters.
    """
    att = AttentionSpec(
        kind=attention,
        reduction_ratio=reduction_ratio,
        spatial_kernel=spatial_kernel,
    )
    kernels3d = ((7, 7, 9), (5, 5, 7), (3, 3, 5))
    filters3d = ((30, 20, 10), (40, 20, 10), (60, 30, 10))
    blocks_3d = tuple(
        BlockSpec(
            tuple(ConvSpec3D(k, f) for k, f in zip(kernels3d, fs)), att
        )
        for fs in filters3d
    )
    kernels2d = ((3, 3), (3, 3), (1, 1))
    filters2d = (16, 32, 64)
    blocks_2d = tuple(
        BlockSpec(
            tuple(ConvSpec2D(k, f) for k, f in zip(kernels2d, filters2d)), att
        )
        for _ in range(3)
    )
    return AfNetConfig(
        blocks_3d=blocks_3d,
        blocks_2d=blocks_2d,
        patch_size=patch_size,
        components=components,
        class_count=class_count,
        block_topology=block_topology,
    )


# ---------------------------------------------------------------------------
# Config serialization (JSON mirrors the dataclasses field-for-field).
# ---------------------------------------------------------------------------

def config_to_dict(config: AfNetConfig) -> dict:
    def branch(b):
        return {
            "kernel": list(b.kernel),
            "filters": b.filters,
            "activation": b.activation,
        }

    def block(bs: BlockSpec):
        return {
            "branches": [branch(b) for b in bs.branches],
            "attention": {
                "kind": bs.attention.kind,
                "reduction_ratio": bs.attention.reduction_ratio,
                "spatial_kernel": bs.attention.spatial_kernel,
                "gate": bs.attention.gate,
            },
        }

    return {
        "patch_size": config.patch_size,
        "components": config.components,
        "class_count": config.class_count,
        "bridge_pool": list(config.bridge_pool),
        "head_filters": config.head_filters,
        "block_topology": config.block_topology,
        "dense_edges": [list(e) for e in config.dense_edges],
        "middle_edges": [list(e) for e in config.middle_edges],
        "blocks_3d": [block(b) for b in config.blocks_3d],
        "blocks_2d": [block(b) for b in config.blocks_2d],
    }


def config_from_dict(doc: dict) -> AfNetConfig:
    def block(d: dict) -> BlockSpec:
        att = AttentionSpec(**d["attention"])
        branches = []
        for b in d["branches"]:
            kernel = tuple(b["kernel"])
            cls = ConvSpec3D if len(kernel) == 3 else ConvSpec2D
            branches.append(
                cls(kernel, int(b["filters"]), b.get("activation", "relu"))
            )
        return BlockSpec(tuple(branches), att)

    try:
        return AfNetConfig(
            blocks_3d=tuple(block(b) for b in doc["blocks_3d"]),
            blocks_2d=tuple(block(b) for b in doc["blocks_2d"]),
            patch_size=int(doc["patch_size"]),
            components=int(doc["components"]),
            class_count=int(doc["class_count"]),
            bridge_pool=tuple(doc["bridge_pool"]),
            head_filters=int(doc["head_filters"]),
            block_topology=doc["block_topology"],
            dense_edges=tuple(tuple(e) for e in doc["dense_edges"]),
            middle_edges=tuple(tuple(e) for e in doc["middle_edges"]),
        )
    except KeyError as exc:
        raise ConfigError(f"config document missing key {exc}") from exc


# ---------------------------------------------------------------------------
# Modules.
# ---------------------------------------------------------------------------

class AttentionFuse(nn.Module):
    """Concatenate a trunk with a gated skip: out = [trunk, g(skip) * skip].

    When the skip's channel width differs from the trunk's, a learned
    1x1 adapter lifts it to the trunk width before gating.  Gate
    activations are sigmoids, so they lie strictly in (0, 1); kind
    ``none`` skips both adapter and gate and concatenates directly.
    """

    def __init__(
        self,
        trunk_channels: int,
        skip_channels: int,
        spec: AttentionSpec,
        dims: int,
    ):
        super().__init__()
        if dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {dims}")
        self.kind = spec.kind
        self.dims = dims
        self.trunk_channels = trunk_channels
        self.skip_channels = skip_channels
        conv = nn.Conv3d if dims == 3 else nn.Conv2d
        self.adapter = None
        width = skip_channels
        if spec.kind != "none":
            if skip_channels != trunk_channels:
                self.adapter = conv(skip_channels, trunk_channels, 1)
                width = trunk_channels
            if spec.kind in ("channel", "both"):
                hidden = max(width // spec.reduction_ratio, 1)
                self.squeeze = nn.Linear(width, hidden)
                self.excite = nn.Linear(hidden, width)
            if spec.kind in ("spatial", "both"):
                k = spec.spatial_kernel
                self.spatial = conv(2, 1, k, padding=k // 2)
        self.out_channels = trunk_channels + width

    def forward(self, trunk: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if trunk.shape[2:] != skip.shape[2:] or trunk.shape[0] != skip.shape[0]:
            raise WiringError(
                f"fuse edge joins trunk {tuple(trunk.shape)} with "
                f"skip {tuple(skip.shape)}: extents differ"
            )
        if self.kind == "none":
            return torch.cat([trunk, skip], dim=1)
        if skip.shape[1] != self.skip_channels:
            raise WiringError(
                f"fuse edge expected {self.skip_channels} skip channels, "
                f"got {skip.shape[1]}"
            )
        s = self.adapter(skip) if self.adapter is not None else skip
        if self.kind in ("channel", "both"):
            pooled = s.mean(dim=tuple(range(2, s.ndim)))
            gate = torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))
            s = s * gate.reshape(gate.shape + (1,) * (s.ndim - 2))
        if self.kind in ("spatial", "both"):
            stats = torch.cat(
                [s.mean(dim=1, keepdim=True), s.amax(dim=1, keepdim=True)],
                dim=1,
            )
            s = s * torch.sigmoid(self.spatial(stats))
        return torch.cat([trunk, s], dim=1)


class InceptionBlock(nn.Module):
    """Multi-scale conv branches over one input, ReLU after every conv.

    ``parallel`` topology feeds every branch the block input and
    concatenates the branch outputs; ``sequential`` chains the branches
    and emits the last one.  When the previous block supplies a middle
    feature, branch 2's input passes through an AttentionFuse with that
    feature as the skip.
    """

    def __init__(
        self,
        in_channels: int,
        spec: BlockSpec,
        prev_mid_channels: int | None = None,
        topology: str = "parallel",
    ):
        super().__init__()
        self.topology = topology
        self.dims = spec.dims
        conv = nn.Conv3d if self.dims == 3 else nn.Conv2d
        n = len(spec.branches)
        if topology == "parallel":
            ins = [in_channels] * n
        else:
            ins = [in_channels] + [b.filters for b in spec.branches[:-1]]
        self.mid_fuse = None
        if prev_mid_channels is not None and n >= 2:
            self.mid_fuse = AttentionFuse(
                ins[1], prev_mid_channels, spec.attention, self.dims
            )
            ins[1] = self.mid_fuse.out_channels
        branches = []
        for i, b in enumerate(spec.branches):
            if self.dims == 3:
                kh, kw, kd = b.kernel
                layer = conv(
                    ins[i], b.filters, (kd, kh, kw),
                    padding=(kd // 2, kh // 2, kw // 2),
                )
            else:
                kh, kw = b.kernel
                layer = conv(
                    ins[i], b.filters, (kh, kw), padding=(kh // 2, kw // 2)
                )
            branches.append(layer)
        self.branches = nn.ModuleList(branches)
        if topology == "parallel":
            self.out_channels = sum(b.filters for b in spec.branches)
        else:
            self.out_channels = spec.branches[-1].filters
        self.mid_channels = spec.branches[1].filters if n >= 2 else None
        self.conv_layer_count = n

    def forward(
        self, x: torch.Tensor, prev_mid: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        outs = []
        h = x
        for i, conv in enumerate(self.branches):
            source = x if self.topology == "parallel" else h
            if i == 1 and self.mid_fuse is not None:
                source = self.mid_fuse(source, prev_mid)
            h = F.relu(conv(source))
            outs.append(h)
        out = torch.cat(outs, dim=1) if self.topology == "parallel" else outs[-1]
        mid = outs[1] if len(outs) >= 2 else None
        return out, mid


class DenseStage(nn.Module):
    """Three blocks of one dimensionality under the dense wiring table.

    Block 2 consumes block 1's output; block 3 consumes block 2's output
    fused (when edge (1,3) is wired) with block 1's output as a gated
    skip, so it sees every earlier block.  Middle edges link the second
    conv of consecutive blocks through the same fuse.
    """

    def __init__(
        self,
        in_channels: int,
        blocks: tuple[BlockSpec, BlockSpec, BlockSpec],
        topology: str,
        dense_edges: tuple[tuple[int, int], ...],
        middle_edges: tuple[tuple[int, int], ...],
    ):
        super().__init__()
        dims = blocks[0].dims
        self.block1 = InceptionBlock(in_channels, blocks[0], None, topology)
        mid12 = self.block1.mid_channels if (1, 2) in middle_edges else None
        self.block2 = InceptionBlock(
            self.block1.out_channels, blocks[1], mid12, topology
        )
        self.fuse13 = None
        third_in = self.block2.out_channels
        if (1, 3) in dense_edges:
            self.fuse13 = AttentionFuse(
                self.block2.out_channels,
                self.block1.out_channels,
                blocks[2].attention,
                dims,
            )
            third_in = self.fuse13.out_channels
        mid23 = self.block2.mid_channels if (2, 3) in middle_edges else None
        self.block3 = InceptionBlock(third_in, blocks[2], mid23, topology)
        self.block_out_channels = (
            self.block1.out_channels,
            self.block2.out_channels,
            self.block3.out_channels,
        )
        self.conv_layer_count = (
            self.block1.conv_layer_count
            + self.block2.conv_layer_count
            + self.block3.conv_layer_count
        )

    def forward(
        self, x: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        y1, m1 = self.block1(x)
        y2, m2 = self.block2(y1, m1 if self.block2.mid_fuse is not None else None)
        x3 = self.fuse13(y2, y1) if self.fuse13 is not None else y2
        y3, _ = self.block3(x3, m2 if self.block3.mid_fuse is not None else None)
        return y1, y2, y3


def _check_batch(batch: torch.Tensor, config: AfNetConfig) -> None:
    want = (config.patch_size, config.patch_size, config.components)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != want:
        raise WiringError(
            f"batch shape {tuple(batch.shape)} does not match expected "
            f"(N, {want[0]}, {want[1]}, {want[2]})"
        )


class AfNet(nn.Module):
    """Hybrid model: 3D stage, spectral fold bridge, 2D stage, fusion head.

    Input batches are (N, S, S, B) patches; output rows are class logits.
    The flatten before the dense head runs in (row, col, channel) order,
    which is part of the checkpoint contract.
    """

    kind = "afnet"

    def __init__(self, config: AfNetConfig):
        super().__init__()
        self.config = config
        self.stage3d = DenseStage(
            1,
            config.blocks_3d,
            config.block_topology,
            config.dense_edges,
            config.middle_edges,
        )
        folded = self.stage3d.block_out_channels[2] * config.components
        self.stage2d = DenseStage(
            folded,
            config.blocks_2d,
            config.block_topology,
            config.dense_edges,
            config.middle_edges,
        )
        fusion = sum(self.stage2d.block_out_channels)
        self.head = nn.Conv2d(fusion, config.head_filters, 1)
        s = config.patch_size
        self.classifier = nn.Linear(
            config.head_filters * s * s, config.class_count
        )
        self.conv_layer_count = (
            self.stage3d.conv_layer_count + self.stage2d.conv_layer_count + 1
        )

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        _check_batch(batch, self.config)
        n = batch.shape[0]
        # (N, S, S, B) -> (N, 1, B, S, S): spectral axis is conv depth.
        v = batch.permute(0, 3, 1, 2).unsqueeze(1)
        _, _, y3 = self.stage3d(v)
        # Fold spectral slices into channels (slice-major), then pool.
        d, c = y3.shape[2], y3.shape[1]
        f = y3.permute(0, 2, 1, 3, 4).reshape(n, d * c, y3.shape[3], y3.shape[4])
        kh, kw = self.config.bridge_pool
        f = F.max_pool2d(f, (kh, kw), stride=1, padding=(kh // 2, kw // 2))
        u1, u2, u3 = self.stage2d(f)
        h = F.relu(self.head(torch.cat([u1, u2, u3], dim=1)))
        flat = h.permute(0, 2, 3, 1).reshape(n, -1)
        return self.classifier(flat)


class InceptionNet3D(nn.Module):
    """3D-only baseline: the 3D stage plus the fusion tail (10 convs).

    Flatten order is (row, col, spectral, channel).
    """

    kind = "inception3d"

    def __init__(self, config: AfNetConfig):
        super().__init__()
        self.config = config
        self.stage3d = DenseStage(
            1,
            config.blocks_3d,
            config.block_topology,
            config.dense_edges,
            config.middle_edges,
        )
        fusion = sum(self.stage3d.block_out_channels)
        self.head = nn.Conv3d(fusion, config.head_filters, 1)
        s, b = config.patch_size, config.components
        self.classifier = nn.Linear(
            config.head_filters * s * s * b, config.class_count
        )
        self.conv_layer_count = self.stage3d.conv_layer_count + 1

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        _check_batch(batch, self.config)
        n = batch.shape[0]
        v = batch.permute(0, 3, 1, 2).unsqueeze(1)
        y1, y2, y3 = self.stage3d(v)
        h = F.relu(self.head(torch.cat([y1, y2, y3], dim=1)))
        flat = h.permute(0, 3, 4, 2, 1).reshape(n, -1)
        return self.classifier(flat)


class InceptionNet2D(nn.Module):
    """2D-only baseline: patches read as B-channel images (10 convs)."""

    kind = "inception2d"

    def __init__(self, config: AfNetConfig):
        super().__init__()
        self.config = config
        self.stage2d = DenseStage(
            config.components,
            config.blocks_2d,
            config.block_topology,
            config.dense_edges,
            config.middle_edges,
        )
        fusion = sum(self.stage2d.block_out_channels)
        self.head = nn.Conv2d(fusion, config.head_filters, 1)
        s = config.patch_size
        self.classifier = nn.Linear(
            config.head_filters * s * s, config.class_count
        )
        self.conv_layer_count = self.stage2d.conv_layer_count + 1

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        _check_batch(batch, self.config)
        n = batch.shape[0]
        x = batch.permute(0, 3, 1, 2)
        u1, u2, u3 = self.stage2d(x)
        h = F.relu(self.head(torch.cat([u1, u2, u3], dim=1)))
        flat = h.permute(0, 2, 3, 1).reshape(n, -1)
        return self.classifier(flat)


# ---------------------------------------------------------------------------
# Construction, init, parameter accounting.
# ---------------------------------------------------------------------------

def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Fan-in-scaled uniform init (bound sqrt(6/fan_in)), zero biases.

    Draws come from one explicit generator in module declaration order,
    so two builds with the same seed are bit-identical.
    """
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
    model.init_seed = int(seed)
    return model


def build_afnet(config: AfNetConfig, seed: int = 0) -> AfNet:
    return init_parameters(AfNet(config), seed)


def build_baseline_3d(config: AfNetConfig, seed: int = 0) -> InceptionNet3D:
    return init_parameters(InceptionNet3D(config), seed)


def build_baseline_2d(config: AfNetConfig, seed: int = 0) -> InceptionNet2D:
    return init_parameters(InceptionNet2D(config), seed)


_BUILDERS = {
    "afnet": build_afnet,
    "inception2d": build_baseline_2d,
    "inception3d": build_baseline_3d,
}


def build_model(kind: str, config: AfNetConfig, seed: int = 0) -> nn.Module:
    if kind not in _BUILDERS:
        raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")
    return _BUILDERS[kind](config, seed)


def count_parameters(obj, kind: str = "afnet") -> int:
    """Total trainable scalar count of a model (or of a config, built)."""
    if isinstance(obj, nn.Module):
        return sum(p.numel() for p in obj.parameters())
    return count_parameters(build_model(kind, obj, seed=0))


def forward(model: nn.Module, batch) -> np.ndarray:
    """Run a patch batch through a model; rows are softmax probabilities."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(batch)).to(dtype)
    model.eval()
    with torch.no_grad():
        logits = model(x)
        probs = torch.softmax(logits, dim=1)
    return probs.numpy()


# ---------------------------------------------------------------------------
# Functional ops on channels-last arrays (the shapes tests reason about).
# ---------------------------------------------------------------------------

def conv3d_forward(
    batch: np.ndarray,
    spec: ConvSpec3D,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Same-padded 3D convolution + ReLU on a (N, H, W, D, Cin) batch.

    ``weights`` is (kh, kw, kd, Cin, Cout) matching spec.kernel and
    spec.filters; output is (N, H, W, D, Cout).
    """
    x = np.asarray(batch)
    w = np.asarray(weights)
    if x.ndim != 5:
        raise WiringError(f"batch must have 5 axes, got {x.ndim}")
    kh, kw, kd = spec.kernel
    if w.shape[:3] != (kh, kw, kd) or w.shape[4] != spec.filters:
        raise WiringError(
            f"weight shape {w.shape} does not realize kernel {spec.kernel} "
            f"with {spec.filters} filters"
        )
    if x.shape[4] != w.shape[3]:
        raise WiringError(
            f"input has {x.shape[4]} channels, weights expect {w.shape[3]}"
        )
    if bias is None:
        bias = np.zeros(spec.filters, dtype=x.dtype)
    dtype = torch.float64 if x.dtype == np.float64 else torch.float32
    xt = torch.as_tensor(x).to(dtype).permute(0, 4, 3, 1, 2)
    wt = torch.as_tensor(w).to(dtype).permute(4, 3, 2, 0, 1)
    bt = torch.as_tensor(np.asarray(bias)).to(dtype)
    out = F.conv3d(xt, wt, bt, padding=(kd // 2, kh // 2, kw // 2))
    return F.relu(out).permute(0, 3, 4, 2, 1).numpy()


def conv2d_forward(
    batch: np.ndarray,
    spec: ConvSpec2D,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Same-padded 2D convolution + ReLU on a (N, H, W, Cin) batch.

    ``weights`` is (kh, kw, Cin, Cout); output is (N, H, W, Cout).
    """
    x = np.asarray(batch)
    w = np.asarray(weights)
    if x.ndim != 4:
        raise WiringError(f"batch must have 4 axes, got {x.ndim}")
    kh, kw = spec.kernel
    if w.shape[:2] != (kh, kw) or w.shape[3] != spec.filters:
        raise WiringError(
            f"weight shape {w.shape} does not realize kernel {spec.kernel} "
            f"with {spec.filters} filters"
        )
    if x.shape[3] != w.shape[2]:
        raise WiringError(
            f"input has {x.shape[3]} channels, weights expect {w.shape[2]}"
        )
    if bias is None:
        bias = np.zeros(spec.filters, dtype=x.dtype)
    dtype = torch.float64 if x.dtype == np.float64 else torch.float32
    xt = torch.as_tensor(x).to(dtype).permute(0, 3, 1, 2)
    wt = torch.as_tensor(w).to(dtype).permute(3, 2, 0, 1)
    bt = torch.as_tensor(np.asarray(bias)).to(dtype)
    out = F.conv2d(xt, wt, bt, padding=(kh // 2, kw // 2))
    return F.relu(out).permute(0, 2, 3, 1).numpy()


def bridge_3d_to_2d(
    features: np.ndarray, pool: tuple[int, int] = (3, 3)
) -> np.ndarray:
    """Fold (N, H, W, D, C) into (N, H, W, D*C), then same-padded max-pool.

    The fold is slice-major: output channel d*C + c holds spectral slice
    d of input channel c.  Pooling runs with stride 1, so the spatial
    extent is preserved.
    """
    x = np.asarray(features)
    if x.ndim != 5:
        raise WiringError(f"features must have 5 axes, got {x.ndim}")
    n, h, w, d, c = x.shape
    folded = x.reshape(n, h, w, d * c)
    kh, kw = pool
    dtype = torch.float64 if x.dtype == np.float64 else torch.float32
    xt = torch.as_tensor(folded).to(dtype).permute(0, 3, 1, 2)
    out = F.max_pool2d(xt, (kh, kw), stride=1, padding=(kh // 2, kw // 2))
    return out.permute(0, 2, 3, 1).numpy()


def attention_fuse(
    trunk: np.ndarray,
    skip: np.ndarray,
    spec: AttentionSpec | AttentionFuse,
    seed: int = 0,
) -> np.ndarray:
    """Channels-last wrapper over AttentionFuse for 4- or 5-axis batches.

    Passing an AttentionSpec builds a fresh seed-initialized module;
    passing an AttentionFuse module reuses its learned state.
    """
    t = np.asarray(trunk)
    s = np.asarray(skip)
    if t.ndim not in (4, 5) or s.ndim != t.ndim:
        raise WiringError(
            f"trunk/skip must both be 4- or 5-axis, got {t.ndim}/{s.ndim}"
        )
    dims = t.ndim - 2
    if isinstance(spec, AttentionFuse):
        module = spec
    else:
        module = AttentionFuse(t.shape[-1], s.shape[-1], spec, dims)
        init_parameters(module, seed)
    dtype = torch.float64 if t.dtype == np.float64 else torch.float32
    if dims == 3:
        to_torch = lambda a: torch.as_tensor(a).to(dtype).permute(0, 4, 3, 1, 2)
        to_numpy = lambda a: a.permute(0, 3, 4, 2, 1).numpy()
    else:
        to_torch = lambda a: torch.as_tensor(a).to(dtype).permute(0, 3, 1, 2)
        to_numpy = lambda a: a.permute(0, 2, 3, 1).numpy()
    module = module.to(dtype)
    with torch.no_grad():
        fused = module(to_torch(t), to_torch(s))
    return to_numpy(fused)


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + raw little-endian parameter blob.
# ---------------------------------------------------------------------------

_BLOB_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _tensors_to_blob(tensors: dict[str, torch.Tensor]) -> tuple[bytes, list[dict]]:
    layout = []
    chunks = []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        tag = "f64" if arr.dtype == np.float64 else "f32"
        layout.append({"name": name, "shape": list(arr.shape), "dtype": tag})
        chunks.append(np.ascontiguousarray(arr, dtype=_BLOB_DTYPES[tag]).tobytes())
    return b"".join(chunks), layout


def _blob_to_arrays(blob: bytes, layout: list[dict]) -> dict[str, np.ndarray]:
    arrays = {}
    offset = 0
    for entry in layout:
        dtype = _BLOB_DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        size = count * dtype.itemsize
        chunk = np.frombuffer(blob[offset : offset + size], dtype=dtype)
        if chunk.size != count:
            raise ConfigError(
                f"parameter blob truncated at entry {entry['name']}"
            )
        arrays[entry["name"]] = chunk.reshape(entry["shape"]).copy()
        offset += size
    if offset != len(blob):
        raise ConfigError(
            f"parameter blob holds {len(blob)} bytes, layout expects {offset}"
        )
    return arrays


def save_checkpoint(
    stem: str | os.PathLike,
    model: nn.Module,
    epoch: int = 0,
    metrics: dict | None = None,
    optimizer_state: dict[str, torch.Tensor] | None = None,
) -> Path:
    """Write <stem>.json + <stem>.params (+ <stem>.opt when resuming)."""
    stem = Path(stem)
    blob, layout = _tensors_to_blob(model.state_dict())
    manifest = {
        "format": "afnet-checkpoint-v1",
        "model": model.kind,
        "config": config_to_dict(model.config),
        "seed": getattr(model, "init_seed", None),
        "epoch": int(epoch),
        "metrics": metrics or {},
        "parameters": layout,
    }
    if optimizer_state is not None:
        opt_blob, opt_layout = _tensors_to_blob(optimizer_state)
        manifest["optimizer"] = opt_layout
        stem.with_suffix(".opt").write_bytes(opt_blob)
    stem.with_suffix(".params").write_bytes(blob)
    stem.with_suffix(".json").write_text(
        json.dumps(manifest, indent=1), encoding="utf-8"
    )
    return stem.with_suffix(".json")


def load_checkpoint(
    stem: str | os.PathLike,
) -> tuple[nn.Module, dict, dict[str, np.ndarray] | None]:
    """Rebuild the model from a checkpoint pair; exact state round-trip."""
    stem = Path(stem)
    manifest_path = stem if stem.suffix == ".json" else stem.with_suffix(".json")
    stem = manifest_path.with_suffix("")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != "afnet-checkpoint-v1":
        raise ConfigError(f"{manifest_path} is not a checkpoint manifest")
    config = config_from_dict(manifest["config"])
    model = build_model(manifest["model"], config, seed=manifest.get("seed") or 0)
    blob = stem.with_suffix(".params").read_bytes()
    arrays = _blob_to_arrays(blob, manifest["parameters"])
    state = {
        name: torch.as_tensor(arr) for name, arr in arrays.items()
    }
    dtype = next(model.parameters()).dtype
    if manifest["parameters"] and manifest["parameters"][0]["dtype"] == "f64":
        model = model.double()
        dtype = torch.float64
    model.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    optimizer_arrays = None
    opt_path = stem.with_suffix(".opt")
    if "optimizer" in manifest and opt_path.exists():
        optimizer_arrays = _blob_to_arrays(
            opt_path.read_bytes(), manifest["optimizer"]
        )
    return model, manifest, optimizer_arrays
