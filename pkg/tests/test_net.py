"""Architecture wiring, functional ops vs loop oracles, checkpoints."""

import numpy as np
import pytest
import torch
from oracles import (
    conv2d_loop,
    conv3d_loop,
    count_params_closed_form,
    maxpool2d_same_loop,
)

from afnet import (
    AfNetConfig,
    AttentionSpec,
    BlockSpec,
    ConfigError,
    ConvSpec2D,
    ConvSpec3D,
    WiringError,
    attention_fuse,
    bridge_3d_to_2d,
    build_model,
    config_from_dict,
    config_to_dict,
    conv2d_forward,
    conv3d_forward,
    count_parameters,
    default_config,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from afnet.net import AttentionFuse, DenseStage, InceptionBlock, init_parameters
from conftest import small_config, tiny_config


# ---------------------------------------------------------------------------
# Specs and config.
# ---------------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ConfigError):
        ConvSpec3D((4, 3, 3), 8)  # even kernel breaks same padding
    with pytest.raises(ConfigError):
        ConvSpec2D((3, 3), 0)
    with pytest.raises(ConfigError):
        AttentionSpec(kind="cbam")
    with pytest.raises(ConfigError):
        AttentionSpec(spatial_kernel=4)
    with pytest.raises(ConfigError):
        BlockSpec((ConvSpec3D((3, 3, 3), 2), ConvSpec2D((3, 3), 2)))
    with pytest.raises(ConfigError):
        BlockSpec(())


def test_config_validation():
    cfg = default_config()
    assert cfg.patch_size == 9 and cfg.components == 15
    with pytest.raises(ConfigError):
        cfg.with_overrides(patch_size=8)
    with pytest.raises(ConfigError):
        cfg.with_overrides(class_count=1)
    with pytest.raises(ConfigError):
        cfg.with_overrides(block_topology="cascade")
    with pytest.raises(ConfigError):
        cfg.with_overrides(blocks_3d=cfg.blocks_3d[:2])
    with pytest.raises(ConfigError):
        cfg.with_overrides(blocks_3d=cfg.blocks_2d)  # wrong dimensionality
    with pytest.raises(ConfigError):
        cfg.with_overrides(dense_edges=((1, 2),))  # trunk edge (2,3) missing
    with pytest.raises(ConfigError):
        cfg.with_overrides(dense_edges=((1, 2), (2, 3), (0, 3)))
    with pytest.raises(ConfigError):
        cfg.with_overrides(middle_edges=((1, 3),))
    # the long skip is optional; the trunk edges are not
    plain = cfg.with_overrides(dense_edges=((1, 2), (2, 3)))
    assert plain.dense_edges == ((1, 2), (2, 3))


def test_config_dict_roundtrip():
    for cfg in (
        default_config(),
        default_config(attention="none", block_topology="sequential"),
        small_config(),
        tiny_config(),
    ):
        assert config_from_dict(config_to_dict(cfg)) == cfg


# ---------------------------------------------------------------------------
# Functional ops against the loop oracles.
# ---------------------------------------------------------------------------

def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        h, w = rng.integers(2, 8, size=2)
        cin, cout = rng.integers(1, 4, size=2)
        k = int(rng.choice([1, 3, 5]))
        x = rng.normal(size=(h, w, cin))
        wts = rng.normal(size=(k, k, cin, cout))
        b = rng.normal(size=cout)
        got = conv2d_forward(x[None], ConvSpec2D((k, k), int(cout)), wts, b)[0]
        want = np.maximum(conv2d_loop(x, wts, b), 0.0)  # ops fold in the ReLU
        assert np.abs(got - want).max() < 1e-10


def test_conv3d_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        h, w, d = rng.integers(2, 6, size=3)
        cin, cout = rng.integers(1, 3, size=2)
        kh = int(rng.choice([1, 3]))
        kd = int(rng.choice([1, 3, 5]))
        x = rng.normal(size=(h, w, d, cin))
        wts = rng.normal(size=(kh, kh, kd, cin, cout))
        b = rng.normal(size=cout)
        got = conv3d_forward(x[None], ConvSpec3D((kh, kh, kd), int(cout)), wts, b)[0]
        want = np.maximum(conv3d_loop(x, wts, b), 0.0)
        assert np.abs(got - want).max() < 1e-10


def test_conv_forward_shape_checks():
    x = np.zeros((1, 4, 4, 2))
    with pytest.raises(WiringError):
        conv2d_forward(x, ConvSpec2D((3, 3), 4), np.zeros((3, 3, 3, 4)))
    with pytest.raises(WiringError):
        conv2d_forward(x, ConvSpec2D((3, 3), 4), np.zeros((5, 5, 2, 4)))
    x3 = np.zeros((1, 4, 4, 3, 2))
    with pytest.raises(WiringError):
        conv3d_forward(x3, ConvSpec3D((3, 3, 3), 4), np.zeros((3, 3, 3, 2, 5)))


def test_bridge_fold_is_slice_major():
    # feature value encodes (slice, channel) so fold order is visible
    d, c = 3, 2
    x = np.zeros((1, 1, 1, d, c))
    for di in range(d):
        for ci in range(c):
            x[0, 0, 0, di, ci] = 10 * di + ci
    folded = bridge_3d_to_2d(x, pool=(1, 1))[0, 0, 0]
    want = [10 * di + ci for di in range(d) for ci in range(c)]
    assert folded.tolist() == want


def test_bridge_pooling_matches_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 5, 4, 3))
    out = bridge_3d_to_2d(x, pool=(3, 3))
    assert out.shape == (2, 6, 5, 12)
    for n in range(2):
        want = maxpool2d_same_loop(x[n].reshape(6, 5, 12), 3)
        assert np.abs(out[n] - want).max() < 1e-12
    with pytest.raises(WiringError):
        bridge_3d_to_2d(np.zeros((2, 6, 5, 4)))


# ---------------------------------------------------------------------------
# Attention fusion.
# ---------------------------------------------------------------------------

def test_fuse_none_is_plain_concat():
    rng = np.random.default_rng(3)
    trunk = rng.normal(size=(2, 4, 4, 5))
    skip = rng.normal(size=(2, 4, 4, 3))
    out = attention_fuse(trunk, skip, AttentionSpec(kind="none"))
    assert np.array_equal(out, np.concatenate([trunk, skip], axis=-1))


def _saturate(module, value):
    # sigmoid(+-1000) is exactly 1.0 / 0.0 in both float widths
    with torch.no_grad():
        if hasattr(module, "excite"):
            module.excite.weight.zero_()
            module.excite.bias.fill_(value)
        if hasattr(module, "spatial"):
            module.spatial.weight.zero_()
            module.spatial.bias.fill_(value)


@pytest.mark.parametrize("dims", [2, 3])
def test_fuse_open_gates_pass_skip_through(dims):
    rng = np.random.default_rng(4)
    shape = (2, 4, 4, 5)[: dims + 1] + (6,)
    trunk = rng.normal(size=shape)
    skip = rng.normal(size=shape)  # equal widths: no adapter in the way
    module = AttentionFuse(6, 6, AttentionSpec(kind="both"), dims)
    assert module.adapter is None
    assert module.out_channels == 12
    _saturate(module, 1000.0)
    out = attention_fuse(trunk, skip, module)
    assert np.allclose(out, np.concatenate([trunk, skip], axis=-1), atol=1e-6)


def test_fuse_closed_channel_gate_zeroes_skip():
    rng = np.random.default_rng(5)
    trunk = rng.normal(size=(1, 4, 4, 6))
    skip = rng.normal(size=(1, 4, 4, 6))
    module = AttentionFuse(6, 6, AttentionSpec(kind="channel"), 2)
    _saturate(module, -1000.0)
    out = attention_fuse(trunk, skip, module)
    assert np.array_equal(out[..., :6], trunk)
    assert np.all(out[..., 6:] == 0.0)


def test_fuse_adapter_lifts_width_mismatch():
    module = AttentionFuse(7, 3, AttentionSpec(kind="both"), 2)
    assert module.adapter is not None
    assert module.out_channels == 14  # skip lifted to the trunk width
    same = AttentionFuse(7, 3, AttentionSpec(kind="none"), 2)
    assert same.adapter is None and same.out_channels == 10


def test_fuse_gates_stay_in_unit_interval():
    rng = np.random.default_rng(6)
    trunk = rng.normal(size=(2, 5, 5, 4)) * 10
    skip = rng.normal(size=(2, 5, 5, 4)) * 10
    out = attention_fuse(trunk, skip, AttentionSpec(kind="both"), seed=9)
    gated = out[..., 4:]
    assert np.all(np.abs(gated) <= np.abs(skip) + 1e-9)
    assert np.array_equal(out[..., :4], trunk)


def test_fuse_extent_mismatch():
    with pytest.raises(WiringError):
        attention_fuse(
            np.zeros((1, 4, 4, 2)), np.zeros((1, 5, 5, 2)), AttentionSpec()
        )


# ---------------------------------------------------------------------------
# Blocks and stages.
# ---------------------------------------------------------------------------

def test_parallel_block_concatenates_branches():
    spec = BlockSpec(
        (ConvSpec2D((3, 3), 4), ConvSpec2D((3, 3), 3), ConvSpec2D((1, 1), 2)),
        AttentionSpec(kind="none"),
    )
    block = InceptionBlock(5, spec, topology="parallel")
    assert block.out_channels == 9
    assert block.mid_channels == 3
    assert block.conv_layer_count == 3
    out, mid = block(torch.zeros(2, 5, 6, 6))
    assert out.shape == (2, 9, 6, 6)
    assert mid.shape == (2, 3, 6, 6)


def test_sequential_block_chains_branches():
    spec = BlockSpec(
        (ConvSpec2D((3, 3), 4), ConvSpec2D((3, 3), 3), ConvSpec2D((1, 1), 2)),
        AttentionSpec(kind="none"),
    )
    block = InceptionBlock(5, spec, topology="sequential")
    assert block.out_channels == 2  # last branch wins
    out, mid = block(torch.zeros(2, 5, 6, 6))
    assert out.shape == (2, 2, 6, 6)
    assert mid.shape == (2, 3, 6, 6)


def test_single_branch_block_has_no_middle():
    spec = BlockSpec((ConvSpec2D((3, 3), 4),), AttentionSpec())
    block = InceptionBlock(5, spec, prev_mid_channels=3)
    assert block.mid_fuse is None and block.mid_channels is None


def test_default_stage_channel_ledger():
    cfg = default_config()
    stage = DenseStage(
        1, cfg.blocks_3d, "parallel", cfg.dense_edges, cfg.middle_edges
    )
    assert stage.block_out_channels == (60, 70, 100)
    # long skip lifts 60 -> 70 and concatenates with block 2's output
    assert stage.fuse13.out_channels == 140
    # middle links lift prev 20 wide onto branch-2 inputs
    assert stage.block2.mid_fuse.out_channels == 120
    assert stage.block3.mid_fuse.out_channels == 280
    stage2d = DenseStage(
        1500, cfg.blocks_2d, "parallel", cfg.dense_edges, cfg.middle_edges
    )
    assert stage2d.block_out_channels == (112, 112, 112)
    assert stage2d.fuse13.out_channels == 224  # equal widths: no adapter
    assert stage2d.fuse13.adapter is None


def test_stage_without_long_skip():
    cfg = default_config().with_overrides(dense_edges=((1, 2), (2, 3)))
    stage = DenseStage(
        1, cfg.blocks_3d, "parallel", cfg.dense_edges, cfg.middle_edges
    )
    assert stage.fuse13 is None
    x = torch.zeros(1, 1, 15, 9, 9)
    y1, y2, y3 = stage(x)
    assert y3.shape[1] == 100


# ---------------------------------------------------------------------------
# Whole models.
# ---------------------------------------------------------------------------

def test_model_shapes_and_conv_counts():
    cfg = default_config(class_count=16)
    rng = np.random.default_rng(7)
    batch = rng.normal(size=(2, 9, 9, 15))
    for kind, convs in (("afnet", 19), ("inception2d", 10), ("inception3d", 10)):
        model = build_model(kind, cfg, seed=0)
        assert model.conv_layer_count == convs
        probs = forward(model, batch)
        assert probs.shape == (2, 16)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
        assert np.all(probs >= 0)


def test_model_rejects_wrong_patch_extent():
    model = build_model("afnet", tiny_config(), seed=0)
    with pytest.raises(WiringError):
        model(torch.zeros(1, 7, 7, 4))


@pytest.mark.parametrize("attention", ["both", "channel", "spatial", "none"])
@pytest.mark.parametrize("topology", ["parallel", "sequential"])
def test_param_count_matches_closed_form(attention, topology):
    cfg = default_config(attention=attention, block_topology=topology)
    for kind, name in (
        ("afnet", "hybrid"),
        ("inception2d", "cnn2d"),
        ("inception3d", "cnn3d"),
    ):
        want = count_params_closed_form(
            kind=attention, topology=topology, model=name
        )
        assert count_parameters(cfg, kind) == want


def test_param_count_closed_form_off_default_shape():
    cfg = default_config(patch_size=11, components=10, class_count=9)
    want = count_params_closed_form(
        patch=11, bands=10, classes=9, model="hybrid"
    )
    assert count_parameters(cfg, "afnet") == want


def test_init_is_seed_deterministic():
    cfg = tiny_config()
    a = build_model("afnet", cfg, seed=5)
    b = build_model("afnet", cfg, seed=5)
    c = build_model("afnet", cfg, seed=6)
    for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), n
    assert any(
        not torch.equal(pa, pc)
        for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
    )
    assert a.init_seed == 5


def test_init_bounds_and_zero_biases():
    model = build_model("afnet", default_config(), seed=0)
    for m in model.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.Conv3d, torch.nn.Linear)):
            bound = (6.0 / m.weight[0].numel()) ** 0.5
            w = m.weight.detach()
            assert float(w.abs().max()) <= bound
            assert float(w.std()) > 0
            assert float(m.bias.detach().abs().max()) == 0.0


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    model = build_model("afnet", tiny_config(), seed=4)
    stem = tmp_path / "ckpt"
    header = save_checkpoint(
        stem, model, epoch=7, metrics={"oa": 0.5},
        optimizer_state={"0.step": torch.tensor(3.0)},
    )
    assert header == stem.with_suffix(".json")
    back, manifest, opt = load_checkpoint(stem)
    assert manifest["epoch"] == 7
    assert manifest["metrics"] == {"oa": 0.5}
    assert manifest["model"] == "afnet"
    assert config_from_dict(manifest["config"]) == tiny_config()
    assert opt["0.step"] == 3.0
    want = model.state_dict()
    got = back.state_dict()
    for name in want:
        assert torch.equal(want[name], got[name]), name
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 5, 5, 4))
    assert np.array_equal(forward(model, x), forward(back, x))


def test_checkpoint_double_roundtrip(tmp_path):
    model = build_model("afnet", tiny_config(), seed=4).double()
    save_checkpoint(tmp_path / "w", model)
    back, _, _ = load_checkpoint(tmp_path / "w")
    assert next(back.parameters()).dtype == torch.float64
    for name, p in model.state_dict().items():
        assert torch.equal(p, back.state_dict()[name])


def test_checkpoint_corruption_errors(tmp_path):
    model = build_model("inception2d", tiny_config(), seed=1)
    save_checkpoint(tmp_path / "c", model)
    blob = (tmp_path / "c.params").read_bytes()
    (tmp_path / "c.params").write_bytes(blob[:-8])
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "c")
    (tmp_path / "c.json").write_text('{"format": "something-else"}')
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "c")


def test_build_model_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        build_model("resnet", tiny_config())
