"""Backbone components: ghost modules, SE gating, bottlenecks, the
staged network, and its configuration plumbing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostvlad import checkpoint
from ghostvlad.ghostnet import (
    DILATION_SCHEMES,
    BottleneckEntry,
    GhostBottleneck,
    GhostCNN,
    GhostCNNConfig,
    GhostModule,
    GhostModuleConfig,
    SEBlock,
    default_table1_config,
    effective_kernel,
    ghost_bottleneck_forward,
    ghost_module_forward,
    ghostcnn_forward,
    make_divisible,
    parse_dilation_scheme,
    receptive_field,
    se_block_forward,
)
from ghostvlad.tensor import Tensor, batchnorm2d, relu
from oracles import naive_conv2d


def rng_for(name: str) -> np.random.Generator:
    return np.random.default_rng(abs(hash(name)) % (2**32))


class TestReceptiveField:
    def test_effective_kernel_examples(self):
        assert effective_kernel(3, 1) == 3
        assert effective_kernel(3, 2) == 5
        assert effective_kernel(3, 5) == 11

    @given(st.integers(1, 9), st.integers(1, 9))
    def test_effective_kernel_formula(self, k, r):
        assert effective_kernel(k, r) == (k - 1) * r + 1

    def test_single_layer_matches_effective_kernel(self):
        for k, r in [(3, 1), (3, 2), (3, 3), (5, 2)]:
            assert receptive_field([(k, r, 1)]) == effective_kernel(k, r)

    def test_stacked_composition(self):
        # 3x3 then a dilated 3x3: 3 + (ek - 1)
        assert receptive_field([(3, 1, 1), (3, 2, 1)]) == 7
        assert receptive_field([(3, 1, 1), (3, 3, 1)]) == 9
        # stride widens the jump for later layers
        assert receptive_field([(3, 1, 2), (3, 1, 1)]) == 7

    def test_dilation_widens_rf_without_params(self):
        base = receptive_field([(3, 1, 1)] * 4)
        dilated = receptive_field([(3, 5, 1)] * 4)
        assert dilated > base


class TestGhostModule:
    def test_ratio_one_is_plain_conv_bn_relu(self):
        cfg = GhostModuleConfig(6, 10, ratio=1)
        module = GhostModule(cfg, rng_for("gm-plain"))
        assert module.cheap is None
        x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 5, 5)).astype(np.float32))
        out = ghost_module_forward(x, module, training=False)
        direct = relu(batchnorm2d(module.primary.conv(x), module.primary.bn.state, training=False))
        np.testing.assert_array_equal(out.data, direct.data)

    def test_output_layout_and_per_channel_cheap_oracle(self):
        cfg = GhostModuleConfig(16, 32, ratio=2)
        module = GhostModule(cfg, rng_for("gm-oracle"))
        m = cfg.intrinsic_channels
        x = Tensor(np.random.default_rng(1).normal(size=(1, 16, 8, 8)).astype(np.float32))
        out = ghost_module_forward(x, module, training=False)
        assert out.shape == (1, 32, 8, 8)

        intrinsic = relu(batchnorm2d(module.primary.conv(x), module.primary.bn.state, training=False))
        np.testing.assert_array_equal(out.data[:, :m], intrinsic.data)

        # each ghost channel is one depthwise conv of one intrinsic map
        cheap_w = module.cheap.conv.weight.data
        bn = module.cheap.bn.state
        for i in range(m):
            ref = naive_conv2d(
                intrinsic.data[:, i : i + 1].astype(np.float64),
                cheap_w[i : i + 1].astype(np.float64),
                None,
                stride=(1, 1),
                padding=(1, 1),
                dilation=(1, 1),
                groups=1,
            )[0, 0]
            scale = bn.gamma.data[i] / np.sqrt(bn.running_var[i] + bn.eps)
            ref = np.maximum(ref * scale + bn.beta.data[i] - bn.running_mean[i] * scale, 0.0)
            np.testing.assert_allclose(out.data[0, m + i], ref, rtol=1e-5, atol=1e-5)

    def test_parameter_counts_against_plain_conv(self):
        module = GhostModule(GhostModuleConfig(16, 32, ratio=2), rng_for("gm-params"))
        assert module.primary.conv.weight.data.size == 256
        assert module.cheap.conv.weight.data.size == 144
        plain = 16 * 32  # the 1x1 conv the ghost pair replaces
        assert module.primary.conv.weight.data.size + module.cheap.conv.weight.data.size < plain

    def test_dilated_cheap_op_preserves_shape(self):
        for r in (1, 2, 3, 5):
            module = GhostModule(GhostModuleConfig(4, 8, dilation=r), rng_for(f"gm-d{r}"))
            out = ghost_module_forward(Tensor(np.ones((1, 4, 12, 12), np.float32)), module)
            assert out.shape == (1, 8, 12, 12)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="divisible"):
            GhostModuleConfig(4, 9, ratio=2)
        with pytest.raises(ValueError, match="ratio"):
            GhostModuleConfig(4, 8, ratio=0)


class TestSEBlock:
    def test_saturated_gate_is_identity(self):
        block = SEBlock(4, 2, rng_for("se-sat"))
        for layer in (block.fc1, block.fc2):
            layer.weight.data[:] = 0
        block.fc2.bias.data[:] = 6.0  # pre-activation >= +3 everywhere
        x = Tensor(np.random.default_rng(2).normal(size=(2, 4, 3, 3)).astype(np.float32))
        np.testing.assert_array_equal(se_block_forward(x, block).data, x.data)

    def test_zero_input_stays_zero(self):
        block = SEBlock(8, 4, rng_for("se-zero"))
        out = se_block_forward(Tensor(np.zeros((1, 8, 4, 4), np.float32)), block)
        np.testing.assert_array_equal(out.data, 0)

    def test_two_channel_hand_case(self):
        # reduction 1, identity weights; pooled [2, -4]. The ReLU between
        # the pointwise convs clips the second channel's mid-activation to
        # 0, so the gates are hard_sigmoid([2, 0]) = [2/6 + 0.5, 0.5].
        block = SEBlock(2, 1, rng_for("se-hand"))
        eye = np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)
        block.fc1.weight.data = eye.copy()
        block.fc2.weight.data = eye.copy()
        block.fc1.bias.data[:] = 0
        block.fc2.bias.data[:] = 0
        x = np.empty((1, 2, 3, 3), np.float32)
        x[0, 0] = 2.0
        x[0, 1] = -4.0
        out = se_block_forward(Tensor(x), block).data
        np.testing.assert_allclose(out[0, 0], 2.0 * 0.8333, atol=1e-4)
        np.testing.assert_allclose(out[0, 1], -4.0 * 0.5, atol=1e-6)

    def test_rejects_indivisible_reduction(self):
        with pytest.raises(ValueError, match="divisible"):
            SEBlock(6, 4, rng_for("se-bad"))


class TestGhostBottleneck:
    def test_pure_shortcut_when_projection_is_zero(self):
        entry = BottleneckEntry(24, 48, 24, stride=1)
        block = GhostBottleneck(entry, rng_for("bn-id"))
        assert entry.has_identity_shortcut
        for name, param in block.gm2.named_parameters("gm2"):
            if name.endswith("conv.weight"):
                param.data[:] = 0
        x = Tensor(np.random.default_rng(3).normal(size=(1, 24, 6, 6)).astype(np.float32))
        out = ghost_bottleneck_forward(x, block, training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_stride_two_shape(self):
        entry = BottleneckEntry(24, 48, 40, stride=2)
        block = GhostBottleneck(entry, rng_for("bn-s2"))
        x = Tensor(np.random.default_rng(4).normal(size=(1, 24, 160, 120)).astype(np.float32))
        out = ghost_bottleneck_forward(x, block, training=False)
        assert out.shape == (1, 40, 80, 60)

    def test_composition_matches_manual_sequence(self):
        entry = BottleneckEntry(6, 12, 8, stride=2, se=True, dilation=1)
        block = GhostBottleneck(entry, rng_for("bn-comp"), se_reduction=4)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 6, 16, 16)).astype(np.float32))
        out = ghost_bottleneck_forward(x, block, training=False)
        main = block.gm1(x, False)
        main = block.down(main, False)
        main = block.se(main)
        main = block.gm2(main, False)
        short = block.shortcut_pw(block.shortcut_dw(x, False), False)
        np.testing.assert_array_equal(out.data, (main + short).data)

    def test_dilation_does_not_change_output_shape(self):
        shapes = set()
        for r in (1, 2, 3, 5):
            entry = BottleneckEntry(8, 16, 8, stride=1, dilation=r)
            block = GhostBottleneck(entry, rng_for(f"bn-d{r}"))
            out = ghost_bottleneck_forward(Tensor(np.ones((1, 8, 12, 12), np.float32)), block)
            shapes.add(tuple(out.shape))
        assert shapes == {(1, 8, 12, 12)}

    def test_entry_validation(self):
        with pytest.raises(ValueError, match="stride"):
            BottleneckEntry(4, 8, 4, stride=3)
        with pytest.raises(ValueError, match="expansion"):
            BottleneckEntry(4, 2, 4)


class TestDefaultConfig:
    def test_scheme_parsing(self):
        assert parse_dilation_scheme("1") == (1, 1)
        assert parse_dilation_scheme("5-2") == (5, 2)
        assert parse_dilation_scheme(3) == (3, 3)
        for bad in ("0", "a", "5-", "1-2-3", "-2"):
            with pytest.raises(ValueError):
                parse_dilation_scheme(bad)

    def test_stage_layout(self):
        cfg = default_table1_config()
        assert cfg.stem_channels == 24
        assert [len(s) for s in cfg.stages] == [2, 2, 2, 6, 4]
        assert cfg.final_channels == 960
        strides = [[e.stride for e in s] for s in cfg.stages]
        assert strides == [[1, 2], [1, 2], [1, 2], [1, 1, 1, 1, 1, 2], [1, 1, 1, 1]]
        se = [[int(e.se) for e in s] for s in cfg.stages]
        assert se == [[0, 0], [0, 1], [1, 0], [0, 0, 0, 1, 1, 1], [0, 1, 0, 1]]
        outs = [s[-1].out_channels for s in cfg.stages]
        assert outs == [40, 112, 160, 160, 160]

    def test_dilation_assignment(self):
        cfg = default_table1_config("5-2")
        for stage_idx, stage in enumerate(cfg.stages):
            want = 2 if stage_idx == 4 else 5
            for entry in stage:
                assert entry.dilation == (1 if entry.stride == 2 else want)

    def test_scheme_one_is_fully_undilated(self):
        assert all(e.dilation == 1 for e in default_table1_config("1").entries())

    def test_json_roundtrip(self):
        cfg = default_table1_config("5-3", channel_multiplier=0.25)
        assert GhostCNNConfig.from_json(cfg.to_json()) == cfg

    def test_multiplier_keeps_se_divisibility(self):
        cfg = default_table1_config(channel_multiplier=0.25)
        for entry in cfg.entries():
            assert entry.in_channels % 2 == 0
            assert entry.out_channels % 2 == 0
            if entry.se:
                assert entry.mid_channels % cfg.se_reduction == 0
        assert cfg.final_channels == 240

    def test_make_divisible(self):
        assert make_divisible(30, 4) == 32
        assert make_divisible(24, 2) == 24
        assert make_divisible(1, 2) == 2


class TestGhostCNN:
    def test_desk_forward_shape(self):
        model = GhostCNN(default_table1_config(), seed=0)
        out = ghostcnn_forward(Tensor(np.zeros((1, 3, 96, 128), np.float32)), model)
        assert out.shape == (1, 960, 3, 4)

    def test_doubling_input_doubles_output(self):
        model = GhostCNN(default_table1_config(channel_multiplier=0.25), seed=0)
        a = ghostcnn_forward(Tensor(np.zeros((1, 3, 96, 128), np.float32)), model)
        b = ghostcnn_forward(Tensor(np.zeros((1, 3, 192, 256), np.float32)), model)
        assert (a.shape[2] * 2, a.shape[3] * 2) == (b.shape[2], b.shape[3])

    def test_full_scale_stage_shapes(self):
        model = GhostCNN(default_table1_config(), seed=0)
        x = Tensor(np.zeros((1, 3, 480, 640), np.float32))
        out = model.stem(x, False)
        assert out.shape == (1, 24, 240, 320)
        expect = [(40, 120, 160), (112, 60, 80), (160, 30, 40), (160, 15, 20), (160, 15, 20)]
        for stage, (c, h, w) in zip(model.stages, expect):
            for block in stage:
                out = block(out, False)
            assert out.shape == (1, c, h, w)
        out = model.final(out, False)
        assert out.shape == (1, 960, 15, 20)

    def test_default_parameter_count_pinned(self):
        assert GhostCNN(default_table1_config(), seed=0).parameter_count() == 2_812_826

    def test_params_and_shapes_invariant_across_dilation_schemes(self):
        counts, shapes = set(), set()
        for scheme in DILATION_SCHEMES:
            model = GhostCNN(default_table1_config(scheme), seed=0)
            counts.add(model.parameter_count())
            out = ghostcnn_forward(Tensor(np.zeros((1, 3, 32, 32), np.float32)), model)
            shapes.add(tuple(out.shape))
        assert len(counts) == 1
        assert shapes == {(1, 960, 1, 1)}

    def test_input_validation(self):
        model = GhostCNN(default_table1_config(channel_multiplier=0.25), seed=0)
        with pytest.raises(ValueError, match="divisible by 32"):
            model(Tensor(np.zeros((1, 3, 100, 128), np.float32)))
        with pytest.raises(ValueError, match=r"\(N, 3, H, W\)"):
            model(Tensor(np.zeros((1, 4, 96, 128), np.float32)))

    def test_state_roundtrip_through_container(self, tmp_path):
        cfg = default_table1_config(channel_multiplier=0.25)
        model = GhostCNN(cfg, seed=3)
        x = Tensor(np.random.default_rng(6).normal(size=(2, 3, 32, 32)).astype(np.float32))
        model(x, training=True)  # move the running statistics off init
        path = tmp_path / "model.gdnv"
        checkpoint.save_arrays(path, model.state_arrays())

        other = GhostCNN(cfg, seed=99)
        other.load_state_arrays(checkpoint.load_arrays(path))
        np.testing.assert_array_equal(model(x).data, other(x).data)

    def test_seeded_init_is_deterministic(self):
        a = GhostCNN(default_table1_config(channel_multiplier=0.25), seed=5)
        b = GhostCNN(default_table1_config(channel_multiplier=0.25), seed=5)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_ghost_module_channel_split_property(s_minus, m, extra):
    ratio = s_minus + 1
    d = ratio * m
    cfg = GhostModuleConfig(extra, d, ratio=ratio)
    assert cfg.intrinsic_channels == m
    assert cfg.ghost_channels == d - m
