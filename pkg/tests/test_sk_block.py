import numpy as np
import pytest
from pydantic import ValidationError

from sknet.core import ops
from sknet.core.errors import ConfigError
from sknet.core.tensor import Tensor
from sknet.models.sk_block import (
    K1,
    K3,
    K5,
    K7,
    AttentionRecorder,
    PathSpec,
    SEConfig,
    SKConfig,
    fuse,
    init_se_params,
    init_sk_params,
    init_unit,
    se_branch,
    select,
    sk_conv_forward,
    sk_unit_forward,
    split,
)
from sknet.services.gradcheck import check_unit, unit_config


def _sk(channels=8, **kwargs):
    kwargs.setdefault("groups", 4)
    kwargs.setdefault("min_dim", 4)
    return SKConfig(channels=channels, **kwargs)


class TestConfig:
    def test_fuse_dim_uses_floor(self):
        assert SKConfig(channels=128).fuse_dim() == 32
        assert SKConfig(channels=1024).fuse_dim() == 64

    def test_attention_needs_two_paths(self):
        with pytest.raises(ValidationError):
            SKConfig(paths=(K3,))
        assert SKConfig(paths=(K3,), aggregation="naive_sum").num_paths == 1

    def test_channels_must_divide_groups(self):
        with pytest.raises(ValidationError):
            SKConfig(groups=32, channels=48)

    def test_per_path_groups_override(self):
        cfg = SKConfig(paths=(K3, PathSpec(kernel=5, groups=64)), channels=256)
        assert cfg.path_groups(0) == 32 and cfg.path_groups(1) == 64
        assert cfg.path_geometry(1, 256).params() == 256 * 4 * 25

    def test_dilated_one_by_one_rejected(self):
        with pytest.raises(ValidationError):
            PathSpec(kernel=1, dilation=2)

    def test_extents(self):
        assert [p.extent for p in (K1, K3, K5, K7)] == [1, 3, 5, 7]

    def test_fuse_dim_needs_channels(self):
        with pytest.raises(ConfigError):
            SKConfig().fuse_dim()

    def test_se_inner_must_be_positive(self):
        with pytest.raises(ConfigError):
            SEConfig(reduction=16, channels=8).inner()


class TestSplitFuseSelect:
    def test_split_keeps_shape_across_dilations(self, rng):
        cfg = _sk(paths=(K3, K5, K7))
        params = init_sk_params(cfg, 8, rng)
        paths = split(Tensor(rng.standard_normal((2, 8, 9, 9))), cfg, params)
        assert [p.shape for p in paths] == [(2, 8, 9, 9)] * 3

    def test_stride_applies_to_every_path(self, rng):
        cfg = _sk()
        params = init_sk_params(cfg, 8, rng, stride=2)
        out = sk_conv_forward(Tensor(rng.standard_normal((2, 8, 8, 8))), cfg, params)
        assert out.shape == (2, 8, 4, 4)

    def test_fuse_and_select_shapes(self, rng):
        cfg = _sk(channels=16, reduction=2)
        params = init_sk_params(cfg, 16, rng)
        paths = split(Tensor(rng.standard_normal((3, 16, 5, 5))), cfg, params)
        z = fuse(paths, params, training=True)
        assert z.shape == (3, 8)
        v, att = select(paths, z, params)
        assert v.shape == (3, 16, 5, 5)
        assert att.shape == (3, 2, 16)

    def test_naive_sum_is_plain_addition(self, rng):
        cfg = _sk(aggregation="naive_sum")
        params = init_sk_params(cfg, 8, rng)
        x = Tensor(rng.standard_normal((2, 8, 5, 5)))
        a, b = split(x, cfg, params)
        np.testing.assert_array_equal(sk_conv_forward(x, cfg, params).data, a.data + b.data)
        assert params.fuse is None and params.select is None

    def test_zero_select_gives_uniform_attention(self, rng):
        cfg = _sk()
        params = init_sk_params(cfg, 8, rng)
        for fc in params.select:
            fc.weight.data[:] = 0.0
        x = Tensor(rng.standard_normal((2, 8, 5, 5)))
        a, b = split(x, cfg, params)
        recorder = AttentionRecorder()
        out = sk_conv_forward(x, cfg, params, record=recorder, unit="SK_2_1")
        np.testing.assert_allclose(out.data, 0.5 * (a.data + b.data), rtol=0, atol=1e-15)
        assert recorder.entries[0][0] == "SK_2_1"
        np.testing.assert_array_equal(recorder.entries[0][1], 0.5)

    def test_split_matches_composed_primitives(self, rng):
        cfg = _sk(paths=(K3, PathSpec(kernel=3, dilation=2)))
        params = init_sk_params(cfg, 8, rng)
        x = Tensor(rng.standard_normal((2, 8, 6, 6)))
        for got, conv_bn in zip(split(x, cfg, params), params.paths):
            want = ops.relu(ops.batch_norm(ops.conv2d(x, conv_bn.weight, conv_bn.geometry), conv_bn.bn, False))
            np.testing.assert_array_equal(got.data, want.data)

    def test_select_matches_per_element_loop(self, rng):
        cfg = _sk(paths=(K3, K5, K7))
        params = init_sk_params(cfg, 8, rng)
        paths = split(Tensor(rng.standard_normal((2, 8, 7, 7))), cfg, params)
        z = fuse(paths, params)
        v, att = select(paths, z, params)
        logits = np.stack([z.data @ fc.weight.data.T for fc in params.select], axis=1)
        want = np.zeros(paths[0].shape)
        for n in range(2):
            for c in range(8):
                e = np.exp(logits[n, :, c] - logits[n, :, c].max())
                a = e / e.sum()
                np.testing.assert_allclose(att.data[n, :, c], a, rtol=0, atol=1e-14)
                want[n, c] = sum(a[m] * paths[m].data[n, c] for m in range(3))
        np.testing.assert_allclose(v.data, want, rtol=0, atol=1e-12)

    def test_two_paths_reduce_to_a_sigmoid_gate(self, rng):
        cfg = _sk(channels=16, reduction=2)
        params = init_sk_params(cfg, 16, rng)
        params.select[1].weight.data[:] = 0.0
        paths = split(Tensor(rng.standard_normal((3, 16, 5, 5))), cfg, params)
        z = fuse(paths, params, training=True)
        _, att = select(paths, z, params)
        gate = ops.sigmoid(Tensor(z.data @ params.select[0].weight.data.T)).data
        np.testing.assert_allclose(att.data[:, 0], gate, rtol=0, atol=1e-14)
        np.testing.assert_allclose(att.data[:, 1], 1.0 - gate, rtol=0, atol=1e-14)

    def test_output_stays_inside_the_path_envelope(self, rng):
        cfg = _sk(paths=(K3, K5, K7))
        params = init_sk_params(cfg, 8, rng)
        x = Tensor(rng.standard_normal((2, 8, 6, 6)))
        paths = np.stack([p.data for p in split(x, cfg, params)])
        v = sk_conv_forward(x, cfg, params).data
        assert np.all(v >= paths.min(axis=0) - 1e-12)
        assert np.all(v <= paths.max(axis=0) + 1e-12)

    def test_recorder_stores_copies(self, rng):
        recorder = AttentionRecorder()
        att = np.full((1, 2, 3), 0.5)
        recorder.append("u", att)
        att[:] = 0.0
        assert recorder.entries[0][1][0, 0, 0] == 0.5


@pytest.mark.slow
def test_attention_sums_to_one_over_random_forwards():
    rng = np.random.default_rng(2024)
    configs = [_sk(paths=(K3, K5)), _sk(paths=(K3, K5, K7)), _sk(paths=(K3, K1), channels=16)]
    for trial in range(1000):
        cfg = configs[trial % len(configs)]
        params = init_sk_params(cfg, cfg.channels, rng)
        for fc in params.select:
            fc.weight.data *= rng.uniform(0.1, 20.0)
        recorder = AttentionRecorder()
        x = Tensor(rng.standard_normal((2, cfg.channels, 4, 4)) * rng.uniform(0.1, 10.0))
        sk_conv_forward(x, cfg, params, record=recorder, training=bool(trial % 2))
        att = recorder.entries[0][1]
        assert att.shape == (2, cfg.num_paths, cfg.channels)
        np.testing.assert_allclose(att.sum(axis=1), 1.0, rtol=0, atol=1e-9)
        assert np.all(att >= 0.0)


class TestSE:
    def test_gate_in_unit_interval(self, rng):
        cfg = SEConfig(reduction=4, channels=16)
        params = init_se_params(cfg, rng)
        x = rng.standard_normal((2, 16, 3, 3))
        out = se_branch(Tensor(x), cfg, params).data
        ratio = out / x
        assert np.all((ratio > 0) & (ratio < 1))
        # one gate per (sample, channel)
        np.testing.assert_allclose(ratio, ratio[:, :, :1, :1] * np.ones_like(ratio))

    def test_gate_shapes(self, rng):
        params = init_se_params(SEConfig(reduction=16, channels=256), rng)
        assert params.fc1.weight.shape == (16, 256) and params.fc1.bias.shape == (16,)
        assert params.fc2.weight.shape == (256, 16) and params.fc2.bias.shape == (256,)

    def test_zero_weights_halve_the_input(self, rng):
        cfg = SEConfig(reduction=4, channels=16)
        params = init_se_params(cfg, rng)
        for fc in (params.fc1, params.fc2):
            fc.weight.data[:] = 0.0
            fc.bias.data[:] = 0.0
        x = rng.standard_normal((2, 16, 3, 3))
        np.testing.assert_array_equal(se_branch(Tensor(x), cfg, params).data, x / 2)


class TestUnit:
    def test_projection_when_shape_changes(self, rng):
        config = unit_config(8, stride=2)
        params = init_unit(config, rng)
        assert config.projection and params.shortcut is not None
        out = sk_unit_forward(Tensor(rng.standard_normal((2, 8, 6, 6))), config, params)
        assert out.shape == (2, 16, 3, 3)
        assert np.all(out.data >= 0)

    def test_identity_shortcut(self, rng):
        base = unit_config(8)
        config = type(base)(base.name, 16, 8, 16, 1, base.middle)
        assert not config.projection
        assert init_unit(config, rng).shortcut is None

    def test_parameter_names(self, rng):
        names = [n for n, _ in init_unit(unit_config(8), rng).named_parameters("SK_2_1")]
        assert "SK_2_1.conv2.path1.weight" in names
        assert "SK_2_1.conv2.select1.weight" in names
        assert "SK_2_1.conv2.fuse_bn.gamma" in names
        assert "SK_2_1.shortcut.weight" in names

    @pytest.mark.parametrize("stride", [1, 2])
    def test_zero_last_gamma_passes_the_shortcut(self, rng, stride):
        config = unit_config(8, stride=stride)
        params = init_unit(config, rng)
        params.conv3.bn.gamma.data[:] = 0.0
        x = Tensor(rng.standard_normal((2, 8, 6, 6)))
        out = sk_unit_forward(x, config, params)
        np.testing.assert_array_equal(out.data, ops.relu(params.shortcut(x, training=False)).data)

    def test_zero_last_gamma_passes_the_identity(self, rng):
        base = unit_config(8)
        config = type(base)(base.name, 16, 8, 16, 1, base.middle)
        params = init_unit(config, rng)
        params.conv3.bn.gamma.data[:] = 0.0
        x = rng.standard_normal((2, 16, 5, 5))
        np.testing.assert_array_equal(sk_unit_forward(Tensor(x), config, params).data, np.maximum(x, 0.0))


@pytest.mark.slow
@pytest.mark.parametrize("aggregation", ["attention", "naive_sum"])
def test_unit_gradient_check(aggregation):
    report = check_unit(channels=8, aggregation=aggregation, seed=5)
    assert report.passed(1e-5), report.max_rel_error
    assert "input" in report.max_rel_error


@pytest.mark.slow
def test_strided_unit_gradient_check():
    assert check_unit(channels=8, seed=9, stride=2).passed(1e-5)
