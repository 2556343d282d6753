import csv
import io
import json

import pytest

from sknet.models.arch import PRESETS, iter_units, sknet50_variant
from sknet.models.sk_block import K3, K5, PathSpec
from sknet.services.cost import (
    compare,
    count_flops,
    count_params,
    dilation_group_grid,
    kernel_combination_grid,
    sk_overhead,
)


@pytest.mark.parametrize(
    "arch, params_m, tol",
    [
        ("resnext50", 25.0, 0.05),
        ("sknet50", 27.5, 0.05),
        ("senet50", 27.7, 0.15),
        ("sknet26", 16.8, 0.1),
    ],
)
def test_parameter_counts(arch, params_m, tol):
    assert count_params(PRESETS[arch]).params_m == pytest.approx(params_m, abs=tol)


def test_sknet101_parameter_count():
    # 0.164M under the published 48.9M, outside the 0.15M the other presets are held to.
    # Pinned exactly so the gap cannot drift.
    report = count_params(PRESETS["sknet101"])
    assert report.total_params == 48_736_040
    assert report.params_m == pytest.approx(48.9, abs=0.165)


@pytest.mark.parametrize("arch, gflops", [("resnext50", 4.24), ("sknet50", 4.47), ("sknet101", 8.46)])
def test_multiply_adds_at_224(arch, gflops):
    assert count_flops(PRESETS[arch]).gflops == pytest.approx(gflops, abs=0.05)


def test_count_params_has_no_madds():
    report = count_params(PRESETS["sknet50"])
    assert report.resolution is None and report.total_madds == 0
    assert report.total_params == count_flops(PRESETS["sknet50"]).total_params


def test_params_do_not_depend_on_resolution():
    spec = PRESETS["sknet50"]
    assert count_flops(spec, 224).total_params == count_flops(spec, 320).total_params


def test_madds_scale_with_area():
    spec = PRESETS["resnext50"]
    small, large = count_flops(spec, 224).total_madds, count_flops(spec, 448).total_madds
    assert large / small == pytest.approx(4.0, rel=0.01)


def test_sk_overhead_accounts_for_the_whole_difference():
    units = iter_units(PRESETS["sknet50"])
    overhead = sum(sk_overhead(u.middle, u.width) for u in units)
    diff = count_params(PRESETS["sknet50"]).total_params - count_params(PRESETS["resnext50"]).total_params
    assert overhead == diff


def test_select_rows_are_per_unit():
    rows = {r.name: r for r in count_flops(PRESETS["sknet50"]).rows}
    # C=128, d=max(128 // 16, 32)=32, two paths
    assert rows["SK_2_1.conv2.select"].params == 2 * 128 * 32
    assert rows["SK_2_1.conv2.fuse"].params == 32 * 128
    assert rows["SK_2_1.conv2.fuse_bn"].params == 64
    assert "SK_2_1.conv2.path1.bn" in rows


class TestComparison:
    def test_sknet_over_resnext_ratios(self):
        cmp = compare([PRESETS["resnext50"], PRESETS["sknet50"]])
        param_ratio, flop_ratio = cmp.ratios(cmp.reports[1])
        assert param_ratio == pytest.approx(1.098, abs=0.005)
        assert flop_ratio == pytest.approx(1.055, abs=0.005)
        assert cmp.ratios(cmp.baseline) == (1.0, 1.0)

    def test_empty_comparison(self):
        with pytest.raises(ValueError):
            compare([])

    def test_renderers(self):
        cmp = compare([PRESETS["resnext50"], PRESETS["sknet50"]])
        data = json.loads(cmp.to_json())
        assert data["baseline"] == "resnext50" and data["resolution"] == 224
        assert [r["arch"] for r in data["archs"]] == ["resnext50", "sknet50"]
        rows = list(csv.DictReader(io.StringIO(cmp.to_csv())))
        assert rows[1]["arch"] == "sknet50" and float(rows[0]["param_ratio"]) == 1.0
        table = cmp.to_table()
        assert "sknet50" in table and "relative to resnext50" in table


class TestAblationGrids:
    def test_dilation_grid(self):
        grid = dilation_group_grid()
        assert len(grid) == 5
        reports = [count_flops(spec) for spec in grid]
        base = count_flops(PRESETS["sknet50"])
        # dilation changes the receptive field, not the cost
        for report in reports[:3]:
            assert report.total_params == base.total_params
            assert report.total_madds == base.total_madds
        assert reports[3].params_m == pytest.approx(28.1, rel=0.02)
        assert reports[3].gflops == pytest.approx(4.56, rel=0.02)

    def test_five_by_five_path_is_costlier_than_dilated_three(self):
        wide = count_params(sknet50_variant(second_path=PathSpec(kernel=5, groups=64)))
        dilated = count_params(sknet50_variant(second_path=PathSpec(kernel=3, dilation=2)))
        assert wide.total_params > dilated.total_params

    def test_kernel_grid(self):
        grid = kernel_combination_grid()
        assert len(grid) == 11
        assert len({spec.name for spec in grid}) == 11
        naive = [s for s in grid if s.sk.aggregation == "naive_sum"]
        assert len(naive) == 7

    def test_single_three_by_three_is_resnext(self):
        spec = sknet50_variant(paths=(K3,), aggregation="naive_sum")
        assert count_flops(spec).total_params == count_flops(PRESETS["resnext50"]).total_params
        assert count_flops(spec).total_madds == count_flops(PRESETS["resnext50"]).total_madds

    def test_attention_costs_little_over_naive_sum(self):
        naive = count_flops(sknet50_variant(paths=(K3, K5), aggregation="naive_sum"))
        attention = count_flops(sknet50_variant(paths=(K3, K5)))
        assert attention.total_params > naive.total_params
        assert attention.total_madds / naive.total_madds < 1.01


class TestReportRenderers:
    def test_json(self):
        data = json.loads(count_flops(PRESETS["resnext50"]).to_json())
        assert data["arch"] == "resnext50"
        assert sum(r["params"] for r in data["rows"]) == data["total_params"]

    def test_csv_total_row(self):
        report = count_flops(PRESETS["resnext50"])
        lines = report.to_csv().splitlines()
        assert lines[0] == "name,params,madds"
        assert lines[-1] == f"total,{report.total_params},{report.total_madds}"

    def test_table(self):
        text = count_flops(PRESETS["sknet26"]).to_table()
        assert text.startswith("sknet26 @ 224x224")
        assert "SK_2_1.conv2.select" in text
        assert "GFLOPs" in text.splitlines()[-1]
