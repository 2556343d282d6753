"""
Analytic parameter and multiply-add counts, computed from an ArchSpec
without allocating tensors.

Conventions (these land ResNeXt-50 on 25.0M / 4.24 G):
  - conv params = Cout * (Cin / G) * k^2, no bias
  - BN counts gamma and beta (2C); running statistics are not parameters
  - fc params = Cout * Cin, plus Cout when biased (classifier, SE)
  - multiply-adds: conv = params * Hout * Wout, fc = Cout * Cin;
    BN, activations and pooling count as zero
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

from jinja2 import Environment, PackageLoader

from sknet.config import DEFAULT_RESOLUTION
from sknet.core.tensor import ConvGeometry
from sknet.models.arch import _POOL, ArchSpec, iter_units, sknet50_variant
from sknet.models.sk_block import K3, K5, K7, PathSpec, SKConfig, UnitConfig

logger = logging.getLogger(__name__)

_templates = Environment(
    loader=PackageLoader("sknet", "templates"),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)


@dataclass(frozen=True)
class CostRow:
    name: str
    params: int
    madds: int = 0


@dataclass
class CostReport:
    arch: str
    resolution: int | None
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_madds(self) -> int:
        return sum(r.madds for r in self.rows)

    @property
    def params_m(self) -> float:
        return self.total_params / 1e6

    @property
    def gflops(self) -> float:
        return self.total_madds / 1e9

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "resolution": self.resolution,
            "total_params": self.total_params,
            "total_madds": self.total_madds,
            "params_m": round(self.params_m, 2),
            "gflops": round(self.gflops, 2),
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "params", "madds"])
        for r in self.rows:
            writer.writerow([r.name, r.params, r.madds])
        writer.writerow(["total", self.total_params, self.total_madds])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        return _templates.get_template("cost_table.txt.j2").render(report=self, width=width)


# ---------------------------------------------------------------------------
# Layer walk
# ---------------------------------------------------------------------------


def _conv_rows(name: str, geom: ConvGeometry, out_size: int) -> Iterator[CostRow]:
    yield CostRow(name, geom.params(), geom.madds(out_size, out_size))
    yield CostRow(f"{name}.bn", 2 * geom.out_channels)


def _unit_rows(unit: UnitConfig, size: int) -> tuple[list[CostRow], int]:
    rows: list[CostRow] = []
    sk = unit.middle
    out_size = sk.path_geometry(0, unit.width, unit.stride).output_size(size)
    rows += _conv_rows(f"{unit.name}.conv1", ConvGeometry(unit.in_channels, unit.width, kernel=1), size)
    for m in range(sk.num_paths):
        rows += _conv_rows(
            f"{unit.name}.conv2.path{m}", sk.path_geometry(m, unit.width, unit.stride), out_size
        )
    if sk.attention:
        c, d = sk.channels, sk.fuse_dim()
        rows.append(CostRow(f"{unit.name}.conv2.fuse", d * c, d * c))
        rows.append(CostRow(f"{unit.name}.conv2.fuse_bn", 2 * d))
        rows.append(CostRow(f"{unit.name}.conv2.select", sk.num_paths * c * d, sk.num_paths * c * d))
    rows += _conv_rows(
        f"{unit.name}.conv3", ConvGeometry(unit.width, unit.out_channels, kernel=1), out_size
    )
    if unit.se is not None:
        c, inner = unit.out_channels, unit.se.inner()
        rows.append(CostRow(f"{unit.name}.se.fc1", inner * c + inner, inner * c))
        rows.append(CostRow(f"{unit.name}.se.fc2", c * inner + c, c * inner))
    if unit.projection:
        geom = ConvGeometry(unit.in_channels, unit.out_channels, kernel=1, stride=unit.stride)
        rows += _conv_rows(f"{unit.name}.shortcut", geom, out_size)
    return rows, out_size


def count_flops(spec: ArchSpec, resolution: int = DEFAULT_RESOLUTION) -> CostReport:
    """Per-layer parameters and multiply-adds for a square ``resolution`` input."""
    report = CostReport(spec.name, resolution)
    stem = spec.stem_geometry
    size = stem.output_size(resolution)
    report.rows += _conv_rows("stem.conv", stem, size)
    if spec.stem.pool:
        size = _POOL.output_size(size)
    for unit in iter_units(spec):
        rows, size = _unit_rows(unit, size)
        report.rows += rows
    features = spec.stages[-1].out_channels
    report.rows.append(CostRow("fc", spec.num_classes * features + spec.num_classes, spec.num_classes * features))
    logger.debug("%s @%d: %d params, %d madds", spec.name, resolution, report.total_params, report.total_madds)
    return report


def count_params(spec: ArchSpec) -> CostReport:
    """Per-layer parameter counts (multiply-add column left at zero)."""
    full = count_flops(spec, _minimum_resolution(spec))
    return CostReport(spec.name, None, [CostRow(r.name, r.params) for r in full.rows])


def _minimum_resolution(spec: ArchSpec) -> int:
    """Any input large enough for the stem works; parameter counts do not depend on it."""
    return max(spec.stem.kernel, 32)


def sk_overhead(config: SKConfig, in_channels: int) -> int:
    """Extra parameters of an SK convolution over its first path alone.

    (M-1) additional path convs with their BN, the fuse fc W (d x C) with its
    BN, and the M select matrices (C x d each).
    """
    c = config.channels
    extra = 0
    for m in range(1, config.num_paths):
        extra += config.path_geometry(m, in_channels).params() + 2 * c
    if config.attention:
        d = config.fuse_dim()
        extra += d * c + 2 * d + config.num_paths * c * d
    return extra


# ---------------------------------------------------------------------------
# Comparisons and ablation grids
# ---------------------------------------------------------------------------


@dataclass
class Comparison:
    resolution: int
    reports: list[CostReport]

    @property
    def baseline(self) -> CostReport:
        return self.reports[0]

    def ratios(self, report: CostReport) -> tuple[float, float]:
        base = self.baseline
        return report.total_params / base.total_params, report.total_madds / base.total_madds

    def to_dict(self) -> dict:
        rows = []
        for report in self.reports:
            param_ratio, flop_ratio = self.ratios(report)
            rows.append(
                {
                    "arch": report.arch,
                    "total_params": report.total_params,
                    "total_madds": report.total_madds,
                    "params_m": round(report.params_m, 2),
                    "gflops": round(report.gflops, 2),
                    "param_ratio": param_ratio,
                    "flop_ratio": flop_ratio,
                }
            )
        return {"resolution": self.resolution, "baseline": self.baseline.arch, "archs": rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["arch", "total_params", "total_madds", "param_ratio", "flop_ratio"])
        for row in self.to_dict()["archs"]:
            writer.writerow(
                [row["arch"], row["total_params"], row["total_madds"], row["param_ratio"], row["flop_ratio"]]
            )
        return buf.getvalue()

    def to_table(self) -> str:
        data = self.to_dict()
        width = max(len(r["arch"]) for r in data["archs"])
        return _templates.get_template("comparison.txt.j2").render(data=data, width=width)


def compare(specs: Iterable[ArchSpec], resolution: int = DEFAULT_RESOLUTION) -> Comparison:
    """Side-by-side cost reports; ratios are relative to the first spec."""
    reports = [count_flops(spec, resolution) for spec in specs]
    if not reports:
        raise ValueError("compare needs at least one architecture")
    return Comparison(resolution, reports)


def dilation_group_grid() -> list[ArchSpec]:
    """SKNet-50 with the first path fixed at 3x3/D1/G32 and the second path varied."""
    second = [
        PathSpec(kernel=3, dilation=3),
        PathSpec(kernel=3, dilation=2),
        PathSpec(kernel=3, dilation=1),
        PathSpec(kernel=5, dilation=1, groups=64),
        PathSpec(kernel=7, dilation=1, groups=128),
    ]
    return [sknet50_variant(second_path=p) for p in second]


def kernel_combination_grid() -> list[ArchSpec]:
    """Every non-empty subset of {K3, K5, K7}, with SK attention and with a naive sum."""
    kernels = (K3, K5, K7)
    specs = []
    for size in (1, 2, 3):
        for combo in itertools.combinations(kernels, size):
            specs.append(sknet50_variant(paths=combo, aggregation="naive_sum"))
            if size > 1:
                specs.append(sknet50_variant(paths=combo, aggregation="attention"))
    return specs
