"""
Whole-network descriptions (ArchSpec), the named presets, and the
builder that turns a spec into a Network.

Units are named <PREFIX>_<stage>_<block> with 1-based indices where the
stem counts as stage 1, so the first residual stage is stage 2 (SK_2_1,
SK_2_2, ...). SK units use the SK prefix, ResNeXt units X, SE units SE.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from sknet.config import DEFAULT_SEED, SE_REDUCTION
from sknet.core import ops
from sknet.core.errors import ConfigError, ShapeError
from sknet.core.tensor import ConvGeometry, Parameter, Tensor, feature_map
from sknet.models.layers import ConvBN, Linear, assign_names, init_conv_bn, init_linear
from sknet.models.sk_block import (
    K1,
    K3,
    K5,
    AttentionSink,
    PathSpec,
    SEConfig,
    SKConfig,
    UnitConfig,
    UnitParams,
    init_unit,
    sk_unit_forward,
)

logger = logging.getLogger(__name__)

UNIT_PREFIX = {"sknet": "SK", "resnext": "X", "senet": "SE"}
_POOL = ConvGeometry(1, 1, kernel=3, stride=2, padding=1)


class StemSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kernel: int = 7
    channels: int = 64
    stride: int = 2
    pool: bool = True


class StageSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    blocks: int
    width: int
    out_channels: int
    stride: int = 1


class ArchSpec(BaseModel):
    """Declarative network: stem, residual stages, block kind, classifier."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    kind: Literal["resnext", "sknet", "senet"]
    in_channels: int = 3
    stem: StemSpec = StemSpec()
    stages: tuple[StageSpec, ...]
    groups: int = 32
    sk: SKConfig | None = None
    se: SEConfig | None = None
    num_classes: int = 1000

    @model_validator(mode="after")
    def _check(self) -> "ArchSpec":
        if not self.stages:
            raise ValueError("at least one stage is required")
        if self.kind == "sknet" and self.sk is None:
            raise ValueError("sknet architectures need an sk config")
        if self.kind == "senet" and self.se is None:
            raise ValueError("senet architectures need an se config")
        for i, stage in enumerate(self.stages):
            if stage.blocks < 1 or stage.width < 1 or stage.out_channels < 1 or stage.stride < 1:
                raise ValueError(f"stage {i} has a non-positive field")
        return self

    def middle_config(self, width: int) -> SKConfig:
        if self.kind == "sknet":
            return self.sk.with_channels(width)
        return SKConfig(paths=(K3,), groups=self.groups, aggregation="naive_sum", channels=width)

    def with_classes(self, num_classes: int) -> "ArchSpec":
        return self.model_copy(update={"num_classes": num_classes})

    @property
    def stem_geometry(self) -> ConvGeometry:
        return ConvGeometry(
            self.in_channels, self.stem.channels, kernel=self.stem.kernel, stride=self.stem.stride
        )


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_IMAGENET_WIDTHS = ((128, 256, 1), (256, 512, 2), (512, 1024, 2), (1024, 2048, 2))
_CIFAR_WIDTHS = ((512, 256, 1), (1024, 512, 2), (2048, 1024, 2))
_CIFAR_STEM = StemSpec(kernel=3, channels=64, stride=1, pool=False)


def _stages(blocks: tuple[int, ...], widths) -> tuple[StageSpec, ...]:
    return tuple(
        StageSpec(blocks=b, width=w, out_channels=o, stride=s) for b, (w, o, s) in zip(blocks, widths)
    )


def _imagenet(name: str, kind: str, blocks: tuple[int, ...], sk: SKConfig | None = None) -> ArchSpec:
    se = SEConfig(reduction=SE_REDUCTION) if kind == "senet" else None
    return ArchSpec(name=name, kind=kind, stages=_stages(blocks, _IMAGENET_WIDTHS), sk=sk, se=se)


def _cifar(name: str, kind: str) -> ArchSpec:
    sk = SKConfig(paths=(K3, K1), groups=16, reduction=32, min_dim=32) if kind == "sknet" else None
    se = SEConfig(reduction=SE_REDUCTION) if kind == "senet" else None
    return ArchSpec(
        name=name,
        kind=kind,
        stem=_CIFAR_STEM,
        stages=_stages((3, 3, 3), _CIFAR_WIDTHS),
        groups=16,
        sk=sk,
        se=se,
        num_classes=10,
    )


PRESETS: dict[str, ArchSpec] = {
    "resnext50": _imagenet("resnext50", "resnext", (3, 4, 6, 3)),
    "senet50": _imagenet("senet50", "senet", (3, 4, 6, 3)),
    "sknet26": _imagenet("sknet26", "sknet", (2, 2, 2, 2), SKConfig()),
    "sknet50": _imagenet("sknet50", "sknet", (3, 4, 6, 3), SKConfig()),
    "sknet101": _imagenet("sknet101", "sknet", (3, 4, 23, 3), SKConfig()),
    "resnext29-cifar": _cifar("resnext29-cifar", "resnext"),
    "senet29-cifar": _cifar("senet29-cifar", "senet"),
    "sknet29-cifar": _cifar("sknet29-cifar", "sknet"),
}


def sknet50_variant(
    second_path: PathSpec | None = None,
    aggregation: str = "attention",
    paths: tuple[PathSpec, ...] | None = None,
) -> ArchSpec:
    """SKNet-50 with a different second path or path set (dilation/kernel ablations).

    A single-path naive-sum variant is a ResNeXt-50 whose middle kernel is
    that path.
    """
    if paths is None:
        paths = (K3, second_path or K5)
    sk = SKConfig(paths=paths, aggregation=aggregation)
    label = "+".join(f"k{p.kernel}d{p.dilation}g{p.groups or sk.groups}" for p in paths)
    return _imagenet(f"sknet50[{label},{aggregation}]", "sknet", (3, 4, 6, 3), sk)


def load_spec(source: str | Path) -> ArchSpec:
    """Resolve a preset name or a JSON ArchSpec file."""
    if str(source) in PRESETS:
        return PRESETS[str(source)]
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"unknown preset or missing config file: {source}")
    try:
        return ArchSpec.model_validate_json(path.read_text())
    except ValidationError as exc:
        raise ConfigError(f"invalid architecture config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Unit plan
# ---------------------------------------------------------------------------


def iter_units(spec: ArchSpec) -> Iterator[UnitConfig]:
    """Yield every residual unit's configuration in forward order."""
    prefix = UNIT_PREFIX[spec.kind]
    in_channels = spec.stem.channels
    for s, stage in enumerate(spec.stages):
        for b in range(stage.blocks):
            se = None
            if spec.se is not None:
                se = spec.se.model_copy(update={"channels": stage.out_channels})
            try:
                middle = spec.middle_config(stage.width)
                if se is not None:
                    se.inner()
            except (ValidationError, ConfigError) as exc:
                raise ConfigError(f"inconsistent channel plan in stage {s + 1}: {exc}") from exc
            yield UnitConfig(
                name=f"{prefix}_{s + 2}_{b + 1}",
                in_channels=in_channels,
                width=stage.width,
                out_channels=stage.out_channels,
                stride=stage.stride if b == 0 else 1,
                middle=middle,
                se=se,
            )
            in_channels = stage.out_channels


def stage_resolutions(spec: ArchSpec, resolution: int) -> list[tuple[str, int]]:
    """Spatial size after the stem conv, the stem pool, and every stage."""
    geom = spec.stem_geometry
    size = geom.output_size(resolution)
    plan = [("stem", size)]
    if spec.stem.pool:
        size = _POOL.output_size(size)
        plan.append(("pool", size))
    units = iter_units(spec)
    for s, stage in enumerate(spec.stages):
        for _ in range(stage.blocks):
            unit = next(units)
            size = unit.middle.path_geometry(0, unit.width, unit.stride).output_size(size)
        plan.append((f"stage{s + 2}", size))
    return plan


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class Network:
    spec: ArchSpec
    stem: ConvBN
    units: list[tuple[UnitConfig, UnitParams]]
    classifier: Linear

    def __post_init__(self):
        self._registry = assign_names(self._walk_parameters())

    def _walk_parameters(self) -> Iterator[tuple[str, Parameter]]:
        yield from self.stem.named_parameters("stem.conv")
        for config, params in self.units:
            yield from params.named_parameters(config.name)
        yield from self.classifier.named_parameters("fc")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self._registry)

    def buffers(self) -> dict[str, np.ndarray]:
        named = dict(self.stem.named_buffers("stem.conv"))
        for config, params in self.units:
            named.update(params.named_buffers(config.name))
        return named

    def num_parameters(self) -> int:
        return sum(p.size for p in self._registry.values())

    def unit_ids(self, attention_only: bool = False) -> list[str]:
        return [c.name for c, _ in self.units if not attention_only or c.middle.attention]

    def __call__(self, x: Tensor, training: bool = False, record: AttentionSink | None = None) -> Tensor:
        return forward(self, x, record=record, training=training)


def build(spec: ArchSpec, seed: int = DEFAULT_SEED) -> Network:
    """Instantiate ``spec`` with parameters drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    stem = init_conv_bn(spec.stem_geometry, rng)
    units = []
    for config in iter_units(spec):
        units.append((config, init_unit(config, rng)))
    in_features = spec.stages[-1].out_channels
    classifier = init_linear(spec.num_classes, in_features, rng, bias=True)
    net = Network(spec, stem, units, classifier)
    logger.info(
        "built %s: %d units, %d parameters", spec.name, len(units), net.num_parameters()
    )
    return net


def forward(
    net: Network, batch: Tensor, record: AttentionSink | None = None, training: bool = False
) -> Tensor:
    """Logits of shape (n, num_classes); SK attention goes to ``record`` when given."""
    n, c, h, w = feature_map(batch, "forward")
    if c != net.spec.in_channels:
        raise ShapeError(f"network expects {net.spec.in_channels} input channels, got {c}")
    x = net.stem(batch, training, activation=True)
    if net.spec.stem.pool:
        x = ops.max_pool2d(x, kernel=3, stride=2, padding=1)
    for config, params in net.units:
        x = sk_unit_forward(x, config, params, training=training, record=record)
    pooled = ops.flatten(ops.global_avg_pool(x))
    return net.classifier(pooled)
