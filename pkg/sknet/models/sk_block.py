"""
Selective Kernel convolution and the residual units built around it.

An SK convolution runs M convolution paths with different receptive
fields over the same input (split), pools their sum into a compact
descriptor z (fuse), and recombines the paths with a per-channel softmax
over paths computed from z (select). With ``aggregation="naive_sum"`` the
paths are simply added.

ResNeXt units are SK units with a single 3x3 path in naive-sum mode; SE
units add a squeeze-excitation gate before the residual add.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from sknet.config import SE_REDUCTION, SK_GROUPS, SK_MIN_DIM, SK_REDUCTION
from sknet.core import ops
from sknet.core.errors import ConfigError, ShapeError
from sknet.core.tensor import BatchNormState, ConvGeometry, Parameter, Tensor
from sknet.models.layers import (
    ConvBN,
    Linear,
    bn_buffers,
    bn_parameters,
    init_conv_bn,
    init_linear,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class PathSpec(BaseModel):
    """Geometry of one SK path: conv(k, D, groups) -> BN -> optional ReLU."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kernel: int = 3
    dilation: int = 1
    activation: bool = True
    groups: int | None = None

    @model_validator(mode="after")
    def _check(self) -> "PathSpec":
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"path kernel must be odd and >= 1, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError(f"path dilation must be >= 1, got {self.dilation}")
        if self.kernel == 1 and self.dilation != 1:
            raise ValueError("a 1x1 path cannot be dilated")
        if self.groups is not None and self.groups < 1:
            raise ValueError(f"path groups must be >= 1, got {self.groups}")
        return self

    @property
    def extent(self) -> int:
        return self.dilation * (self.kernel - 1) + 1


K1 = PathSpec(kernel=1)
K3 = PathSpec(kernel=3, dilation=1)
K5 = PathSpec(kernel=3, dilation=2)
K7 = PathSpec(kernel=3, dilation=3)


class SKConfig(BaseModel):
    """SK[M, G, r] with minimum fuse dimension L; ``channels`` is C."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    paths: tuple[PathSpec, ...] = (K3, K5)
    groups: int = SK_GROUPS
    reduction: int = SK_REDUCTION
    min_dim: int = SK_MIN_DIM
    aggregation: Literal["attention", "naive_sum"] = "attention"
    channels: int | None = None

    @model_validator(mode="after")
    def _check(self) -> "SKConfig":
        floor = 2 if self.aggregation == "attention" else 1
        if len(self.paths) < floor:
            raise ValueError(f"{self.aggregation} aggregation needs at least {floor} paths")
        if self.groups < 1 or self.reduction < 1 or self.min_dim < 1:
            raise ValueError("groups, reduction and min_dim must be positive")
        if self.channels is not None:
            for m in range(len(self.paths)):
                if self.channels % self.path_groups(m):
                    raise ValueError(
                        f"channels {self.channels} not divisible by path {m} groups {self.path_groups(m)}"
                    )
        return self

    @property
    def num_paths(self) -> int:
        return len(self.paths)

    @property
    def attention(self) -> bool:
        return self.aggregation == "attention"

    def path_groups(self, m: int) -> int:
        return self.paths[m].groups or self.groups

    def fuse_dim(self, channels: int | None = None) -> int:
        """d = max(C // r, L)."""
        c = channels if channels is not None else self.channels
        if c is None:
            raise ConfigError("fuse_dim needs a channel count")
        return max(c // self.reduction, self.min_dim)

    def with_channels(self, channels: int) -> "SKConfig":
        return SKConfig.model_validate({**self.model_dump(), "channels": channels})

    def path_geometry(self, m: int, in_channels: int, stride: int = 1) -> ConvGeometry:
        if self.channels is None:
            raise ConfigError("SK config has no channel count")
        spec = self.paths[m]
        return ConvGeometry(
            in_channels,
            self.channels,
            kernel=spec.kernel,
            dilation=spec.dilation,
            groups=self.path_groups(m),
            stride=stride,
        )


class SEConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    reduction: int = SE_REDUCTION
    channels: int | None = None

    def inner(self, channels: int | None = None) -> int:
        c = channels if channels is not None else self.channels
        if c is None:
            raise ConfigError("SE config has no channel count")
        dim = c // self.reduction
        if dim < 1:
            raise ConfigError(f"SE inner dimension {c}//{self.reduction} is below 1")
        return dim


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class SKParams:
    paths: list[ConvBN]
    fuse: Linear | None = None
    fuse_bn: BatchNormState | None = None
    select: list[Linear] | None = None

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for m, path in enumerate(self.paths):
            yield from path.named_parameters(f"{prefix}.path{m}")
        if self.fuse is not None:
            yield from self.fuse.named_parameters(f"{prefix}.fuse")
            yield from bn_parameters(self.fuse_bn, f"{prefix}.fuse_bn")
        for m, fc in enumerate(self.select or ()):
            yield from fc.named_parameters(f"{prefix}.select{m}")

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for m, path in enumerate(self.paths):
            yield from path.named_buffers(f"{prefix}.path{m}")
        if self.fuse_bn is not None:
            yield from bn_buffers(self.fuse_bn, f"{prefix}.fuse_bn")


@dataclass
class SEParams:
    fc1: Linear
    fc2: Linear

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")


def init_sk_params(config: SKConfig, in_channels: int, rng: np.random.Generator, stride: int = 1) -> SKParams:
    paths = [init_conv_bn(config.path_geometry(m, in_channels, stride), rng) for m in range(config.num_paths)]
    if not config.attention:
        return SKParams(paths)
    c, d = config.channels, config.fuse_dim()
    fuse = init_linear(d, c, rng, bias=False)
    select = [init_linear(c, d, rng, bias=False) for _ in range(config.num_paths)]
    return SKParams(paths, fuse, BatchNormState.create(d), select)


def init_se_params(config: SEConfig, rng: np.random.Generator) -> SEParams:
    c, inner = config.channels, config.inner()
    return SEParams(init_linear(inner, c, rng, bias=True), init_linear(c, inner, rng, bias=True))


# ---------------------------------------------------------------------------
# Attention recording
# ---------------------------------------------------------------------------


class AttentionSink(Protocol):
    def append(self, unit: str, attention: np.ndarray) -> None: ...


class AttentionRecorder:
    """Collects (unit id, (n, M, C) attention) pairs in forward order. Not thread-safe."""

    def __init__(self):
        self.entries: list[tuple[str, np.ndarray]] = []

    def append(self, unit: str, attention: np.ndarray) -> None:
        self.entries.append((unit, np.array(attention, copy=True)))


# ---------------------------------------------------------------------------
# Split / Fuse / Select
# ---------------------------------------------------------------------------


def split(x: Tensor, config: SKConfig, params: SKParams, training: bool = False) -> list[Tensor]:
    """Run every path over ``x``; returns M tensors of identical shape."""
    outputs = [
        conv_bn(x, training, activation=spec.activation)
        for spec, conv_bn in zip(config.paths, params.paths)
    ]
    shapes = {out.shape for out in outputs}
    if len(shapes) != 1:
        raise ShapeError(f"SK paths disagree on output shape: {sorted(shapes)}")
    return outputs


def fuse(paths: list[Tensor], params: SKParams, training: bool = False) -> Tensor:
    """U = sum of paths, s = GAP(U), z = ReLU(BN(W s)); returns z of shape (n, d)."""
    u = ops.add_n(paths)
    s = ops.flatten(ops.global_avg_pool(u))
    return ops.relu(ops.batch_norm(params.fuse(s), params.fuse_bn, training))


def select(paths: list[Tensor], z: Tensor, params: SKParams) -> tuple[Tensor, Tensor]:
    """Per-channel softmax over the M path logits A_m z, then V = sum_m a_m * path_m."""
    logits = ops.stack_paths([fc(z) for fc in params.select])
    att = ops.softmax_over_paths(logits)
    return ops.weighted_sum(paths, att), att


def sk_conv_forward(
    x: Tensor,
    config: SKConfig,
    params: SKParams,
    record: AttentionSink | None = None,
    training: bool = False,
    unit: str = "",
) -> Tensor:
    paths = split(x, config, params, training)
    if not config.attention:
        return ops.add_n(paths)
    z = fuse(paths, params, training)
    v, att = select(paths, z, params)
    if record is not None:
        record.append(unit, att.data)
    return v


def se_branch(x: Tensor, config: SEConfig, params: SEParams) -> Tensor:
    """Squeeze (GAP) -> fc -> ReLU -> fc -> sigmoid gate, multiplied into ``x``."""
    s = ops.flatten(ops.global_avg_pool(x))
    gate = ops.sigmoid(params.fc2(ops.relu(params.fc1(s))))
    return ops.channel_scale(x, gate)


# ---------------------------------------------------------------------------
# Bottleneck unit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnitConfig:
    name: str
    in_channels: int
    width: int
    out_channels: int
    stride: int
    middle: SKConfig
    se: SEConfig | None = None

    @property
    def projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass
class UnitParams:
    conv1: ConvBN
    middle: SKParams
    conv3: ConvBN
    shortcut: ConvBN | None = None
    se: SEParams | None = None

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        yield from self.conv1.named_parameters(f"{prefix}.conv1")
        yield from self.middle.named_parameters(f"{prefix}.conv2")
        yield from self.conv3.named_parameters(f"{prefix}.conv3")
        if self.se is not None:
            yield from self.se.named_parameters(f"{prefix}.se")
        if self.shortcut is not None:
            yield from self.shortcut.named_parameters(f"{prefix}.shortcut")

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.conv1.named_buffers(f"{prefix}.conv1")
        yield from self.middle.named_buffers(f"{prefix}.conv2")
        yield from self.conv3.named_buffers(f"{prefix}.conv3")
        if self.shortcut is not None:
            yield from self.shortcut.named_buffers(f"{prefix}.shortcut")


def init_unit(config: UnitConfig, rng: np.random.Generator) -> UnitParams:
    conv1 = init_conv_bn(ConvGeometry(config.in_channels, config.width, kernel=1), rng)
    middle = init_sk_params(config.middle, config.width, rng, stride=config.stride)
    conv3 = init_conv_bn(ConvGeometry(config.width, config.out_channels, kernel=1), rng)
    se = init_se_params(config.se, rng) if config.se is not None else None
    shortcut = None
    if config.projection:
        shortcut = init_conv_bn(
            ConvGeometry(config.in_channels, config.out_channels, kernel=1, stride=config.stride), rng
        )
    return UnitParams(conv1, middle, conv3, shortcut, se)


def sk_unit_forward(
    x: Tensor,
    config: UnitConfig,
    params: UnitParams,
    training: bool = False,
    record: AttentionSink | None = None,
) -> Tensor:
    """ReLU(shortcut(x) + BN(conv1x1(SK(ReLU(BN(conv1x1(x)))))))."""
    h = params.conv1(x, training, activation=True)
    h = sk_conv_forward(h, config.middle, params.middle, record=record, training=training, unit=config.name)
    h = params.conv3(h, training)
    if params.se is not None:
        h = se_branch(h, config.se, params.se)
    shortcut = params.shortcut(x, training) if params.shortcut is not None else x
    return ops.relu(ops.add(shortcut, h))
