"""
Parameter containers for the layers networks are built from, and the
seeded initialisers that fill them.

Conv weights use the fan-in scaled Gaussian (std = sqrt(2 / fan_in));
BN starts at gamma = 1, beta = 0; fully connected layers draw from a
small uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from sknet.core import ops
from sknet.core.tensor import BatchNormState, ConvGeometry, Parameter, Tensor


@dataclass
class ConvBN:
    """A bias-free convolution followed by batch normalisation."""

    geometry: ConvGeometry
    weight: Parameter
    bn: BatchNormState

    def __call__(self, x: Tensor, training: bool, activation: bool = False) -> Tensor:
        out = ops.batch_norm(ops.conv2d(x, self.weight, self.geometry), self.bn, training)
        return ops.relu(out) if activation else out

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        yield f"{prefix}.weight", self.weight
        yield from bn_parameters(self.bn, f"{prefix}.bn")

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield from bn_buffers(self.bn, f"{prefix}.bn")


@dataclass
class Linear:
    weight: Parameter
    bias: Parameter | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


def bn_parameters(bn: BatchNormState, prefix: str) -> Iterator[tuple[str, Parameter]]:
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta


def bn_buffers(bn: BatchNormState, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
    for key, value in bn.buffers().items():
        yield f"{prefix}.{key}", value


def init_conv_bn(geometry: ConvGeometry, rng: np.random.Generator) -> ConvBN:
    fan_in = geometry.weight_shape[1] * geometry.kernel**2
    weight = Parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), geometry.weight_shape))
    return ConvBN(geometry, weight, BatchNormState.create(geometry.out_channels))


def init_linear(out_features: int, in_features: int, rng: np.random.Generator, bias: bool) -> Linear:
    bound = 1.0 / math.sqrt(in_features)
    weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
    b = Parameter(rng.uniform(-bound, bound, out_features), decay=False) if bias else None
    return Linear(weight, b)


def assign_names(named: Iterator[tuple[str, Parameter]]) -> dict[str, Parameter]:
    """Materialise a parameter registry and stamp each parameter with its name."""
    registry: dict[str, Parameter] = {}
    for name, param in named:
        if name in registry:
            raise ValueError(f"duplicate parameter name {name!r}")
        param.name = name
        registry[name] = param
    return registry
