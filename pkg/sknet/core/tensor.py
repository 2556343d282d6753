"""
Dense float64 tensors and the value types the primitives operate on.

Feature maps are rank-4 (batch, channel, height, width) in row-major
order. Per-sample vectors such as the pooled descriptor s or the fuse
embedding z are rank-2 (batch, features).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sknet.config import BN_EPSILON, BN_MOMENTUM
from sknet.core.errors import ConfigError, ShapeError


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        elif any(dim < 1 for dim in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable tensor. ``decay`` marks it for weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, name: str | None = None, decay: bool = True):
        super().__init__(data, requires_grad=True, name=name)
        self.decay = decay


def feature_map(x: Tensor, op: str) -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a rank-4 (n, c, h, w) tensor, got shape {x.shape}")
    return x.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1
    groups: int = 1
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be an odd positive integer, got {self.kernel}")
        for label in ("dilation", "groups", "stride", "in_channels", "out_channels"):
            if getattr(self, label) < 1:
                raise ConfigError(f"{label} must be positive, got {getattr(self, label)}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups {self.groups}"
            )
        if self.padding is None:
            object.__setattr__(self, "padding", self.dilation * (self.kernel - 1) // 2)
        elif self.padding < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")

    @property
    def extent(self) -> int:
        return self.dilation * (self.kernel - 1) + 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.extent) // self.stride + 1
        if out < 1:
            raise ShapeError(f"input size {size} too small for extent {self.extent}")
        return out

    def params(self) -> int:
        return int(np.prod(self.weight_shape))

    def madds(self, out_h: int, out_w: int) -> int:
        return self.params() * out_h * out_w


@dataclass
class BatchNormState:
    """Affine parameters plus running statistics for one BN layer."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError("batch norm epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ConfigError("batch norm running variance must be non-negative")

    @classmethod
    def create(cls, channels: int, name: str = "bn", **kwargs) -> "BatchNormState":
        return cls(
            gamma=Parameter(np.ones(channels), name=f"{name}.gamma", decay=False),
            beta=Parameter(np.zeros(channels), name=f"{name}.beta", decay=False),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kwargs,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}
