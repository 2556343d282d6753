"""
Ready-made gradient-check targets: every primitive, a full SK bottleneck
unit (attention or naive sum), and a three-unit toy network.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Literal

import numpy as np

from sknet.config import GRADCHECK_BATCH, GRADCHECK_SPATIAL, SK_GROUPS
from sknet.core import ops
from sknet.core.autograd import GradCheckReport, grad_check
from sknet.core.tensor import BatchNormState, ConvGeometry, Parameter, Tensor
from sknet.models.arch import ArchSpec, StageSpec, StemSpec, build
from sknet.models.sk_block import K3, K5, SKConfig, UnitConfig, init_unit, sk_unit_forward

logger = logging.getLogger(__name__)

Target = Literal["sk", "naive", "primitives", "toy"]


def _input(rng: np.random.Generator, *shape: int) -> Parameter:
    return Parameter(rng.standard_normal(shape), name="input")


def _loss(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum_product(out, weights)


def unit_config(channels: int, aggregation: str = "attention", stride: int = 1) -> UnitConfig:
    groups = math.gcd(channels, SK_GROUPS)
    sk = SKConfig(paths=(K3, K5), groups=groups, aggregation=aggregation, channels=channels)
    return UnitConfig(
        name="SK_2_1",
        in_channels=channels,
        width=channels,
        out_channels=2 * channels,
        stride=stride,
        middle=sk,
    )


def check_unit(channels: int = 32, aggregation: str = "attention", seed: int = 0, stride: int = 1) -> GradCheckReport:
    """Bottleneck unit in training mode, loss = <unit(x), w> for a fixed random w."""
    rng = np.random.default_rng(seed)
    config = unit_config(channels, aggregation, stride)
    params = init_unit(config, rng)
    x = _input(rng, GRADCHECK_BATCH, channels, GRADCHECK_SPATIAL, GRADCHECK_SPATIAL)
    out_size = config.middle.path_geometry(0, channels, stride).output_size(GRADCHECK_SPATIAL)
    weights = rng.standard_normal((GRADCHECK_BATCH, 2 * channels, out_size, out_size))
    named = {"input": x, **dict(params.named_parameters(config.name))}
    return grad_check(
        lambda: _loss(sk_unit_forward(x, config, params, training=True), weights), named, seed=seed
    )


def toy_spec(num_classes: int = 4, width: int = 8, min_dim: int = 4) -> ArchSpec:
    """Three SK units (one per stage) small enough to check and overfit quickly."""
    return ArchSpec(
        name="sknet-toy",
        kind="sknet",
        stem=StemSpec(kernel=3, channels=width, stride=1, pool=False),
        stages=(
            StageSpec(blocks=1, width=width, out_channels=2 * width, stride=1),
            StageSpec(blocks=1, width=2 * width, out_channels=4 * width, stride=2),
            StageSpec(blocks=1, width=2 * width, out_channels=4 * width, stride=1),
        ),
        groups=4,
        sk=SKConfig(groups=4, reduction=4, min_dim=min_dim),
        num_classes=num_classes,
    )


def check_toy(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    net = build(toy_spec(), seed=seed)
    x = _input(rng, GRADCHECK_BATCH, 3, GRADCHECK_SPATIAL, GRADCHECK_SPATIAL)
    labels = rng.integers(0, net.spec.num_classes, GRADCHECK_BATCH)
    named = {"input": x, **net.parameters()}
    return grad_check(lambda: ops.cross_entropy(net(x, training=True), labels, 0.1), named, seed=seed)


def _primitive_graphs(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    n, s = GRADCHECK_BATCH, GRADCHECK_SPATIAL
    graphs = {}

    geom = ConvGeometry(4, 6, kernel=3, dilation=2, groups=2, stride=2)
    x, w = _input(rng, n, 4, 7, 7), Parameter(rng.standard_normal(geom.weight_shape))
    up = rng.standard_normal((n, 6, geom.output_size(7), geom.output_size(7)))
    graphs["conv2d"] = (lambda x=x, w=w, up=up: _loss(ops.conv2d(x, w, geom), up), {"input": x, "weight": w})

    x = _input(rng, n, 3, s, s)
    up = rng.standard_normal((n, 3, 3, 3))
    graphs["max_pool2d"] = (lambda x=x, up=up: _loss(ops.max_pool2d(x), up), {"input": x})

    x, bn = _input(rng, n, 3, s, s), BatchNormState.create(3)
    bn.gamma.data = rng.uniform(0.5, 1.5, 3)
    bn.beta.data = rng.standard_normal(3)
    up = rng.standard_normal((n, 3, s, s))
    graphs["batch_norm"] = (
        lambda x=x, bn=bn, up=up: _loss(ops.batch_norm(x, bn, training=True), up),
        {"input": x, "gamma": bn.gamma, "beta": bn.beta},
    )

    x = _input(rng, n, 3, s, s)
    up = rng.standard_normal((n, 3, s, s))
    graphs["relu"] = (lambda x=x, up=up: _loss(ops.relu(x), up), {"input": x})
    graphs["sigmoid"] = (lambda x=x, up=up: _loss(ops.sigmoid(x), up), {"input": x})
    gap_up = rng.standard_normal((n, 3, 1, 1))
    graphs["global_avg_pool"] = (lambda x=x, up=gap_up: _loss(ops.global_avg_pool(x), up), {"input": x})

    x, w, b = _input(rng, n, 5), Parameter(rng.standard_normal((4, 5))), Parameter(rng.standard_normal(4))
    up = rng.standard_normal((n, 4))
    graphs["fully_connected"] = (
        lambda x=x, w=w, b=b, up=up: _loss(ops.fully_connected(x, w, b), up),
        {"input": x, "weight": w, "bias": b},
    )

    logits = [_input(rng, n, 5) for _ in range(3)]
    paths = [_input(rng, n, 5, s, s) for _ in range(3)]
    up = rng.standard_normal((n, 5, s, s))

    def attention_graph(logits=logits, paths=paths, up=up):
        att = ops.softmax_over_paths(ops.stack_paths(logits))
        return _loss(ops.weighted_sum(paths, att), up)

    graphs["softmax_weighted_sum"] = (
        attention_graph,
        {**{f"logit{m}": t for m, t in enumerate(logits)}, **{f"path{m}": t for m, t in enumerate(paths)}},
    )

    x, gate = _input(rng, n, 3, s, s), Parameter(rng.uniform(0.1, 0.9, (n, 3)))
    up = rng.standard_normal((n, 3, s, s))
    graphs["channel_scale"] = (lambda x=x, g=gate, up=up: _loss(ops.channel_scale(x, g), up), {"input": x, "gate": gate})

    a, b, c = (_input(rng, n, 3, s, s) for _ in range(3))
    graphs["add_n"] = (lambda a=a, b=b, c=c, up=up: _loss(ops.add_n([a, ops.add(b, c)]), up), {"a": a, "b": b, "c": c})

    z = _input(rng, n, 10)
    labels = rng.integers(0, 10, n)
    graphs["cross_entropy"] = (lambda z=z: ops.cross_entropy(z, labels, 0.1), {"logits": z})
    return graphs


def check_primitives(seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    return {name: grad_check(graph, params, seed=seed) for name, (graph, params) in _primitive_graphs(rng).items()}


def run_gradcheck(target: Target, channels: int = 32, seed: int = 0) -> dict[str, GradCheckReport]:
    if target == "sk":
        reports = {"sk_unit": check_unit(channels, "attention", seed)}
    elif target == "naive":
        reports = {"naive_unit": check_unit(channels, "naive_sum", seed)}
    elif target == "toy":
        reports = {"toy_network": check_toy(seed)}
    elif target == "primitives":
        reports = check_primitives(seed)
    else:
        raise ValueError(f"unknown gradient-check target {target!r}")
    for name, report in reports.items():
        logger.info("%s: worst relative error %.3e over %d probes (%d kink redraws)", name, report.worst, report.probes, report.kink_retries)
    return reports
