"""
SGD training loop: momentum, weight decay, piecewise-constant learning
rate, optional label smoothing, top-1 evaluation.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from sknet.config import DEFAULT_SEED
from sknet.core import ops
from sknet.core.autograd import GradTape
from sknet.core.errors import ConfigError, NumericError, TrainingDiverged
from sknet.core.tensor import Parameter, Tensor
from sknet.ingestion.cifar import ImageSet, augment_batch
from sknet.models.arch import Network

logger = logging.getLogger(__name__)


class OptimConfig(BaseModel):
    """Optimiser and schedule settings.

    ``schedule`` lists (boundary, multiplier) pairs: from ``boundary`` on,
    the rate is ``lr0 * multiplier``. Boundaries are epoch indices, or
    fractions of ``epochs`` when ``schedule_unit`` is "fraction".
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple[tuple[float, float], ...] = ()
    schedule_unit: Literal["epoch", "fraction"] = "epoch"
    label_smoothing: float = 0.0
    batch_size: int = 256
    epochs: int = 100
    accumulate: int = 1
    augment: Literal["cifar_standard", "none"] = "none"
    seed: int = DEFAULT_SEED

    @model_validator(mode="after")
    def _check(self) -> "OptimConfig":
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 1 or self.accumulate < 1:
            raise ValueError("weight_decay >= 0, batch_size, epochs and accumulate >= 1 required")
        bounds = [b for b, _ in self.schedule]
        mults = [1.0] + [m for _, m in self.schedule]
        if bounds != sorted(bounds) or any(b > a for a, b in zip(mults, mults[1:])):
            raise ValueError("schedule boundaries must ascend and multipliers must not increase")
        return self


def imagenet_recipe(**overrides) -> OptimConfig:
    base = dict(
        lr0=0.1,
        momentum=0.9,
        weight_decay=1e-4,
        schedule=((30, 0.1), (60, 0.01), (90, 0.001)),
        label_smoothing=0.1,
        batch_size=256,
        epochs=100,
    )
    return OptimConfig(**{**base, **overrides})


def lightweight_recipe(**overrides) -> OptimConfig:
    return imagenet_recipe(**{"weight_decay": 4e-5, **overrides})


def cifar_recipe(variant: int = 10, **overrides) -> OptimConfig:
    base = dict(
        lr0=0.1 if variant == 10 else 0.05,
        momentum=0.9,
        weight_decay=5e-4,
        schedule=((0.5, 0.1), (0.75, 0.01)),
        schedule_unit="fraction",
        batch_size=128,
        epochs=300,
        augment="cifar_standard",
    )
    return OptimConfig(**{**base, **overrides})


def lr_at(cfg: OptimConfig, epoch: float) -> float:
    multiplier = 1.0
    for boundary, mult in cfg.schedule:
        at = boundary * cfg.epochs if cfg.schedule_unit == "fraction" else boundary
        if epoch >= at:
            multiplier = mult
    return cfg.lr0 * multiplier


def sgd_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray],
    state: dict[str, np.ndarray],
    cfg: OptimConfig,
    lr: float,
) -> Mapping[str, Parameter]:
    """v <- momentum*v + g + wd*w (decayed parameters only); w <- w - lr*v. In place."""
    for name, param in params.items():
        grad = grads[name]
        if param.decay and cfg.weight_decay:
            grad = grad + cfg.weight_decay * param.data
        velocity = state.get(name)
        velocity = grad.copy() if velocity is None else cfg.momentum * velocity + grad
        state[name] = velocity
        param.data -= lr * velocity
    return params


def top1_error(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction misclassified; argmax ties resolve to the lowest class index."""
    return float(np.mean(np.argmax(logits, axis=1) != labels))


def evaluate(net: Network, data: ImageSet, batch_size: int = 256) -> float:
    """Top-1 error with inference-mode batch norm."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty image set")
    wrong = 0
    for pixels, labels in data.batches(batch_size):
        logits = net(Tensor(pixels), training=False).data
        wrong += int(np.sum(np.argmax(logits, axis=1) != labels))
    return wrong / len(data)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    eval_top1: float | None = None


@dataclass
class TrainLog:
    """Per-epoch summaries in order; ``steps`` holds per-step losses when requested.

    The top1 columns are top-1 errors.
    """

    arch: str
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "lr", "train_loss", "train_top1", "eval_top1"])
        for r in self.epochs:
            eval_top1 = "" if r.eval_top1 is None else repr(r.eval_top1)
            writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_top1), eval_top1])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {"arch": self.arch, "epochs": [asdict(r) for r in self.epochs], "steps": self.steps}, indent=2
        )

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() if path.suffix == ".json" else self.to_csv())
        logger.info("wrote training log %s", path)
        return path


def train(
    net: Network,
    data: ImageSet,
    cfg: OptimConfig,
    eval_data: ImageSet | None = None,
    record_steps: bool = False,
) -> TrainLog:
    """Run ``cfg.epochs`` epochs of mini-batch SGD over ``data``.

    Gradients of ``cfg.accumulate`` consecutive batches are averaged
    before each update. Raises TrainingDiverged on a non-finite loss and
    ConfigError when ``data`` holds no images.
    """
    if len(data) == 0:
        raise ConfigError("training data is empty")
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    velocity: dict[str, np.ndarray] = {}
    log = TrainLog(net.spec.name)
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        loss_sum, wrong, seen = 0.0, 0, 0
        pending: dict[str, np.ndarray] = {}
        count = 0
        for pixels, labels in data.batches(cfg.batch_size, rng):
            pixels = augment_batch(pixels, cfg.augment, rng)
            try:
                with GradTape() as tape:
                    logits = net(Tensor(pixels), training=True)
                    loss = ops.cross_entropy(logits, labels, cfg.label_smoothing)
            except NumericError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch} step {step}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch} step {step}")
            grads = tape.backward(loss, params=params.values())
            for name, param in params.items():
                pending[name] = pending[name] + grads[param] if name in pending else grads[param].copy()
            count += 1
            if count == cfg.accumulate:
                sgd_step(params, {k: v / count for k, v in pending.items()}, velocity, cfg, lr)
                pending, count = {}, 0

            n = len(labels)
            loss_sum += value * n
            wrong += int(np.sum(np.argmax(logits.data, axis=1) != labels))
            seen += n
            if record_steps:
                log.steps.append(value)
            logger.debug("epoch %d step %d loss %.6f", epoch, step, value)
            step += 1
        if count:
            sgd_step(params, {k: v / count for k, v in pending.items()}, velocity, cfg, lr)

        record = EpochRecord(epoch, lr, loss_sum / seen, wrong / seen)
        if eval_data is not None:
            record.eval_top1 = evaluate(net, eval_data)
        log.epochs.append(record)
        logger.info(
            "epoch %d lr %.4g loss %.4f train err %.4f%s",
            epoch,
            lr,
            record.train_loss,
            record.train_top1,
            "" if record.eval_top1 is None else f" eval err {record.eval_top1:.4f}",
        )
    return log
