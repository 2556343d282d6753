"""
Reverse-mode differentiation over a recorded tape, plus the
finite-difference gradient check used to verify every backward rule.

Primitives in ``sknet.core.ops`` record themselves on the innermost
active ``GradTape`` of the calling thread. Replaying the tape in reverse
visits every node after all of its consumers, since consumers are always
recorded later.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from sknet.config import (
    GRADCHECK_MAX_KINK_RETRIES,
    GRADCHECK_PROBES,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
)
from sknet.core.errors import NumericError, ShapeError, TapeError
from sknet.core.tensor import Tensor

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_local = threading.local()


def _stack(name: str) -> list:
    stack = getattr(_local, name, None)
    if stack is None:
        stack = []
        setattr(_local, name, stack)
    return stack


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn = field(repr=False)


class GradTape:
    """Ordered record of primitive applications.

    Usage::

        with GradTape() as tape:
            loss = ops.sum_product(net_output(x), upstream)
        grads = tape.backward(loss, params=net.parameters())
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack("tapes")
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape that was already replayed; call reset()")
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(
        self,
        output: Tensor,
        loss_grad: np.ndarray | Tensor | None = None,
        params: Iterable[Tensor] = (),
    ) -> dict[Tensor, np.ndarray]:
        """Propagate ``loss_grad`` from ``output`` back through the tape.

        Leaf tensors (parameters and inputs that no node produced) get their
        ``.grad`` set. Every tensor in ``params`` appears in the result, with
        a zero gradient when the tape never touched it.
        """
        if self._consumed:
            raise TapeError("tape replayed twice without reset")
        if loss_grad is None:
            if output.size != 1:
                raise ShapeError(
                    f"loss_grad is required for non-scalar output of shape {output.shape}"
                )
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(loss_grad.data if isinstance(loss_grad, Tensor) else loss_grad, dtype=np.float64)
            if seed.shape != output.shape:
                raise ShapeError(f"loss_grad shape {seed.shape} does not match output {output.shape}")
        self._consumed = True

        produced = {id(node.output) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(output): seed.copy()}
        leaves: dict[int, Tensor] = {}

        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            input_grads = node.backward(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
                if key not in produced:
                    leaves[key] = tensor

        result: dict[Tensor, np.ndarray] = {}
        for key, tensor in leaves.items():
            tensor.grad = grads.get(key, np.zeros_like(tensor.data))
            result[tensor] = tensor.grad
        if id(output) not in produced and output.requires_grad:
            output.grad = seed
            result[output] = seed
        for param in params:
            if param not in result:
                param.grad = np.zeros_like(param.data)
                result[param] = param.grad
        return result


def current_tape() -> GradTape | None:
    stack = _stack("tapes")
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> Tensor:
    """Attach ``output`` to the active tape when any input needs a gradient."""
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(op, inputs, output, backward)
    return output


# ---------------------------------------------------------------------------
# Kink monitoring
# ---------------------------------------------------------------------------


class KinkMonitor:
    """Collects the switching pattern (ReLU masks, max-pool argmaxes) of one forward."""

    def __init__(self):
        self.patterns: list[np.ndarray] = []

    def __enter__(self) -> "KinkMonitor":
        _stack("monitors").append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack("monitors")
        if stack and stack[-1] is self:
            stack.pop()

    def same_as(self, other: "KinkMonitor") -> bool:
        if len(self.patterns) != len(other.patterns):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns))


def note_switch(pattern: np.ndarray) -> None:
    stack = _stack("monitors")
    if stack:
        stack[-1].patterns.append(np.array(pattern, copy=True))


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


@dataclass
class GradCheckReport:
    step: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    probes: int = 0
    kink_retries: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tolerance: float = GRADCHECK_TOLERANCE) -> bool:
        return self.worst < tolerance

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "probes": self.probes,
            "kink_retries": self.kink_retries,
            "worst": self.worst,
            "max_rel_error": dict(self.max_rel_error),
        }


def _evaluate(graph: Callable[[], Tensor]) -> tuple[float, KinkMonitor]:
    with KinkMonitor() as monitor:
        out = graph()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar graph, got shape {out.shape}")
    value = out.item()
    if not math.isfinite(value):
        raise NumericError("graph produced a non-finite value during gradient check")
    return value, monitor


def grad_check(
    graph: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    step: float = GRADCHECK_STEP,
    probes: int = GRADCHECK_PROBES,
    seed: int = 0,
    max_retries: int = GRADCHECK_MAX_KINK_RETRIES,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``graph`` rebuilds a scalar from the current values of ``params`` each
    time it is called. Each parameter is probed along ``probes`` seeded
    random unit directions u: the analytic value is <grad, u>, the numeric
    value is (f(p + step*u) - f(p - step*u)) / (2*step). Probes whose
    perturbed evaluations switch a ReLU mask or max-pool argmax are redrawn.
    """
    if isinstance(params, Mapping):
        named = dict(params)
    else:
        named = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for tensor in named.values():
        tensor.requires_grad = True

    with GradTape() as tape:
        out = graph()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar graph, got shape {out.shape}")
    if not math.isfinite(out.item()):
        raise NumericError("graph produced a non-finite value during gradient check")
    analytic = tape.backward(out, params=named.values())
    _, base = _evaluate(graph)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(step=step)
    for name, tensor in named.items():
        grad = analytic[tensor]
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"analytic gradient of {name} is not finite")
        original = tensor.data.copy()
        worst = 0.0
        for _ in range(probes):
            for attempt in range(max_retries + 1):
                direction = rng.standard_normal(original.shape)
                direction /= np.linalg.norm(direction)
                try:
                    tensor.data = original + step * direction
                    plus, plus_kinks = _evaluate(graph)
                    tensor.data = original - step * direction
                    minus, minus_kinks = _evaluate(graph)
                finally:
                    tensor.data = original.copy()
                if plus_kinks.same_as(base) and minus_kinks.same_as(base):
                    break
                report.kink_retries += 1
                if attempt == max_retries:
                    logger.warning("%s: kink crossings persisted after %d redraws", name, max_retries)
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, relative_error(float(np.vdot(grad, direction)), numeric))
            report.probes += 1
        report.max_rel_error[name] = worst
        logger.debug("grad_check %s: max relative error %.3e", name, worst)
    return report
