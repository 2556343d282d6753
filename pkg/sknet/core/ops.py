"""
Forward primitives and their backward rules.

Every function takes and returns ``Tensor`` values and records itself on
the active ``GradTape`` (if any). Convolutions are cross-correlations
without bias; each is followed by batch normalisation in every network
this package builds.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from sknet.core.autograd import note_switch, record
from sknet.core.errors import NumericError, ShapeError
from sknet.core.tensor import BatchNormState, ConvGeometry, Tensor, feature_map


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _tap_slices(geom: ConvGeometry, i: int, j: int, out_h: int, out_w: int):
    s = geom.stride
    r0, c0 = i * geom.dilation, j * geom.dilation
    return (
        slice(None),
        slice(None),
        slice(r0, r0 + s * (out_h - 1) + 1, s),
        slice(c0, c0 + s * (out_w - 1) + 1, s),
    )


def _im2col(padded: np.ndarray, geom: ConvGeometry, out_h: int, out_w: int) -> np.ndarray:
    n, c = padded.shape[:2]
    k = geom.kernel
    cols = np.empty((n, c, k, k, out_h, out_w))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = padded[_tap_slices(geom, i, j, out_h, out_w)]
    return cols


def _col2im(cols: np.ndarray, padded_shape, geom: ConvGeometry, out_h: int, out_w: int) -> np.ndarray:
    padded = np.zeros(padded_shape)
    k = geom.kernel
    for i in range(k):
        for j in range(k):
            padded[_tap_slices(geom, i, j, out_h, out_w)] += cols[:, :, i, j]
    return padded


def conv2d(x: Tensor, weight: Tensor, geom: ConvGeometry) -> Tensor:
    """Grouped, dilated, strided 2-D cross-correlation (no bias).

    Output size per axis is floor((h + 2p - D(k-1) - 1) / stride) + 1.
    """
    n, c, h, w = feature_map(x, "conv2d")
    if c != geom.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, geometry expects {geom.in_channels}")
    if weight.shape != geom.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != expected {geom.weight_shape}")

    p, k, g = geom.padding, geom.kernel, geom.groups
    out_h, out_w = geom.output_size(h), geom.output_size(w)
    cg, og = c // g, geom.out_channels // g
    kk = cg * k * k

    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(padded, geom, out_h, out_w).reshape(n, g, kk, out_h * out_w)
    wmat = weight.data.reshape(g, og, kk)
    out = np.matmul(wmat, cols).reshape(n, geom.out_channels, out_h, out_w)

    def backward(grad: np.ndarray):
        go = grad.reshape(n, g, og, out_h * out_w)
        dw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(wmat.transpose(0, 2, 1), go).reshape(n, c, k, k, out_h, out_w)
        dpadded = _col2im(dcols, padded.shape, geom, out_h, out_w)
        dx = dpadded[:, :, p : p + h, p : p + w] if p else dpadded
        return dx, dw

    return record("conv2d", (x, weight), Tensor(out), backward)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling; padded cells act as -inf. Gradient goes to the first maximal tap."""
    n, c, h, w = feature_map(x, "max_pool2d")
    geom = ConvGeometry(c, c, kernel=kernel, stride=stride, padding=padding, groups=c)
    out_h, out_w = geom.output_size(h), geom.output_size(w)
    padded = np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf
    )
    windows = _im2col(padded, geom, out_h, out_w).reshape(n, c, kernel * kernel, out_h, out_w)
    argmax = windows.argmax(axis=2)
    note_switch(argmax)
    out = np.take_along_axis(windows, argmax[:, :, None], axis=2)[:, :, 0]

    def backward(grad: np.ndarray):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, argmax[:, :, None], grad[:, :, None], axis=2)
        dwin = dwin.reshape(n, c, kernel, kernel, out_h, out_w)
        dpadded = _col2im(dwin, padded.shape, geom, out_h, out_w)
        return (dpadded[:, :, padding : padding + h, padding : padding + w],)

    return record("max_pool2d", (x,), Tensor(out), backward)


# ---------------------------------------------------------------------------
# Normalisation and activations
# ---------------------------------------------------------------------------


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalisation over every axis except channels (axis 1).

    Works on feature maps (n, c, h, w) and on per-sample vectors (n, c).
    Training mode uses batch statistics and updates the running ones.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected rank 2 or 4, got shape {x.shape}")
    channels = x.shape[1]
    if channels != state.channels:
        raise ShapeError(f"batch_norm: input has {channels} channels, state has {state.channels}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, channels) + (1,) * (x.ndim - 2)
    count = x.size // channels

    if training:
        if count == 0:
            raise ShapeError("batch_norm: zero batch*spatial extent in training mode")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean *= 1.0 - state.momentum
        state.running_mean += state.momentum * mean
        state.running_var *= 1.0 - state.momentum
        state.running_var += state.momentum * unbiased
    else:
        mean, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    gamma = state.gamma.data.reshape(bshape)
    out = gamma * xhat + state.beta.data.reshape(bshape)

    def backward(grad: np.ndarray):
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * gamma
        if training:
            dx = (inv_std.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return record("batch_norm", (x, state.gamma, state.beta), Tensor(out), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_switch(mask)
    out = np.where(mask, x.data, 0.0)
    return record("relu", (x,), Tensor(out), lambda grad: (grad * mask,))


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", (x,), Tensor(out), lambda grad: (grad * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# Pooling, dense transforms, attention
# ---------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """s_c = mean of U_c over all spatial positions; output (n, c, 1, 1)."""
    n, c, h, w = feature_map(x, "global_avg_pool")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)
    return record(
        "global_avg_pool",
        (x,),
        Tensor(out),
        lambda grad: (np.broadcast_to(grad * scale, x.shape).copy(),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    original = x.shape
    return record("reshape", (x,), Tensor(out), lambda grad: (grad.reshape(original),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = W x (+ b) for a vector (c_in,) or a batch of vectors (n, c_in)."""
    if weight.ndim != 2:
        raise ShapeError(f"fully_connected: weight must be a matrix, got shape {weight.shape}")
    vector = x.ndim == 1
    xs = x.data[None, :] if vector else x.data
    if xs.ndim != 2 or xs.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} does not match weight {weight.shape}")
    out = xs @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(grad: np.ndarray):
        g = grad[None, :] if vector else grad
        dx = g @ weight.data
        grads = [dx[0] if vector else dx, g.T @ xs]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("fully_connected", inputs, Tensor(out[0] if vector else out), backward)


def softmax_over_paths(logits: Tensor) -> Tensor:
    """Softmax across the path axis (-2) of an (..., M, C) array, per channel."""
    if logits.ndim < 2 or logits.shape[-2] < 2:
        raise ShapeError(f"softmax_over_paths: need at least 2 paths, got shape {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax_over_paths: non-finite logits")
    shifted = logits.data - logits.data.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-2, keepdims=True)

    def backward(grad: np.ndarray):
        return (out * (grad - (grad * out).sum(axis=-2, keepdims=True)),)

    return record("softmax_over_paths", (logits,), Tensor(out), backward)


def stack_paths(items: Sequence[Tensor]) -> Tensor:
    """Stack M tensors of shape (n, C) into (n, M, C)."""
    shapes = {t.shape for t in items}
    if len(shapes) != 1:
        raise ShapeError(f"stack_paths: shapes disagree: {sorted(shapes)}")
    out = np.stack([t.data for t in items], axis=1)
    return record(
        "stack_paths",
        tuple(items),
        Tensor(out),
        lambda grad: [grad[:, m] for m in range(len(items))],
    )


def weighted_sum(paths: Sequence[Tensor], att: Tensor) -> Tensor:
    """V_c = sum_m att[:, m, c] * path_m[:, c] for feature-map paths."""
    if len({p.shape for p in paths}) != 1:
        raise ShapeError("weighted_sum: path shapes disagree")
    n, c = paths[0].shape[:2]
    if att.shape != (n, len(paths), c):
        raise ShapeError(f"weighted_sum: attention shape {att.shape} != {(n, len(paths), c)}")
    a = att.data[:, :, :, None, None]
    out = np.zeros(paths[0].shape)
    for m, path in enumerate(paths):
        out += a[:, m] * path.data

    def backward(grad: np.ndarray):
        dpaths = [grad * a[:, m] for m in range(len(paths))]
        datt = np.stack([(grad * p.data).sum(axis=(2, 3)) for p in paths], axis=1)
        return dpaths + [datt]

    return record("weighted_sum", tuple(paths) + (att,), Tensor(out), backward)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", (a, b), Tensor(a.data + b.data), lambda grad: (grad, grad))


def add_n(items: Sequence[Tensor]) -> Tensor:
    if not items:
        raise ShapeError("add_n: nothing to add")
    if len({t.shape for t in items}) != 1:
        raise ShapeError("add_n: shapes disagree")
    out = items[0].data.copy()
    for t in items[1:]:
        out += t.data
    return record("add_n", tuple(items), Tensor(out), lambda grad: [grad] * len(items))


def channel_scale(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply each channel of a feature map by a per-sample gate (n, c)."""
    n, c = feature_map(x, "channel_scale")[:2]
    if gate.shape != (n, c):
        raise ShapeError(f"channel_scale: gate shape {gate.shape} != {(n, c)}")
    g = gate.data[:, :, None, None]

    def backward(grad: np.ndarray):
        return grad * g, (grad * x.data).sum(axis=(2, 3))

    return record("channel_scale", (x, gate), Tensor(x.data * g), backward)


# ---------------------------------------------------------------------------
# Scalar losses
# ---------------------------------------------------------------------------


def sum_product(x: Tensor, weights: np.ndarray) -> Tensor:
    """<x, weights> as a scalar; turns any tensor into a loss with upstream ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise ShapeError(f"sum_product: weights {weights.shape} != tensor {x.shape}")
    out = np.array(np.vdot(x.data, weights))
    return record("sum_product", (x,), Tensor(out), lambda grad: (grad * weights,))


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Batch-mean of -sum_k q_k log softmax(logits)_k with q = (1-eps) onehot + eps/K."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {smoothing}")
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (n, K), got {logits.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericError("cross_entropy: non-finite logits")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= k):
        raise ShapeError(f"cross_entropy: labels {labels.tolist()} invalid for {k} classes")

    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.full((n, k), smoothing / k)
    target[np.arange(n), labels] += 1.0 - smoothing
    loss = np.array(-(target * log_probs).sum() / n)

    def backward(grad: np.ndarray):
        d = grad * (np.exp(log_probs) - target) / n
        return (d[0] if single else d,)

    return record("cross_entropy", (logits,), Tensor(loss), backward)
