"""Forward and reverse-mode kernels for every node kind.

All kernels work on batched float64 arrays: images are `(N, C, H, W)` and
feature vectors `(N, F)`. Parameterized kinds take a dict with `kernel` and
`bias` entries.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import math
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from archdoor.errors import NonFiniteError, ShapeError
from archdoor.graph import ADAPTIVE_POOL_TAGS, MERGE_TAGS, WINDOW_POOL_TAGS, NodeKind

DTYPE = np.float64


# = HELPERS =============================================================================
def int_power(base: np.ndarray, exponent: int) -> np.ndarray:
    """`base ** exponent` for a positive integer exponent by repeated products.

    Avoids fractional-power domain errors on negative bases.
    """
    result = np.array(base, dtype=DTYPE, copy=True)
    for _ in range(int(exponent) - 1):
        result = result * base
    return result


def adaptive_bounds(size: int, out: int) -> list[tuple[int, int]]:
    """Cell boundaries floor(i*size/out) .. ceil((i+1)*size/out)."""
    return [
        (math.floor(i * size / out), math.ceil((i + 1) * size / out)) for i in range(out)
    ]


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (list, tuple)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Sliding k x k windows, shape (N, C, Ho, Wo, k, k)."""
    view = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _scatter_windows(
    window_grads: np.ndarray, in_shape: tuple, kernel: int, stride: int
) -> np.ndarray:
    """Sum per-window gradients back onto the (N, C, H, W) input grid."""
    grad = np.zeros(in_shape, dtype=DTYPE)
    out_h, out_w = window_grads.shape[2], window_grads.shape[3]
    for i in range(kernel):
        for j in range(kernel):
            grad[
                :,
                :,
                i : i + stride * (out_h - 1) + 1 : stride,
                j : j + stride * (out_w - 1) + 1 : stride,
            ] += window_grads[..., i, j]
    return grad


def _check_merge_shapes(tag: str, left: np.ndarray, right: np.ndarray) -> None:
    if left.shape == right.shape:
        return
    if left.ndim == 4 and right.ndim == 4 and left.shape[2:] == right.shape[2:]:
        if left.shape[0] == right.shape[0] and 1 in (left.shape[1], right.shape[1]):
            return
    raise ShapeError(f"{tag} cannot combine {left.shape} and {right.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo the single-channel broadcast of add/multiply."""
    if grad.shape == shape:
        return grad
    return grad.sum(axis=1, keepdims=True)


def _route(values: np.ndarray, grad: np.ndarray, pick) -> np.ndarray:
    """Send `grad` to the arg-`pick` position along the last axis of `values`."""
    index = pick(values, axis=-1)[..., None]
    routed = np.zeros_like(values)
    np.put_along_axis(routed, index, grad[..., None], axis=-1)
    return routed


# = FORWARD =============================================================================
def _forward(kind: NodeKind, params: Union[dict, None], inputs: Sequence[np.ndarray]):
    tag = kind.tag
    x = inputs[0]
    if tag in ("input", "output"):
        return x
    if tag == "relu":
        return np.maximum(x, 0.0)
    if tag == "negate":
        return -x
    if tag == "flatten":
        return x.reshape(x.shape[0], -1)
    if tag == "exp-affine-pow":
        beta, delta = float(kind.attrs["beta"]), float(kind.attrs["delta"])
        return int_power(np.exp(beta * x) - delta, kind.attrs["alpha"])
    if tag == "channel-max-reduce":
        return x.max(axis=1, keepdims=True)
    if tag == "dense":
        return x @ params["kernel"].T + params["bias"]
    if tag == "conv2d":
        kernel, stride = int(kind.attrs["kernel"]), int(kind.attr("stride", 1))
        pad = int(kind.attr("padding", 0))
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = _windows(padded, kernel, stride)
        out = np.tensordot(windows, params["kernel"], axes=([1, 4, 5], [1, 2, 3]))
        out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
        return out + params["bias"][None, :, None, None]
    if tag in WINDOW_POOL_TAGS:
        windows = _windows(x, int(kind.attrs["kernel"]), int(kind.attr("stride", 1)))
        if tag == "max-pool":
            return windows.max(axis=(-2, -1))
        if tag == "min-pool":
            return windows.min(axis=(-2, -1))
        return windows.mean(axis=(-2, -1))
    if tag in ADAPTIVE_POOL_TAGS:
        out_h, out_w = _pair(kind.attrs["out"])
        reduce = np.mean if tag == "adaptive-avg-pool" else np.max
        out = np.empty(x.shape[:2] + (out_h, out_w), dtype=DTYPE)
        for i, (h0, h1) in enumerate(adaptive_bounds(x.shape[2], out_h)):
            for j, (w0, w1) in enumerate(adaptive_bounds(x.shape[3], out_w)):
                out[:, :, i, j] = reduce(x[:, :, h0:h1, w0:w1], axis=(2, 3))
        return out
    if tag in MERGE_TAGS:
        left, right = inputs
        units = kind.attr("units")
        if units is not None:
            units = list(units)
            out = np.array(left, dtype=DTYPE, copy=True)
            if tag == "add":
                out[:, units] = left[:, units] + right[:, units]
            else:
                out[:, units] = left[:, units] * right[:, units]
            return out
        _check_merge_shapes(tag, left, right)
        return left + right if tag == "add" else left * right
    raise ShapeError(f"no kernel for node kind '{tag}'")


def evaluate_node(
    kind: NodeKind,
    params: Union[dict, None],
    inputs: Sequence[np.ndarray],
    node_id: str = "<node>",
) -> np.ndarray:
    """Evaluate one operator on batched inputs.

    Parameters
    ----------
    kind : NodeKind
        Operator and attributes.
    params : dict or None
        `{"kernel": ..., "bias": ...}` for conv2d/dense, otherwise None.
    inputs : sequence of np.ndarray
        Input tensors in slot order.
    node_id : str
        Used in error messages.

    Raises
    ------
    ShapeError
        Inputs do not fit the kind.
    NonFiniteError
        The output holds NaN or Inf.
    """
    if kind.parameterized != (params is not None):
        raise ValueError(
            f"node '{node_id}' ({kind.tag}): parameters must be given iff the kind is "
            "parameterized"
        )
    inputs = [np.asarray(value, dtype=DTYPE) for value in inputs]
    try:
        out = _forward(kind, params, inputs)
    except ValueError as error:
        if isinstance(error, ShapeError):
            raise
        raise ShapeError(f"node '{node_id}' ({kind.tag}): {error}") from error
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(node_id)
    return out


def apply_kernel(
    kind: NodeKind, params: Union[dict, None], inputs: Sequence[np.ndarray]
) -> np.ndarray:
    """Forward kernel without the finiteness check; inputs may hold +-inf."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(kind, params, [np.asarray(value, dtype=DTYPE) for value in inputs])


# = BACKWARD ============================================================================
def backward_node(
    kind: NodeKind,
    params: Union[dict, None],
    inputs: Sequence[np.ndarray],
    output: np.ndarray,
    grad_output: np.ndarray,
) -> tuple[list[np.ndarray], Union[dict, None]]:
    """Gradients of one operator.

    Returns
    -------
    input_grads : list[np.ndarray]
        One gradient per input slot.
    param_grads : dict or None
        `{"kernel": ..., "bias": ...}` for parameterized kinds.
    """
    tag = kind.tag
    g = grad_output
    x = inputs[0] if inputs else None

    if tag in ("input", "output"):
        return [g], None
    if tag == "relu":
        return [g * (x > 0.0)], None
    if tag == "negate":
        return [-g], None
    if tag == "flatten":
        return [g.reshape(x.shape)], None
    if tag == "exp-affine-pow":
        alpha = int(kind.attrs["alpha"])
        beta, delta = float(kind.attrs["beta"]), float(kind.attrs["delta"])
        expo = np.exp(beta * x)
        base = expo - delta
        slope = np.ones_like(base) if alpha == 1 else int_power(base, alpha - 1)
        return [g * alpha * slope * beta * expo], None
    if tag == "channel-max-reduce":
        index = np.argmax(x, axis=1)[:, None]
        grad = np.zeros_like(x)
        np.put_along_axis(grad, index, g, axis=1)
        return [grad], None
    if tag == "dense":
        grads = {"kernel": g.T @ x, "bias": g.sum(axis=0)}
        return [g @ params["kernel"]], grads
    if tag == "conv2d":
        kernel, stride = int(kind.attrs["kernel"]), int(kind.attr("stride", 1))
        pad = int(kind.attr("padding", 0))
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = _windows(padded, kernel, stride)
        grads = {
            "kernel": np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])),
            "bias": g.sum(axis=(0, 2, 3)),
        }
        window_grads = np.tensordot(g, params["kernel"], axes=([1], [0]))
        window_grads = window_grads.transpose(0, 3, 1, 2, 4, 5)
        grad = _scatter_windows(window_grads, padded.shape, kernel, stride)
        height, width = x.shape[2], x.shape[3]
        return [grad[:, :, pad : pad + height, pad : pad + width]], grads
    if tag in WINDOW_POOL_TAGS:
        kernel, stride = int(kind.attrs["kernel"]), int(kind.attr("stride", 1))
        windows = _windows(x, kernel, stride)
        if tag == "avg-pool":
            window_grads = np.broadcast_to(
                g[..., None, None] / (kernel * kernel), windows.shape
            )
        else:
            flat = windows.reshape(windows.shape[:4] + (kernel * kernel,))
            pick = np.argmax if tag == "max-pool" else np.argmin
            window_grads = _route(flat, g, pick).reshape(windows.shape)
        return [_scatter_windows(window_grads, x.shape, kernel, stride)], None
    if tag in ADAPTIVE_POOL_TAGS:
        out_h, out_w = _pair(kind.attrs["out"])
        grad = np.zeros_like(x)
        for i, (h0, h1) in enumerate(adaptive_bounds(x.shape[2], out_h)):
            for j, (w0, w1) in enumerate(adaptive_bounds(x.shape[3], out_w)):
                cell = g[:, :, i, j]
                if tag == "adaptive-avg-pool":
                    grad[:, :, h0:h1, w0:w1] += cell[..., None, None] / ((h1 - h0) * (w1 - w0))
                else:
                    region = x[:, :, h0:h1, w0:w1]
                    flat = region.reshape(region.shape[:2] + (-1,))
                    grad[:, :, h0:h1, w0:w1] += _route(flat, cell, np.argmax).reshape(
                        region.shape
                    )
        return [grad], None
    if tag in MERGE_TAGS:
        left, right = inputs
        units = kind.attr("units")
        if units is not None:
            units = list(units)
            grad_left = np.array(g, copy=True)
            grad_right = np.zeros_like(right)
            if tag == "add":
                grad_right[:, units] = g[:, units]
            else:
                grad_left[:, units] = g[:, units] * right[:, units]
                grad_right[:, units] = g[:, units] * left[:, units]
            return [grad_left, grad_right], None
        if tag == "add":
            return [_unbroadcast(g, left.shape), _unbroadcast(g, right.shape)], None
        return [
            _unbroadcast(g * right, left.shape),
            _unbroadcast(g * left, right.shape),
        ], None
    raise ShapeError(f"no gradient for node kind '{tag}'")


# = LOSS ================================================================================
def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, reduce: bool = True
) -> tuple[Union[float, np.ndarray], np.ndarray]:
    """Cross-entropy of softmax(logits) against integer labels.

    Returns the mean loss (or per-example losses with `reduce=False`) and the
    gradient of the mean loss with respect to the logits.
    """
    labels = np.asarray(labels, dtype=np.int64)
    log_probs = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    losses = -log_probs[rows, labels]
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= logits.shape[0]
    return (float(losses.mean()) if reduce else losses), grad
