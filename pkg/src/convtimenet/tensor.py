"""Dense numeric kernels.

Feature maps are channels-last arrays: a single map is ``[T, C]`` and a batch
is ``[B, T, C]``.  Convolution is same-length cross-correlation (no kernel
flip).  For a filter of length ``f`` the input is zero padded with
``floor((f-1)/2)`` samples on the left and ``ceil((f-1)/2)`` on the right.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, EmptyInputError, NumericError

def pad_widths(f: int) -> tuple[int, int]:
    """Left/right zero padding that keeps the output length equal to T."""
    if f < 1:
        raise DimensionError(f"filter length must be >= 1, got {f}")
    return (f - 1) // 2, f // 2


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")


def conv_group_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Apply ``F`` filters of one common length to a batch.

    x: ``[B, T, C]``; weights: ``[F, f, C]``; bias: ``[F]``.  Returns ``[B, T, F]``.
    """
    if x.ndim != 3:
        raise DimensionError(f"expected [B, T, C] input, got shape {x.shape}")
    F, f, C = weights.shape
    B, T, Cx = x.shape
    if Cx != C:
        raise DimensionError(f"input has {Cx} channels, filters expect {C}")
    if T < 1:
        raise EmptyInputError("time axis is empty")
    if bias.shape != (F,):
        raise DimensionError(f"bias shape {bias.shape} does not match {F} filters")
    left, right = pad_widths(f)
    xpad = np.pad(x, ((0, 0), (left, right), (0, 0)))
    out = np.zeros((B, T, F), dtype=np.result_type(x, weights))
    # one matmul per tap: out[t] += x[t + j - left] @ w[:, j, :].T
    for j in range(f):
        out += xpad[:, j : j + T, :] @ weights[:, j, :].T
    out += bias
    return out


def conv_group_backward(
    x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv_group_forward(x, weights, bias))``.

    Returns ``(grad_x [B, T, C], grad_weights [F, f, C], grad_bias [F])``.
    """
    F, f, C = weights.shape
    B, T, _ = x.shape
    if grad_out.shape != (B, T, F):
        raise DimensionError(f"upstream gradient shape {grad_out.shape} != {(B, T, F)}")
    left, right = pad_widths(f)
    dtype = np.result_type(x, weights, grad_out)
    xpad = np.pad(x, ((0, 0), (left, right), (0, 0)))
    g2 = np.ascontiguousarray(grad_out).reshape(B * T, F)
    grad_w = np.empty((F, f, C), dtype=dtype)
    gxpad = np.zeros(xpad.shape, dtype=dtype)
    for j in range(f):
        grad_w[:, j, :] = g2.T @ xpad[:, j : j + T, :].reshape(B * T, C)
        gxpad[:, j : j + T, :] += grad_out @ weights[:, j, :]
    grad_b = grad_out.sum(axis=(0, 1))
    return gxpad[:, left : left + T, :], grad_w, grad_b


def conv1d_same(x: np.ndarray, weights: np.ndarray, bias: float = 0.0) -> np.ndarray:
    """Single filter on a single map: x ``[T, C]``, weights ``[f, C]`` -> ``[T]``."""
    x = np.asarray(x, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if weights.ndim == 1:
        weights = weights[:, None]
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels, filter expects {weights.shape[1]}"
        )
    if x.shape[0] < 1:
        raise EmptyInputError("time axis is empty")
    _check_finite(x, "convolution input")
    out = conv_group_forward(x[None], weights[None], np.array([bias], dtype=x.dtype))
    return out[0, :, 0]


def conv1d_grads(
    x: np.ndarray, weights: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradients of ``sum(upstream * conv1d_same(x, weights, b))``.

    Returns ``(grad_input [T, C], grad_weights [f, C], grad_bias)``.
    """
    x = np.asarray(x, dtype=float)
    weights = np.asarray(weights, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if weights.ndim == 1:
        weights = weights[:, None]
    if x.shape[1] != weights.shape[1] or upstream.shape != (x.shape[0],):
        raise DimensionError("shapes inconsistent with conv1d_same")
    gx, gw, gb = conv_group_backward(x[None], weights[None], upstream[None, :, None])
    return gx[0], gw[0], float(gb[0])


def affine(z: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``bias + weights @ z``; z may carry a leading batch axis."""
    z = np.asarray(z)
    if weights.ndim != 2 or bias.shape != (weights.shape[0],):
        raise DimensionError(f"weights {weights.shape} and bias {bias.shape} disagree")
    if z.shape[-1] != weights.shape[1]:
        raise DimensionError(f"input size {z.shape[-1]} != weight columns {weights.shape[1]}")
    return z @ weights.T + bias


def mean_over_time(x: np.ndarray) -> np.ndarray:
    """Global average over the time axis (``[T, C]`` -> ``[C]``, batched too)."""
    x = np.asarray(x)
    if x.shape[-2] == 0:
        raise EmptyInputError("cannot average over an empty time axis")
    return x.mean(axis=-2)


def _offset_plan(lengths: list[int]) -> tuple[int, int, list[int]]:
    # Offsets run from -max_left to max_right.  Padding grows with f, so the
    # filters covering a given offset are always a trailing block of channels.
    if not lengths or any(a > b for a, b in zip(lengths, lengths[1:])):
        raise DimensionError("bank lengths must be non-empty and ascending")
    max_left, max_right = pad_widths(lengths[-1])
    return max_left, max_right, lengths


def conv_bank_forward(
    x: np.ndarray, weights: list[np.ndarray], biases: list[np.ndarray]
) -> np.ndarray:
    """Apply several filter groups (ascending lengths) and concatenate channels.

    Equivalent to concatenating ``conv_group_forward`` outputs along the
    channel axis, but issues one matmul per tap offset.
    """
    if x.ndim != 3:
        raise DimensionError(f"expected [B, T, C] input, got shape {x.shape}")
    B, T, C = x.shape
    if T < 1:
        raise EmptyInputError("time axis is empty")
    for w, b in zip(weights, biases):
        if w.shape[2] != C:
            raise DimensionError(f"input has {C} channels, filters expect {w.shape[2]}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match {w.shape[0]} filters")
    lengths = [w.shape[1] for w in weights]
    max_left, max_right, _ = _offset_plan(lengths)
    counts = [w.shape[0] for w in weights]
    starts = np.cumsum([0] + counts)
    m = int(starts[-1])
    dtype = np.result_type(x, *weights)
    xpad = np.pad(x, ((0, 0), (max_left, max_right), (0, 0)))
    out = np.zeros((B, T, m), dtype=dtype)
    for o in range(-max_left, max_right + 1):
        first = next(g for g, f in enumerate(lengths) if -((f - 1) // 2) <= o <= f // 2)
        taps = [w[:, o + (w.shape[1] - 1) // 2, :] for w in weights[first:]]
        wo = taps[0] if len(taps) == 1 else np.concatenate(taps, axis=0)
        xs = xpad[:, max_left + o : max_left + o + T, :].reshape(B * T, C)
        out[:, :, starts[first]:] += (xs @ wo.T).reshape(B, T, -1)
    out += np.concatenate(biases)
    return out


def conv_bank_backward(
    x: np.ndarray, weights: list[np.ndarray], grad_out: np.ndarray, need_grad_x: bool = True
) -> tuple[np.ndarray | None, list[np.ndarray], list[np.ndarray]]:
    """Gradients for ``conv_bank_forward``: ``(grad_x, grad_weights, grad_biases)``.

    With ``need_grad_x=False`` the input gradient is skipped and returned as None.
    """
    B, T, C = x.shape
    lengths = [w.shape[1] for w in weights]
    max_left, max_right, _ = _offset_plan(lengths)
    counts = [w.shape[0] for w in weights]
    starts = np.cumsum([0] + counts)
    if grad_out.shape != (B, T, int(starts[-1])):
        raise DimensionError(f"upstream gradient shape {grad_out.shape} does not match the bank")
    dtype = np.result_type(x, grad_out, *weights)
    xpad = np.pad(x, ((0, 0), (max_left, max_right), (0, 0)))
    g2 = np.ascontiguousarray(grad_out).reshape(B * T, -1)
    grad_w = [np.empty(w.shape, dtype=dtype) for w in weights]
    gxpad = np.zeros(xpad.shape, dtype=dtype) if need_grad_x else None
    for o in range(-max_left, max_right + 1):
        first = next(g for g, f in enumerate(lengths) if -((f - 1) // 2) <= o <= f // 2)
        taps = [w[:, o + (w.shape[1] - 1) // 2, :] for w in weights[first:]]
        wo = taps[0] if len(taps) == 1 else np.concatenate(taps, axis=0)
        lo = max_left + o
        xs = xpad[:, lo : lo + T, :].reshape(B * T, C)
        gwo = g2[:, starts[first]:].T @ xs
        if need_grad_x:
            gxpad[:, lo : lo + T, :] += (g2[:, starts[first]:] @ wo).reshape(B, T, C)
        for g in range(first, len(weights)):
            a, z = starts[g] - starts[first], starts[g + 1] - starts[first]
            grad_w[g][:, o + (lengths[g] - 1) // 2, :] = gwo[a:z]
    grad_b = grad_out.sum(axis=(0, 1))
    grad_bs = [grad_b[starts[g] : starts[g + 1]] for g in range(len(weights))]
    grad_x = gxpad[:, max_left : max_left + T, :] if need_grad_x else None
    return grad_x, grad_w, grad_bs
