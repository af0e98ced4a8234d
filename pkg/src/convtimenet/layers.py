"""Layer semantics with explicit forward/backward pairs.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the cache plus the upstream gradient.  Parameter
gradients come back as dicts keyed like ``params()`` of the component.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyInputError, NumericError
from .tensor import conv_bank_backward, conv_bank_forward

log = logging.getLogger(__name__)

TRAIN = "train"
INFER = "infer"
TYPE1 = "type1"
TYPE2 = "type2"

LOG_CLAMP = 1e-12


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")


@dataclass
class FilterBank:
    """Filters grouped by length; ``weights[g]`` is ``[F_g, f_g, in_channels]``."""

    lengths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not self.lengths:
            raise DimensionError("a filter bank needs at least one length")
        if list(self.lengths) != sorted(set(self.lengths)):
            raise DimensionError(f"lengths must be distinct and ascending: {self.lengths}")
        counts = {w.shape[0] for w in self.weights}
        if len(counts) != 1:
            raise DimensionError("every length group must hold the same number of filters")
        for f, w, b in zip(self.lengths, self.weights, self.biases):
            if w.ndim != 3 or w.shape[1] != f or b.shape != (w.shape[0],):
                raise DimensionError(f"group f={f} has weights {w.shape}, bias {b.shape}")

    @classmethod
    def zeros(cls, lengths, filters_per_length, in_channels, dtype=np.float64):
        lengths = list(lengths)
        return cls(
            lengths,
            [np.zeros((filters_per_length, f, in_channels), dtype) for f in lengths],
            [np.zeros(filters_per_length, dtype) for _ in lengths],
        )

    @property
    def filters_per_length(self) -> int:
        return self.weights[0].shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[2]

    @property
    def out_channels(self) -> int:
        return self.filters_per_length * len(self.lengths)

    def channel_lengths(self) -> list[int]:
        """Filter length of every output channel, in channel order."""
        return [f for f in self.lengths for _ in range(self.filters_per_length)]

    def filter(self, k: int) -> tuple[np.ndarray, float]:
        """Weights ``[f, in_channels]`` and bias of output channel ``k``."""
        if not 0 <= k < self.out_channels:
            raise IndexError(f"filter index {k} out of range [0, {self.out_channels})")
        g, i = divmod(k, self.filters_per_length)
        return self.weights[g][i], float(self.biases[g][i])

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for f, w, b in zip(self.lengths, self.weights, self.biases):
            out[f"w{f}"] = w
            out[f"b{f}"] = b
        return out


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
            eps,
            momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class ConvBlock:
    kind: str
    bank: FilterBank
    bn: BatchNorm
    proj: FilterBank | None = None
    proj_bn: BatchNorm | None = None

    def __post_init__(self):
        if self.kind not in (TYPE1, TYPE2):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind == TYPE1 and self.proj is not None:
            raise DimensionError("type1 blocks carry no projection")
        if (self.proj is None) != (self.proj_bn is None):
            raise DimensionError("projection and its batch norm come together")
        if self.bn.channels != self.bank.out_channels:
            raise DimensionError("batch norm width differs from the filter bank")

    @property
    def out_channels(self) -> int:
        return self.bank.out_channels

    def params(self) -> dict[str, np.ndarray]:
        out = {f"conv.{k}": v for k, v in self.bank.params().items()}
        out.update({f"bn.{k}": v for k, v in self.bn.params().items()})
        if self.proj is not None:
            out.update({f"proj.conv.{k}": v for k, v in self.proj.params().items()})
            out.update({f"proj.bn.{k}": v for k, v in self.proj_bn.params().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {f"bn.{k}": v for k, v in self.bn.buffers().items()}
        if self.proj_bn is not None:
            out.update({f"proj.bn.{k}": v for k, v in self.proj_bn.buffers().items()})
        return out

    def conv_param_names(self) -> list[str]:
        """Names of convolution arrays (the ones a freeze mask excludes)."""
        names = [f"conv.{k}" for k in self.bank.params()]
        if self.proj is not None:
            names += [f"proj.conv.{k}" for k in self.proj.params()]
        return names


# -- filter bank -------------------------------------------------------------


def filterbank_forward(x: np.ndarray, bank: FilterBank):
    """Concatenated same-length convolutions, channels grouped by ascending length.

    ``x`` is ``[B, T, C]``, or a single ``[T, C]`` map (then the output is
    ``[T, m]`` too).
    """
    x = np.asarray(x)
    if x.shape[-1] != bank.in_channels:
        raise DimensionError(f"input has {x.shape[-1]} channels, bank expects {bank.in_channels}")
    if x.ndim == 2:
        y, cache = filterbank_forward(x[None], bank)
        return y[0], cache
    y = conv_bank_forward(x, bank.weights, bank.biases)
    return y, x


def filterbank_backward(cache, grad_out: np.ndarray, bank: FilterBank, need_grad_x=True):
    gx, gw, gb = conv_bank_backward(cache, bank.weights, grad_out, need_grad_x)
    grads = {}
    for f, w, b in zip(bank.lengths, gw, gb):
        grads[f"w{f}"] = w
        grads[f"b{f}"] = b
    return gx, grads


# -- batch norm --------------------------------------------------------------


def batchnorm_forward(x, bn: BatchNorm, mode: str, update_stats: bool = True):
    """Per-channel normalization with statistics pooled over batch and time.

    ``x`` is ``[B, T, C]`` (a list of ``[T, C]`` maps is stacked).  Train mode
    normalizes with batch statistics and, when ``update_stats``, moves the
    running estimates by ``momentum``; infer mode uses the running estimates.
    """
    _check_mode(mode)
    if isinstance(x, (list, tuple)):
        if not x:
            raise EmptyInputError("batch norm needs at least one map")
        x = np.stack(x)
    if x.ndim != 3 or x.shape[0] == 0 or x.shape[1] == 0:
        raise EmptyInputError(f"batch norm needs a non-empty [B, T, C] batch, got {x.shape}")
    if x.shape[2] != bn.channels:
        raise DimensionError(f"input has {x.shape[2]} channels, batch norm has {bn.channels}")
    if mode == TRAIN:
        mu = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        if update_stats:
            m = bn.momentum
            bn.running_mean[...] = (1 - m) * bn.running_mean + m * mu
            bn.running_var[...] = (1 - m) * bn.running_var + m * var
    else:
        mu, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mu) * inv_std
    y = bn.gamma * xhat + bn.beta
    return y, (mode, xhat, inv_std)


def batchnorm_backward(cache, grad_out: np.ndarray, bn: BatchNorm):
    mode, xhat, inv_std = cache
    grads = {
        "gamma": (grad_out * xhat).sum(axis=(0, 1)),
        "beta": grad_out.sum(axis=(0, 1)),
    }
    gxhat = grad_out * bn.gamma
    if mode == INFER:
        return gxhat * inv_std, grads
    n = xhat.shape[0] * xhat.shape[1]
    gx = (inv_std / n) * (
        n * gxhat - gxhat.sum(axis=(0, 1)) - xhat * (gxhat * xhat).sum(axis=(0, 1))
    )
    return gx, grads


# -- blocks ------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def block_forward(x_prev, x_skip, block: ConvBlock, mode: str, update_stats: bool = True):
    """One convolutional block.

    Type-1: ``ReLU(BN(bank(x_prev)))``.  Type-2: the skip input (projected by a
    1x1 bank plus its own BN when channel counts differ) is added to
    ``BN(bank(x_prev))`` before the ReLU.
    """
    y, c_bank = filterbank_forward(x_prev, block.bank)
    y, c_bn = batchnorm_forward(y, block.bn, mode, update_stats)
    c_proj = None
    if block.kind == TYPE2:
        if x_skip is None:
            raise ValueError("type2 block needs the skip input")
        if block.proj is not None:
            s, c_pconv = filterbank_forward(x_skip, block.proj)
            s, c_pbn = batchnorm_forward(s, block.proj_bn, mode, update_stats)
            c_proj = (c_pconv, c_pbn)
        else:
            s = x_skip
        if s.shape != y.shape:
            raise DimensionError(f"skip shape {s.shape} cannot be added to {y.shape}")
        y = y + s
    out = relu(y)
    return out, (c_bank, c_bn, c_proj, out > 0)


def block_backward(cache, grad_out, block: ConvBlock, need_grad_x=True):
    """Returns ``(grad_x_prev, grad_x_skip, grads)``; grad_x_skip is None for type1."""
    c_bank, c_bn, c_proj, active = cache
    g = grad_out * active
    grads = {}
    g_skip = None
    if block.kind == TYPE2:
        if block.proj is not None:
            c_pconv, c_pbn = c_proj
            gs, gbn = batchnorm_backward(c_pbn, g, block.proj_bn)
            grads.update({f"proj.bn.{k}": v for k, v in gbn.items()})
            g_skip, gconv = filterbank_backward(c_pconv, gs, block.proj, need_grad_x)
            grads.update({f"proj.conv.{k}": v for k, v in gconv.items()})
        else:
            g_skip = g
    gy, gbn = batchnorm_backward(c_bn, g, block.bn)
    grads.update({f"bn.{k}": v for k, v in gbn.items()})
    gx, gconv = filterbank_backward(c_bank, gy, block.bank, need_grad_x)
    grads.update({f"conv.{k}": v for k, v in gconv.items()})
    return gx, g_skip, grads


# -- classifier output -------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    logits = np.asarray(logits)
    if logits.shape[-1] < 1:
        raise EmptyInputError("softmax needs at least one logit")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_batch(probs, targets, reduction: str = "mean") -> float:
    """Negative log-likelihood of the target classes.

    Probabilities below ``LOG_CLAMP`` are clamped; see ``clamped_count``.
    """
    probs = np.asarray(probs)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim == 1:
        probs = probs[None]
    if targets.shape != (probs.shape[0],):
        raise DimensionError("one target per probability vector is required")
    if np.any(targets < 0) or np.any(targets >= probs.shape[1]):
        raise IndexError("target class out of range")
    p = probs[np.arange(len(targets)), targets]
    n_clamped = int(np.count_nonzero(p < LOG_CLAMP))
    if n_clamped:
        log.warning("clamped %d target probabilities at %g", n_clamped, LOG_CLAMP)
    total = float(-np.log(np.maximum(p, LOG_CLAMP)).sum())
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / len(targets)
    raise ValueError(f"unknown reduction {reduction!r}")


def clamped_count(probs, targets) -> int:
    probs = np.atleast_2d(probs)
    p = probs[np.arange(len(targets)), np.asarray(targets)]
    return int(np.count_nonzero(p < LOG_CLAMP))


def softmax_xent_backward(probs: np.ndarray, targets, reduction: str = "mean") -> np.ndarray:
    """Gradient of the cross-entropy loss w.r.t. the logits."""
    g = probs.copy()
    g[np.arange(len(targets)), targets] -= 1
    if reduction == "mean":
        g /= len(targets)
    return g
