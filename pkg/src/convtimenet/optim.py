"""Adam over named parameter arrays, and a finite-difference gradient checker."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .layers import TRAIN
from .model import CtnModel, Head, embed_forward, loss_and_grads

log = logging.getLogger(__name__)

PRETRAIN_LR = 0.002
FINETUNE_LR = 2e-4


@dataclass
class AdamState:
    learning_rate: float = PRETRAIN_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def copy(self) -> "AdamState":
        return AdamState(
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.eps,
            self.t,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )

    def hyperparams(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
        }


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    frozen=(),
    max_grad_norm: float | None = None,
) -> bool:
    """One bias-corrected Adam update, in place.

    Arrays named in ``frozen`` are neither read nor written.  With
    ``max_grad_norm`` the global gradient norm is clipped; returns whether
    clipping happened.  A non-finite gradient aborts before anything changes.
    """
    names = [k for k in params if k not in frozen]
    for k in names:
        if grads[k].shape != params[k].shape:
            raise ValueError(f"gradient {k} has shape {grads[k].shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(grads[k])):
            raise NumericError(f"non-finite gradient for {k}; step aborted")
    scale = 1.0
    clipped = False
    if max_grad_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in names)))
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
            clipped = True
            log.info("gradient norm %.4g clipped to %.4g", norm, max_grad_norm)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k in names:
        p = params[k]
        g = grads[k] * scale if clipped else grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return clipped


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def failed(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    def lines(self) -> list[str]:
        out = []
        for k, e in self.max_rel_error.items():
            out.append(f"{k}\t{e:.3e}\t{'ok' if e < self.tolerance else 'FAIL'}")
        return out


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(
    model: CtnModel,
    head: Head,
    batch,
    targets,
    step_size: float = 1e-6,
    tolerance: float = 1e-4,
    analytic=None,
    oracle_dtype=np.longdouble,
    reduction: str = "mean",
) -> GradCheckReport:
    """Compare analytic gradients against central differences, per array.

    The loss is evaluated in train mode without touching running statistics.
    Central differences are taken on a copy of the model cast to
    ``oracle_dtype`` (extended precision by default) so that rounding noise
    stays far below the tolerance even where the exact gradient is zero, as
    for conv biases feeding a batch norm.  ``analytic`` overrides the
    gradients under test (a ``ParamGrads``), e.g. for fault injection.
    """
    if analytic is None:
        analytic, _, _ = loss_and_grads(model, head, batch, targets, reduction, update_stats=False)
    om = model.astype(oracle_dtype)
    oh = Head(head.task_name, head.weight.astype(oracle_dtype), head.bias.astype(oracle_dtype))
    xb = np.asarray(batch, dtype=oracle_dtype)
    frozen = model.frozen_names()

    def loss() -> float:
        return batch_loss_exact(om, oh, xb, targets, reduction)

    report = {}
    groups = [(f"core.{k}", a, analytic.core[k]) for k, a in om.params().items()]
    groups += [(f"head.{k}", a, analytic.head[k]) for k, a in oh.params().items()]
    for name, arr, grad in groups:
        if name[5:] in frozen:
            # frozen arrays must report an exactly zero gradient
            report[name] = 0.0 if not np.any(grad) else float("inf")
            continue
        num = np.empty(arr.shape, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step_size
            up = loss()
            arr[idx] = orig - step_size
            down = loss()
            arr[idx] = orig
            num[idx] = (up - down) / (2 * step_size)
        report[name] = float(relative_error(grad, num).max()) if num.size else 0.0
    return GradCheckReport(report, tolerance)


def batch_loss_exact(model: CtnModel, head: Head, batch, targets, reduction="mean"):
    # unclamped log-softmax in the model's dtype, for the oracle
    z, _ = embed_forward(model, batch, TRAIN, update_stats=False)
    logits = z @ head.weight.T + head.bias
    shift = logits - logits.max(axis=1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    t = np.asarray(targets)
    total = -logp[np.arange(len(t)), t].sum()
    return total / len(t) if reduction == "mean" else total
