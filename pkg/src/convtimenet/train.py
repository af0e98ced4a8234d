"""Multi-head pretraining with validation by fine-tuning, target adaptation, evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, sample_batches, stratified_split
from .errors import ConfigError, NumericError
from .layers import INFER
from .model import CtnModel, Head, backward, batch_loss, forward_classify, new_head
from .optim import FINETUNE_LR, PRETRAIN_LR, AdamState, adam_step

log = logging.getLogger(__name__)


def _positive(cfg, names):
    for k in names:
        if getattr(cfg, k) <= 0:
            raise ConfigError(f"{k} must be positive, got {getattr(cfg, k)}")


@dataclass
class PretrainConfig:
    max_train_epochs: int = 200
    n: int = 5
    b: int = 16
    lr: float = PRETRAIN_LR
    max_val_epochs: int = 50
    val_lr: float = PRETRAIN_LR
    val_batch_size: int = 16
    val_train_fraction: float = 0.75
    validate_every: int = 1
    replace: bool = True
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        _positive(self, ["max_train_epochs", "n", "b", "lr", "max_val_epochs", "val_lr", "val_batch_size", "validate_every"])
        if not 0 < self.val_train_fraction < 1:
            raise ConfigError("val_train_fraction must lie in (0, 1)")


@dataclass
class FinetuneConfig:
    iterations: int = 12000
    lr: float = FINETUNE_LR
    batch_size: int = 16
    freeze_depth: int = 0
    smoothing_window: int = 50
    replace: bool = True
    max_grad_norm: float | None = None
    stop_loss: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        _positive(self, ["lr", "batch_size", "smoothing_window"])
        if self.freeze_depth < 0:
            raise ConfigError("freeze_depth must be >= 0")


@dataclass
class ValidationTask:
    """A held-out dataset: its train split is re-split for fine-tuning and early selection."""

    name: str
    train: Dataset
    test: Dataset


@dataclass
class EpochRecord:
    epoch: int
    validation_loss: float | None
    dataset_losses: dict[str, float] = field(default_factory=dict)
    train_losses: dict[str, float] = field(default_factory=dict)
    checkpoint: str | None = None
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationEvent:
    epoch: int
    iteration: int
    dataset: str
    loss: float
    heads: dict[str, Head]
    model: CtnModel


@dataclass
class PretrainResult:
    model: CtnModel
    heads: dict[str, Head]
    records: list[EpochRecord]
    best_epoch: int
    trace: list[tuple[int, int, str, float]]

    @property
    def best_validation_loss(self) -> float:
        return next(r.validation_loss for r in self.records if r.epoch == self.best_epoch)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def pretrain(
    source: list[Dataset],
    validation: list[ValidationTask],
    model: CtnModel,
    config: PretrainConfig,
    on_iteration: Callable[[IterationEvent], None] | None = None,
    on_epoch_end: Callable[[EpochRecord, CtnModel, dict[str, Head]], None] | None = None,
) -> PretrainResult:
    """Train the shared network with one head per source dataset.

    Each epoch visits the source datasets in random order; a dataset's ``n``
    batches run back to back, each updating the shared parameters and that
    dataset's head only.  Validated epochs are scored by fine-tuning copies
    on the validation tasks, and the epoch with the lowest score wins.
    ``model`` is trained in place; the returned model is a copy of the best
    epoch.
    """
    if not source:
        raise ConfigError("at least one source dataset is required")
    if not validation:
        raise ConfigError("at least one validation task is required")
    names = [d.name for d in source]
    if len(set(names)) != len(names):
        raise ConfigError("source dataset names must be unique")
    if set(names) & {t.name for t in validation}:
        raise ConfigError("source and validation datasets must be disjoint")

    rng = _rng(config.seed, 0)
    heads = {
        d.name: new_head(d.name, d.num_classes, model.embedding_dim, _rng(config.seed, 1, j), model.dtype)
        for j, d in enumerate(source)
    }
    core_state = AdamState(config.lr)
    head_states = {name: AdamState(config.lr) for name in heads}
    records: list[EpochRecord] = []
    trace = []
    best = (np.inf, None, None, None)  # loss, epoch, model, heads
    iteration = 0

    for epoch in range(1, config.max_train_epochs + 1):
        diverged = False
        train_losses = {}
        for j in rng.permutation(len(source)):
            ds = source[j]
            head = heads[ds.name]
            losses = []
            for idx in sample_batches(ds, config.n, config.b, rng, config.replace):
                try:
                    grads, loss = backward(model, head, ds.values[idx], ds.labels[idx])
                    if not np.isfinite(loss):
                        raise NumericError("non-finite training loss")
                    adam_step(model.params(), grads.core, core_state, model.frozen_names(), config.max_grad_norm)
                    adam_step(head.params(), grads.head, head_states[ds.name], (), config.max_grad_norm)
                except NumericError as exc:
                    log.error("epoch %d, %s: %s; halting", epoch, ds.name, exc)
                    diverged = True
                    break
                iteration += 1
                losses.append(loss)
                trace.append((epoch, iteration, ds.name, loss))
                if on_iteration is not None:
                    on_iteration(IterationEvent(epoch, iteration, ds.name, loss, heads, model))
            train_losses[ds.name] = float(np.mean(losses)) if losses else float("nan")
            if diverged:
                break
        if diverged:
            records.append(EpochRecord(epoch, None, {}, train_losses, diverged=True))
            break

        record = EpochRecord(epoch, None, {}, train_losses)
        if epoch % config.validate_every == 0 or epoch == config.max_train_epochs:
            lv, per = validate_by_finetune(model, validation, config, epoch)
            record.validation_loss, record.dataset_losses = lv, per
            log.info("epoch %d validation loss %.5f", epoch, lv)
            if lv < best[0]:
                best = (lv, epoch, model.copy(), {k: h.copy() for k, h in heads.items()})
        records.append(record)
        if on_epoch_end is not None:
            on_epoch_end(record, model, heads)

    if best[1] is None:
        raise NumericError("training diverged before any validated epoch")
    return PretrainResult(best[2], best[3], records, best[1], trace)


def validate_by_finetune(
    checkpoint: CtnModel,
    validation: list[ValidationTask],
    config: PretrainConfig,
    epoch: int = 0,
) -> tuple[float, dict[str, float]]:
    """Mean test loss over validation tasks after fine-tuning a copy on each.

    The train split of every task is divided (stratified) into fine-tuning
    and early-selection parts; the test loss is read at the fine-tuning epoch
    with the lowest early-selection loss.  ``checkpoint`` is left untouched.
    """
    per = {}
    for k, task in enumerate(validation):
        split_rng = _rng(config.seed, 3, k)  # same partition at every epoch
        fit_idx, sel_idx = stratified_split(task.train.labels, config.val_train_fraction, split_rng)
        if len(fit_idx) == 0 or len(sel_idx) == 0 or len(task.test) == 0:
            raise ConfigError(f"validation task {task.name}: empty partition")
        rng = _rng(config.seed, 2, epoch, k)
        model = checkpoint.copy()
        head = new_head(task.name, task.train.num_classes, model.embedding_dim, rng, model.dtype)
        core_state, head_state = AdamState(config.val_lr), AdamState(config.val_lr)
        X, y = task.train.values, task.train.labels
        best_sel, test_at_best = np.inf, np.inf
        for _ in range(config.max_val_epochs):
            order = rng.permutation(fit_idx)
            for s in range(0, len(order), config.val_batch_size):
                idx = order[s : s + config.val_batch_size]
                grads, _ = backward(model, head, X[idx], y[idx])
                adam_step(model.params(), grads.core, core_state, model.frozen_names(), config.max_grad_norm)
                adam_step(head.params(), grads.head, head_state, (), config.max_grad_norm)
            sel = batch_loss(model, head, X[sel_idx], y[sel_idx], mode=INFER)
            if sel < best_sel:
                best_sel = sel
                test_at_best = batch_loss(model, head, task.test.values, task.test.labels, mode=INFER)
        per[task.name] = float(test_at_best)
    return float(np.mean(list(per.values()))), per


@dataclass
class FinetuneResult:
    model: CtnModel
    head: Head
    trace: np.ndarray
    best_iteration: int | None

    def smoothed(self, window: int) -> np.ndarray:
        return smooth(self.trace, window)


def smooth(trace, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` values (fewer at the start)."""
    trace = np.asarray(trace, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(trace)])
    i = np.arange(1, len(trace) + 1)
    lo = np.maximum(i - window, 0)
    return (c[i] - c[lo]) / (i - lo)


def iterations_to_loss(trace, threshold: float, window: int = 1) -> int | None:
    """Number of iterations until the (smoothed) loss first reaches ``threshold``."""
    s = smooth(trace, window)
    hits = np.flatnonzero(s <= threshold)
    return int(hits[0]) + 1 if hits.size else None


def finetune_target(
    pretrained: CtnModel,
    target: Dataset,
    config: FinetuneConfig,
    on_iteration: Callable[[int, float], None] | None = None,
) -> FinetuneResult:
    """Adapt a copy of ``pretrained`` to ``target`` with a fresh head.

    Conv arrays of the first ``freeze_depth`` blocks stay fixed while their BN
    parameters train.  The returned parameters are those in effect at the
    iteration with the lowest training loss, smoothed over
    ``smoothing_window`` iterations (``1`` selects on raw batch losses).
    With ``stop_loss`` set, training ends once the smoothed loss reaches it.
    """
    if len(target) == 0:
        raise ConfigError("target training split is empty")
    model = pretrained.copy()
    model.freeze(config.freeze_depth)
    rng = _rng(config.seed, 4)
    head = new_head(target.name, target.num_classes, model.embedding_dim, rng, model.dtype)
    core_state, head_state = AdamState(config.lr), AdamState(config.lr)
    frozen = model.frozen_names()
    trace = np.empty(config.iterations)
    best_loss, best_it = np.inf, None
    snapshot = (model.copy(), head.copy())
    window_sum = 0.0
    batches = sample_batches(target, max(config.iterations, 1), config.batch_size, rng, config.replace)
    for it in range(config.iterations):
        idx = batches[it]
        grads, loss = backward(model, head, target.values[idx], target.labels[idx])
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at iteration {it}")
        trace[it] = loss
        window_sum += loss
        if it >= config.smoothing_window:
            window_sum -= trace[it - config.smoothing_window]
        smoothed = window_sum / min(it + 1, config.smoothing_window)
        if smoothed < best_loss:
            best_loss, best_it = smoothed, it
            snapshot = (model.copy(), head.copy())
        adam_step(model.params(), grads.core, core_state, frozen, config.max_grad_norm)
        adam_step(head.params(), grads.head, head_state, (), config.max_grad_norm)
        if on_iteration is not None:
            on_iteration(it, loss)
        if config.stop_loss is not None and smoothed <= config.stop_loss:
            trace = trace[: it + 1]
            break
    best_model, best_head = snapshot
    return FinetuneResult(best_model, best_head, trace, best_it)


def predict(model: CtnModel, head: Head, values: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Class probabilities in infer mode, ``[N, K]``."""
    values = np.asarray(values)
    out = [forward_classify(model, head, values[s : s + chunk], INFER) for s in range(0, len(values), chunk)]
    return np.concatenate(out)


def evaluate(model: CtnModel, head: Head, test: Dataset) -> float:
    """Fraction of misclassified series; argmax ties go to the lowest class index."""
    if len(test) == 0:
        raise ConfigError("test set is empty")
    pred = np.argmax(predict(model, head, test.values), axis=1)
    return float(np.mean(pred != test.labels))
