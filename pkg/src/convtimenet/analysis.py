"""First-layer filter relevance, activation maps and occlusion sensitivity."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .layers import INFER
from .model import CtnModel, Head, forward_classify
from .tensor import conv_bank_forward, pad_widths


@dataclass
class RelevanceEntry:
    index: int
    length: int
    relevance: float
    weights: np.ndarray
    bias: float


@dataclass
class RelevanceReport:
    entries: list[RelevanceEntry]  # sorted by relevance, highest first

    def top(self, n: int = 1) -> list[RelevanceEntry]:
        return self.entries[:n]


def first_layer_maps(model: CtnModel, values: np.ndarray) -> np.ndarray:
    """Raw first-layer convolution outputs (bias included, before BN), ``[N, T, m_1]``."""
    bank = model.blocks[0].bank
    x = np.asarray(values, dtype=model.dtype)
    if x.ndim == 1:
        x = x[None]
    return conv_bank_forward(x[:, :, None], bank.weights, bank.biases)


def filter_relevance(model: CtnModel, dataset: Dataset | np.ndarray) -> RelevanceReport:
    """Mean over series of each first-layer filter's peak raw activation.

    Sums are exactly rounded, so the result does not depend on sample order.
    """
    values = dataset.values if isinstance(dataset, Dataset) else np.asarray(dataset)
    if len(values) == 0:
        raise ConfigError("relevance needs at least one series")
    peaks = np.concatenate(
        [first_layer_maps(model, values[s : s + 256]).max(axis=1) for s in range(0, len(values), 256)]
    )
    n = peaks.shape[0]
    bank = model.blocks[0].bank
    lengths = bank.channel_lengths()
    entries = []
    for k in range(peaks.shape[1]):
        w, b = bank.filter(k)
        r = math.fsum(peaks[:, k].tolist()) / n
        entries.append(RelevanceEntry(k, lengths[k], r, w[:, 0].copy(), b))
    entries.sort(key=lambda e: (-e.relevance, e.index))
    return RelevanceReport(entries)


def activation_map(model: CtnModel, k: int, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Raw first-layer map of filter ``k`` for one series and its first argmax."""
    bank = model.blocks[0].bank
    if not 0 <= k < bank.out_channels:
        raise IndexError(f"filter index {k} out of range [0, {bank.out_channels})")
    a = first_layer_maps(model, x)[0, :, k]
    return a, int(np.argmax(a))


def overlay_start(model: CtnModel, k: int, argmax: int) -> int:
    """Series index where filter ``k`` starts when drawn at its peak response."""
    f = model.blocks[0].bank.channel_lengths()[k]
    return argmax - pad_widths(f)[0]


@dataclass
class OcclusionTrace:
    window: int
    stride: int
    positions: np.ndarray
    sensitivities: np.ndarray
    occluded_probabilities: np.ndarray
    predicted_class: int
    base_probability: float

    @property
    def most_sensitive(self) -> int:
        """Window start with the largest probability drop (first on ties)."""
        return int(self.positions[np.argmin(self.sensitivities)])


def occlusion_window(T: int, window_fraction: float) -> int:
    w = max(1, int(round(window_fraction * T)))
    if w > T:
        raise ConfigError(f"occlusion window {w} longer than the series ({T})")
    return w


def occlusion_sensitivity(
    model: CtnModel,
    head: Head,
    x: np.ndarray,
    window_fraction: float = 0.1,
    stride: int = 1,
    chunk: int = 128,
) -> OcclusionTrace:
    """Slide a zero window over ``x`` and track the predicted-class probability.

    Zero is the series mean after z-normalization.  ``s_t`` is indexed by the
    window start ``t`` and equals occluded minus unoccluded probability.
    Everything runs in infer mode.
    """
    x = np.asarray(x, dtype=model.dtype)
    T = x.shape[0]
    w = occlusion_window(T, window_fraction)
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    base = forward_classify(model, head, x, INFER)
    c = int(np.argmax(base))
    positions = np.arange(0, T - w + 1, stride)
    probs = np.empty(len(positions))
    for s in range(0, len(positions), chunk):
        pos = positions[s : s + chunk]
        batch = np.repeat(x[None], len(pos), axis=0)
        for i, t in enumerate(pos):
            batch[i, t : t + w] = 0
        probs[s : s + len(pos)] = forward_classify(model, head, batch, INFER)[:, c]
    return OcclusionTrace(w, stride, positions, probs - base[c], probs, c, float(base[c]))


# -- reports -------------------------------------------------------------------


def write_relevance_report(report: RelevanceReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["rank", "filter", "length", "relevance", "bias", "weights"])
        for rank, e in enumerate(report.entries):
            w.writerow([rank, e.index, e.length, repr(e.relevance), repr(e.bias), " ".join(repr(float(v)) for v in e.weights)])


def write_occlusion_trace(trace: OcclusionTrace, path, sample: int | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample", "position", "occluded_probability", "sensitivity", "predicted_class", "base_probability", "window"])
        for t, p, s in zip(trace.positions, trace.occluded_probabilities, trace.sensitivities):
            w.writerow(["" if sample is None else sample, int(t), repr(float(p)), repr(float(s)), trace.predicted_class, repr(trace.base_probability), trace.window])


def plot_description(x, trace: OcclusionTrace | None = None, filters=()) -> dict:
    """Data for an external renderer: the series, filter overlays and ``s_t``.

    ``filters`` is a sequence of ``(index, weights, overlay_start, activation)``.
    """
    desc = {"series": [float(v) for v in x]}
    desc["filters"] = [
        {"index": int(k), "weights": [float(v) for v in wts], "start": int(start), "activation": [float(v) for v in act]}
        for k, wts, start, act in filters
    ]
    if trace is not None:
        desc["occlusion"] = {
            "window": trace.window,
            "positions": trace.positions.tolist(),
            "sensitivity": trace.sensitivities.tolist(),
            "predicted_class": trace.predicted_class,
            "base_probability": trace.base_probability,
        }
    return desc


def write_plot_description(desc: dict, path) -> None:
    Path(path).write_text(json.dumps(desc, indent=1) + "\n")
