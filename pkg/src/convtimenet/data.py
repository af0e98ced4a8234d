"""Datasets: UCR-style text files, z-normalization, batch sampling, generators."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataFormatError

DELIMITERS = {"tab": "\t", "comma": ","}

UP, DOWN = 0, 1


class TimeSeriesSample(NamedTuple):
    values: np.ndarray
    label: int


@dataclass
class Dataset:
    """A labelled collection of equal-length univariate series.

    ``values`` is ``[N, T]``; ``labels`` are contiguous class indices.
    ``label_values`` holds the original label of each index, and ``meta``
    carries generator side information (e.g. pattern segments).
    """

    name: str
    values: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    label_values: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    constant_rows: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataFormatError(f"{self.name}: expected a non-empty [N, T] array, got {self.values.shape}")
        if self.labels.shape != (self.values.shape[0],):
            raise DataFormatError(f"{self.name}: one label per series is required")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise DataFormatError(f"{self.name}: label outside [0, {self.num_classes})")
        if not self.label_values:
            self.label_values = [float(k) for k in range(self.num_classes)]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> TimeSeriesSample:
        return TimeSeriesSample(self.values[i], int(self.labels[i]))

    @property
    def series_length(self) -> int:
        return self.values.shape[1]

    @property
    def label_map(self) -> dict[float, int]:
        return {v: k for k, v in enumerate(self.label_values)}

    def subset(self, idx, split: str | None = None, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        meta = {k: (v[idx] if isinstance(v, np.ndarray) and len(v) == len(self) else v) for k, v in self.meta.items()}
        return replace(
            self,
            name=name or self.name,
            values=self.values[idx],
            labels=self.labels[idx],
            split=split or self.split,
            meta=meta,
            label_values=list(self.label_values),
        )


def merge(a: Dataset, b: Dataset, split: str = "train+test") -> Dataset:
    """Concatenate two splits of one dataset (labels must share a mapping)."""
    if a.series_length != b.series_length:
        raise DataFormatError(f"cannot merge series of length {a.series_length} and {b.series_length}")
    if b.label_values[: len(a.label_values)] != a.label_values:
        raise DataFormatError("splits use different label mappings")
    return Dataset(
        a.name,
        np.vstack([a.values, b.values]),
        np.concatenate([a.labels, b.labels]),
        max(a.num_classes, b.num_classes),
        split,
        list(b.label_values if len(b.label_values) > len(a.label_values) else a.label_values),
        constant_rows=a.constant_rows + b.constant_rows,
    )


def znormalize(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-series standardization; constant series become all zeros.

    Returns the normalized array and the number of constant series.
    """
    values = np.asarray(values, dtype=np.float64)
    mu = values.mean(axis=-1, keepdims=True)
    sd = values.std(axis=-1, keepdims=True)
    constant = (sd == 0).ravel()
    out = np.where(sd > 0, (values - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    return out, int(constant.sum())


# -- UCR text format -----------------------------------------------------------


def _resolve_delimiter(delimiter: str | None, first_line: str) -> str:
    if delimiter is None:
        return "\t" if "\t" in first_line else ","
    if delimiter in DELIMITERS:
        return DELIMITERS[delimiter]
    if delimiter in DELIMITERS.values():
        return delimiter
    raise DataFormatError(f"unsupported delimiter {delimiter!r}")


def load_ucr_file(
    path,
    delimiter: str | None = None,
    label_values: list[float] | None = None,
    name: str | None = None,
    split: str = "train",
    normalize: bool = True,
) -> Dataset:
    """Read a file with one series per row: label, then T values.

    Labels are mapped to 0..K-1 by ascending original value.  Pass the
    ``label_values`` of the train split when reading the matching test split;
    labels absent from it are appended (with a warning).  Series are
    z-normalized one by one unless ``normalize`` is False.
    """
    path = Path(path)
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    sep = _resolve_delimiter(delimiter, lines[0])
    raw_labels = []
    rows = []
    for lineno, line in enumerate(lines, 1):
        fields = line.strip().split(sep)
        try:
            nums = [float(f) for f in fields]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-numeric field ({exc})") from None
        if len(nums) < 2:
            raise DataFormatError(f"{path}:{lineno}: a row needs a label and at least one value")
        if rows and len(nums) - 1 != len(rows[0]):
            raise DataFormatError(
                f"{path}:{lineno}: ragged row with {len(nums) - 1} values, expected {len(rows[0])}"
            )
        raw_labels.append(nums[0])
        rows.append(nums[1:])
    values = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataFormatError(f"{path}: non-finite values")

    if label_values is None:
        label_values = sorted(set(raw_labels))
    else:
        label_values = list(label_values)
        unknown = sorted(set(raw_labels) - set(label_values))
        if unknown:
            warnings.warn(f"{path}: labels {unknown} not seen in the reference split; appended")
            label_values += unknown
    mapping = {v: k for k, v in enumerate(label_values)}
    labels = np.array([mapping[v] for v in raw_labels], dtype=np.int64)

    constant = 0
    if normalize:
        values, constant = znormalize(values)
        if constant:
            warnings.warn(f"{path}: {constant} constant series normalized to zeros")
    return Dataset(
        name or path.stem.split("_")[0],
        values,
        labels,
        len(label_values),
        split,
        label_values,
        constant_rows=constant,
    )


def _format_label(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_ucr_file(dataset: Dataset, path, delimiter: str = "tab") -> None:
    """Write in the same row format; values use round-trip float formatting."""
    sep = _resolve_delimiter(delimiter, "")
    lines = []
    for x, y in zip(dataset.values, dataset.labels):
        lab = _format_label(dataset.label_values[y])
        lines.append(sep.join([lab] + [repr(float(v)) for v in x]))
    Path(path).write_text("\n".join(lines) + "\n")


# -- manifest ------------------------------------------------------------------


@dataclass
class ManifestEntry:
    name: str
    path: Path
    split: str
    role: str


MANIFEST_ROLES = ("source", "validation", "target")


def read_manifest(path) -> list[ManifestEntry]:
    """Tab-separated ``name, path, split, role`` with a header row.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        need = {"name", "path", "split", "role"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataFormatError(f"{path}: header must contain {sorted(need)}")
        entries = []
        for row in reader:
            if row["role"] not in MANIFEST_ROLES:
                raise DataFormatError(f"{path}: unknown role {row['role']!r}")
            if row["split"] not in ("train", "test"):
                raise DataFormatError(f"{path}: unknown split {row['split']!r}")
            p = Path(row["path"])
            entries.append(ManifestEntry(row["name"], p if p.is_absolute() else path.parent / p, row["split"], row["role"]))
    return entries


def write_manifest(entries: list[ManifestEntry], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["name", "path", "split", "role"])
        for e in entries:
            w.writerow([e.name, str(e.path), e.split, e.role])


def load_manifest_datasets(path, delimiter: str | None = None) -> dict[str, dict[str, dict[str, Dataset]]]:
    """Load every dataset listed: ``result[role][name][split]``.

    Train splits are read first so that test splits reuse their label mapping.
    """
    entries = read_manifest(path)
    out: dict[str, dict[str, dict[str, Dataset]]] = {}
    order = sorted(entries, key=lambda e: 0 if e.split == "train" else 1)
    for e in order:
        if not e.path.is_file():
            raise FileNotFoundError(f"dataset file not found: {e.path}")
        by_split = out.setdefault(e.role, {}).setdefault(e.name, {})
        ref = by_split.get("train")
        by_split[e.split] = load_ucr_file(
            e.path, delimiter, ref.label_values if ref is not None else None, e.name, e.split
        )
    names = {r: set(d) for r, d in out.items()}
    if names.get("source", set()) & names.get("validation", set()):
        raise DataFormatError("source and validation datasets must be disjoint")
    return out


# -- batching ------------------------------------------------------------------


def sample_batches(dataset: Dataset, n: int, b: int, rng, replace: bool = True) -> list[np.ndarray]:
    """``n`` batches of ``b`` sample indices.

    With replacement every index is drawn uniformly from the whole dataset.
    Without replacement the indices walk through fresh random permutations.
    """
    if n <= 0 or b <= 0:
        raise ValueError(f"need n > 0 and b > 0, got n={n}, b={b}")
    N = len(dataset) if not isinstance(dataset, int) else dataset
    if N < 1:
        raise ValueError("cannot sample from an empty dataset")
    if replace:
        return list(rng.integers(0, N, size=(n, b)))
    need = n * b
    perms = []
    while sum(len(p) for p in perms) < need:
        perms.append(rng.permutation(N))
    flat = np.concatenate(perms)[:need]
    return list(flat.reshape(n, b))


def stratified_split(labels: np.ndarray, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Split indices per class into ``fraction`` / ``1 - fraction`` parts.

    Every class with at least two members lands in both parts.
    """
    a, b = [], []
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        cut = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            cut = min(max(cut, 1), len(idx) - 1)
        a.append(idx[:cut])
        b.append(idx[cut:])
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


# -- synthetic generators ------------------------------------------------------


def ramp(width: int, direction: int) -> np.ndarray:
    r = np.linspace(-1.0, 1.0, width)
    return r if direction == UP else r[::-1]


def place_patterns(T: int, widths, directions, starts, noise: np.ndarray | None = None) -> np.ndarray:
    """A series of baseline ``noise`` (or zeros) with ramps added at ``starts``."""
    x = np.zeros(T) if noise is None else np.array(noise, dtype=np.float64)
    for w, d, s in zip(widths, directions, starts):
        x[s : s + w] += ramp(w, d)
    return x


def _disjoint_starts(T: int, widths, rng) -> list[int]:
    # random order of segments, then random gaps that sum to the slack
    slack = T - sum(widths)
    if slack < 0:
        raise ValueError(f"patterns of widths {list(widths)} cannot fit in length {T}")
    cuts = np.sort(rng.integers(0, slack + 1, size=len(widths)))
    starts, pos = [], 0
    for i, w in enumerate(widths):
        gap = cuts[i] - (cuts[i - 1] if i else 0)
        pos += gap
        starts.append(int(pos))
        pos += w
    return starts


def gen_two_patterns(num_samples: int, T: int, noise_std: float, rng, name: str = "two_patterns") -> Dataset:
    """Four classes: the ordered pair of directions of two ramps.

    Each series gets two non-overlapping segments of length ``round(0.1 T)``;
    an ascending (-1 to +1) or descending ramp is added to each; label
    ``2 * first + second`` with up = 0, down = 1 in temporal order.  The
    segment bounds ``[start, end)`` are kept in ``meta["segments"]``.
    """
    if T < 40:
        raise ValueError("two-patterns series need T >= 40")
    rng = np.random.default_rng(rng)
    w = int(round(0.1 * T))
    values = np.empty((num_samples, T))
    labels = np.empty(num_samples, dtype=np.int64)
    segments = np.empty((num_samples, 2, 2), dtype=np.int64)
    for i in range(num_samples):
        c = int(rng.integers(4))
        dirs = (c // 2, c % 2)
        starts = _disjoint_starts(T, (w, w), rng)
        noise = rng.normal(0.0, noise_std, T) if noise_std > 0 else None
        values[i] = place_patterns(T, (w, w), dirs, starts, noise)
        labels[i] = c
        segments[i] = [[s, s + w] for s in starts]
    values, const = znormalize(values)
    return Dataset(name, values, labels, 4, meta={"segments": segments, "window": w}, constant_rows=const)


def gen_mixed_scale(
    num_samples: int,
    T: int,
    noise_std: float,
    rng,
    short_fraction: float = 0.05,
    long_fraction: float = 0.4,
    name: str = "mixed_scale",
) -> Dataset:
    """Four classes from one short and one long ramp at random positions.

    Label ``2 * short_direction + long_direction``; segments in
    ``meta["segments"]`` are ``[short, long]``.
    """
    rng = np.random.default_rng(rng)
    ws = max(2, int(round(short_fraction * T)))
    wl = max(2, int(round(long_fraction * T)))
    if ws + wl > T:
        raise ValueError("patterns cannot fit")
    values = np.empty((num_samples, T))
    labels = np.empty(num_samples, dtype=np.int64)
    segments = np.empty((num_samples, 2, 2), dtype=np.int64)
    for i in range(num_samples):
        c = int(rng.integers(4))
        dirs = (c // 2, c % 2)
        short_first = bool(rng.integers(2))
        widths = (ws, wl) if short_first else (wl, ws)
        starts = _disjoint_starts(T, widths, rng)
        s_short, s_long = (starts[0], starts[1]) if short_first else (starts[1], starts[0])
        noise = rng.normal(0.0, noise_std, T) if noise_std > 0 else None
        values[i] = place_patterns(T, (ws, wl), dirs, (s_short, s_long), noise)
        labels[i] = c
        segments[i] = [[s_short, s_short + ws], [s_long, s_long + wl]]
    values, const = znormalize(values)
    return Dataset(name, values, labels, 4, meta={"segments": segments}, constant_rows=const)


CYLINDER, BELL, FUNNEL = 0, 1, 2


def cbf_series(kind: int, T: int, a: int, b: int, eta: float = 0.0, eps=None) -> np.ndarray:
    """Cylinder / bell / funnel shape on ``[a, b]`` with amplitude ``6 + eta``."""
    t = np.arange(T, dtype=np.float64)
    inside = ((t >= a) & (t <= b)).astype(np.float64)
    amp = 6.0 + eta
    if kind == CYLINDER:
        shape = inside
    elif kind == BELL:
        shape = inside * (t - a) / (b - a)
    elif kind == FUNNEL:
        shape = inside * (b - t) / (b - a)
    else:
        raise ValueError(f"unknown CBF class {kind}")
    x = amp * shape
    return x if eps is None else x + eps


def gen_cbf(num_samples: int, T: int, rng, noise: bool = True, normalize: bool = True, name: str = "cbf") -> Dataset:
    """Cylinder-bell-funnel, K = 3.

    ``a`` is drawn from ``[T/8, T/4]`` and the event length ``b - a`` from
    ``[T/4, 3T/4]`` (clipped to the series); eta and epsilon are standard
    normal unless ``noise`` is False.
    """
    if T < 32:
        raise ValueError("CBF series need T >= 32")
    rng = np.random.default_rng(rng)
    values = np.empty((num_samples, T))
    labels = rng.integers(0, 3, size=num_samples)
    for i, kind in enumerate(labels):
        a = int(rng.integers(T // 8, T // 4 + 1))
        span = int(rng.integers(int(np.ceil(T / 4)), 3 * T // 4 + 1))
        b = min(a + span, T - 1)
        eta = rng.standard_normal() if noise else 0.0
        eps = rng.standard_normal(T) if noise else None
        values[i] = cbf_series(int(kind), T, a, b, eta, eps)
    const = 0
    if normalize:
        values, const = znormalize(values)
    return Dataset(name, values, labels, 3, constant_rows=const)


def train_test_split(ds: Dataset, n_train: int) -> tuple[Dataset, Dataset]:
    """First ``n_train`` series as train, the rest as test (generators are i.i.d.)."""
    return (
        ds.subset(np.arange(n_train), split="train"),
        ds.subset(np.arange(n_train, len(ds)), split="test"),
    )
