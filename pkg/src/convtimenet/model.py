"""The full network: convolutional blocks, global average pooling and heads."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import (
    INFER,
    TRAIN,
    TYPE1,
    TYPE2,
    BatchNorm,
    ConvBlock,
    FilterBank,
    block_backward,
    block_forward,
    cross_entropy_batch,
    softmax,
    softmax_xent_backward,
)
from .tensor import affine, mean_over_time

DEFAULT_LENGTHS = (4, 8, 16, 32, 64)


@dataclass(frozen=True)
class ArchConfig:
    """Architecture description.

    ``block_types[l]`` says whether block ``l`` (0-based) is a plain block or
    adds the output of two blocks earlier (the network input for block 1).
    """

    lengths: tuple[int, ...] = DEFAULT_LENGTHS
    filters_per_length: int = 33
    block_types: tuple[str, ...] = (TYPE1, TYPE2, TYPE1, TYPE2)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(f) for f in self.lengths))
        object.__setattr__(self, "block_types", tuple(self.block_types))
        if not self.lengths:
            raise ConfigError("at least one filter length is required")
        if list(self.lengths) != sorted(set(self.lengths)) or self.lengths[0] < 1:
            raise ConfigError(f"filter lengths must be positive, distinct, ascending: {self.lengths}")
        if self.filters_per_length < 1:
            raise ConfigError("filters_per_length must be >= 1")
        if not self.block_types:
            raise ConfigError("at least one block is required")
        for l, kind in enumerate(self.block_types):
            if kind not in (TYPE1, TYPE2):
                raise ConfigError(f"unknown block type {kind!r}")
            if kind == TYPE2 and l == 0:
                raise ConfigError("the first block has no input two blocks back; it must be type1")

    @classmethod
    def with_total_filters(cls, total: int, lengths=DEFAULT_LENGTHS, **kw) -> "ArchConfig":
        if total % len(lengths):
            raise ConfigError(f"{total} filters cannot be split evenly over {len(lengths)} lengths")
        return cls(lengths=tuple(lengths), filters_per_length=total // len(lengths), **kw)

    @property
    def num_blocks(self) -> int:
        return len(self.block_types)

    @property
    def channels(self) -> int:
        return self.filters_per_length * len(self.lengths)

    def num_parameters(self) -> int:
        """Trainable network parameters (heads excluded), without building the network."""
        m, width_prev, width = self.channels, 1, 1
        total = 0
        for kind in self.block_types:
            # bank weights and biases, BN scale and shift
            total += self.filters_per_length * sum(self.lengths) * width + 3 * m
            if kind == TYPE2 and width_prev != m:
                total += m * width_prev + 3 * m
            width_prev, width = width, m
        return total

    def fixed_length_variant(self, length: int = 16) -> "ArchConfig":
        """Single-length architecture whose parameter count is closest to this one's."""
        target = self.num_parameters()
        best, best_gap, m = None, None, 1
        while True:
            cand = replace(self, lengths=(length,), filters_per_length=m)
            gap = cand.num_parameters() - target
            if best_gap is None or abs(gap) < abs(best_gap):
                best, best_gap = cand, gap
            if gap > 0:
                return best
            m += 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lengths"] = list(self.lengths)
        d["block_types"] = list(self.block_types)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Head:
    task_name: str
    weight: np.ndarray  # [K, m_L]
    bias: np.ndarray  # [K]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"head weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.weight.shape[0] < 2:
            raise DimensionError("a head needs at least two classes")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def copy(self) -> "Head":
        return Head(self.task_name, self.weight.copy(), self.bias.copy())


@dataclass
class ParamGrads:
    core: dict[str, np.ndarray]
    head: dict[str, np.ndarray]


@dataclass
class CtnModel:
    arch: ArchConfig
    blocks: list[ConvBlock]
    freeze_mask: list[bool]
    metadata: dict = field(default_factory=dict)

    @property
    def embedding_dim(self) -> int:
        return self.blocks[-1].out_channels

    @property
    def dtype(self):
        return self.blocks[0].bank.weights[0].dtype

    def params(self) -> dict[str, np.ndarray]:
        """All trainable arrays by name (live references, not copies)."""
        out = {}
        for l, block in enumerate(self.blocks):
            out.update({f"blocks.{l}.{k}": v for k, v in block.params().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for l, block in enumerate(self.blocks):
            out.update({f"blocks.{l}.{k}": v for k, v in block.buffers().items()})
        return out

    def frozen_names(self) -> set[str]:
        names = set()
        for l, (block, frozen) in enumerate(zip(self.blocks, self.freeze_mask)):
            if frozen:
                names.update(f"blocks.{l}.{k}" for k in block.conv_param_names())
        return names

    def freeze(self, depth: int) -> None:
        """Freeze conv arrays of the first ``depth`` blocks; BN stays trainable."""
        if not 0 <= depth <= len(self.blocks):
            raise ConfigError(f"freeze depth {depth} outside [0, {len(self.blocks)}]")
        self.freeze_mask = [l < depth for l in range(len(self.blocks))]

    def copy(self) -> "CtnModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "CtnModel":
        m = self.copy()
        for arrays in (m.params(), m.buffers()):
            for name, a in arrays.items():
                _replace_array(m, name, a.astype(dtype))
        return m

    def quantize_(self) -> "CtnModel":
        """Round parameters and BN statistics to float32-representable values."""
        for arrays in (self.params(), self.buffers()):
            for a in arrays.values():
                a[...] = a.astype(np.float32)
        return self

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for arrays in (self.params(), self.buffers()):
            for name in sorted(arrays):
                h.update(name.encode())
                h.update(np.ascontiguousarray(arrays[name]).tobytes())
        return h.hexdigest()


def _replace_array(model: CtnModel, name: str, new: np.ndarray) -> None:
    # "blocks.<l>.<path>" where path addresses a bank or BN field
    _, l, rest = name.split(".", 2)
    block = model.blocks[int(l)]
    parts = rest.split(".")
    if parts[0] == "proj":
        owner_bank, owner_bn, parts = block.proj, block.proj_bn, parts[1:]
    else:
        owner_bank, owner_bn = block.bank, block.bn
    kind, key = parts
    if kind == "conv":
        idx = owner_bank.lengths.index(int(key[1:]))
        target = owner_bank.weights if key[0] == "w" else owner_bank.biases
        target[idx] = new
    else:
        setattr(owner_bn, key, new)


def head_hash(head: Head) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(head.weight).tobytes())
    h.update(np.ascontiguousarray(head.bias).tobytes())
    return h.hexdigest()


# -- initialization ------------------------------------------------------------


def orthogonal_init(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Orthonormal rows (rows <= cols) or columns (rows > cols).

    QR of a standard-normal matrix, with columns of Q sign-flipped so that R
    has a non-negative diagonal, which makes the factorization unique.
    """
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q.T if rows <= cols else q


def _init_bank(lengths, fpl, in_channels, rng, dtype) -> FilterBank:
    weights = []
    for f in lengths:
        # one row per filter, flattened [f, in_channels]
        w = orthogonal_init((fpl, f * in_channels), rng).reshape(fpl, f, in_channels)
        weights.append(np.ascontiguousarray(w, dtype=dtype))
    return FilterBank(list(lengths), weights, [np.zeros(fpl, dtype) for _ in lengths])


def build_ctn(arch: ArchConfig | None = None, rng=0, dtype=np.float64, name: str = "ctn") -> CtnModel:
    """Build an orthogonally initialized network.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    arch = arch or ArchConfig()
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    widths = [1]
    blocks = []
    for l, kind in enumerate(arch.block_types):
        m = arch.channels
        bank = _init_bank(arch.lengths, arch.filters_per_length, widths[-1], rng, dtype)
        bn = BatchNorm.fresh(m, arch.bn_eps, arch.bn_momentum, dtype)
        proj = proj_bn = None
        if kind == TYPE2 and widths[l - 1] != m:
            proj = _init_bank([1], m, widths[l - 1], rng, dtype)
            proj_bn = BatchNorm.fresh(m, arch.bn_eps, arch.bn_momentum, dtype)
        blocks.append(ConvBlock(kind, bank, bn, proj, proj_bn))
        widths.append(m)
    meta = {"name": name, "version": 1, "seed": seed}
    return CtnModel(arch, blocks, [False] * len(blocks), meta)


def new_head(task_name: str, num_classes: int, embedding_dim: int, rng, dtype=np.float64) -> Head:
    """Uniform(-a, a) weights with a = sqrt(6 / (m + K)); zero bias."""
    rng = np.random.default_rng(rng)
    a = np.sqrt(6.0 / (embedding_dim + num_classes))
    w = rng.uniform(-a, a, size=(num_classes, embedding_dim)).astype(dtype)
    return Head(task_name, w, np.zeros(num_classes, dtype))


def parameter_count(model: CtnModel) -> int:
    return int(sum(a.size for a in model.params().values()))


# -- forward / backward --------------------------------------------------------


def _as_batch(x, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"expected a series [T] or batch [B, T], got shape {x.shape}")
    return x, single


def embed_forward(model: CtnModel, x: np.ndarray, mode: str, update_stats: bool = True):
    """Batched forward to the pooled embedding; returns ``(z [B, m_L], cache)``."""
    outs = [x[:, :, None]]
    caches = []
    for l, block in enumerate(model.blocks):
        skip = outs[l - 1] if block.kind == TYPE2 else None
        y, c = block_forward(outs[l], skip, block, mode, update_stats)
        outs.append(y)
        caches.append(c)
    z = mean_over_time(outs[-1])
    return z, (caches, outs[-1].shape)


def embed_backward(model: CtnModel, cache, grad_z: np.ndarray) -> dict[str, np.ndarray]:
    caches, last_shape = cache
    L = len(model.blocks)
    T = last_shape[1]
    gouts: list[np.ndarray | None] = [None] * (L + 1)
    gouts[L] = np.broadcast_to(grad_z[:, None, :] / T, last_shape)
    grads = {}
    for l in range(L - 1, -1, -1):
        block = model.blocks[l]
        # gradients w.r.t. the raw input series are never needed
        gx, gskip, g = block_backward(caches[l], gouts[l + 1], block, need_grad_x=l > 0)
        grads.update({f"blocks.{l}.{k}": v for k, v in g.items()})
        if l > 0:
            gouts[l] = gx if gouts[l] is None else gouts[l] + gx
        if gskip is not None and l - 1 > 0:
            gouts[l - 1] = gskip if gouts[l - 1] is None else gouts[l - 1] + gskip
    for name in model.frozen_names():
        grads[name] = np.zeros_like(grads[name])
    return grads


def forward_embed(model: CtnModel, x, mode: str = INFER) -> np.ndarray:
    """Pooled embedding of one series ``[T]`` or a batch ``[B, T]``."""
    xb, single = _as_batch(x, model.dtype)
    z, _ = embed_forward(model, xb, mode)
    return z[0] if single else z


def forward_classify(model: CtnModel, head: Head, x, mode: str = INFER) -> np.ndarray:
    """Class probabilities for one series or a batch."""
    xb, single = _as_batch(x, model.dtype)
    z, _ = embed_forward(model, xb, mode)
    p = softmax(affine(z, head.weight, head.bias))
    return p[0] if single else p


def loss_and_grads(
    model: CtnModel,
    head: Head,
    batch,
    targets,
    reduction: str = "mean",
    update_stats: bool = True,
) -> tuple[ParamGrads, float, np.ndarray]:
    """Train-mode forward plus exact gradients; also returns the probabilities."""
    xb, _ = _as_batch(batch, model.dtype)
    if xb.shape[0] == 0:
        raise DimensionError("empty batch")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (xb.shape[0],):
        raise DimensionError("one target per series is required")
    z, cache = embed_forward(model, xb, TRAIN, update_stats)
    probs = softmax(affine(z, head.weight, head.bias))
    loss = cross_entropy_batch(probs, targets, reduction)
    glogits = softmax_xent_backward(probs, targets, reduction)
    head_grads = {"weight": glogits.T @ z, "bias": glogits.sum(axis=0)}
    grad_z = glogits @ head.weight
    core = embed_backward(model, cache, grad_z)
    return ParamGrads(core, head_grads), loss, probs


def backward(model: CtnModel, head: Head, batch, targets, reduction: str = "mean", update_stats: bool = True):
    """Exact gradients of the batch cross-entropy: ``(ParamGrads, loss)``."""
    grads, loss, _ = loss_and_grads(model, head, batch, targets, reduction, update_stats)
    return grads, loss


def batch_loss(model: CtnModel, head: Head, batch, targets, mode: str = TRAIN, reduction: str = "mean") -> float:
    """Loss without gradients or running-statistic updates."""
    xb, _ = _as_batch(batch, model.dtype)
    z, _ = embed_forward(model, xb, mode, update_stats=False)
    probs = softmax(affine(z, head.weight, head.bias))
    return cross_entropy_batch(probs, targets, reduction)
