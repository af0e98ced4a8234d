"""Binary checkpoint format.

Layout::

    b"CTN1" | uint32 version | uint32 header length | JSON header | array data

All integers are little-endian.  The header is compact, key-sorted JSON and
lists every array (name, shape, dtype, byte offset) before any data, so a
file can be inspected without the library.  Network parameters, BN
statistics and head parameters are stored as ``<f4``; optimizer moments keep
their own dtype so a resumed run takes bitwise the same next step.  Loading
and re-saving a checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ArchConfig, CtnModel, Head, _replace_array, build_ctn
from .optim import AdamState

MAGIC = b"CTN1"
VERSION = 1
_STORED = "<f4"


@dataclass
class Checkpoint:
    model: CtnModel
    heads: dict[str, Head] = field(default_factory=dict)
    optimizers: dict[str, AdamState] = field(default_factory=dict)
    seed: int | None = None
    provenance: dict = field(default_factory=dict)


def _dtype_name(dt) -> str:
    return np.dtype(dt).newbyteorder("<").str


def _arrays(ck: Checkpoint):
    # (name, array, stored dtype) in file order
    out = []
    for group in (ck.model.params(), ck.model.buffers()):
        out += [(f"model.{k}", v, _STORED) for k, v in group.items()]
    for name in sorted(ck.heads):
        h = ck.heads[name]
        out += [(f"heads.{name}.weight", h.weight, _STORED), (f"heads.{name}.bias", h.bias, _STORED)]
    for oname in sorted(ck.optimizers):
        st = ck.optimizers[oname]
        for k in sorted(st.m):
            out.append((f"optim.{oname}.m.{k}", st.m[k], _dtype_name(st.m[k].dtype)))
            out.append((f"optim.{oname}.v.{k}", st.v[k], _dtype_name(st.v[k].dtype)))
    return out


def encode(ck: Checkpoint) -> bytes:
    chunks, table, offset = [], [], 0
    for name, arr, dt in _arrays(ck):
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    model = ck.model
    header = {
        "arch": model.arch.to_dict(),
        "freeze_mask": list(model.freeze_mask),
        "compute_dtype": np.dtype(model.dtype).name,
        "metadata": model.metadata,
        "heads": {n: {"num_classes": h.num_classes} for n, h in sorted(ck.heads.items())},
        "optimizers": {n: s.hyperparams() for n, s in sorted(ck.optimizers.items())},
        "seed": ck.seed,
        "provenance": ck.provenance,
        "arrays": table,
        "data_bytes": len(data),
        "data_sha256": hashlib.sha256(data).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + data


def save_checkpoint(path, model: CtnModel, heads=None, optimizers=None, seed=None, provenance=None) -> bytes:
    """Write a checkpoint file and return its bytes.

    Parameters are rounded to float32 on disk; ``model`` itself is untouched.
    """
    blob = encode(Checkpoint(model, dict(heads or {}), dict(optimizers or {}), seed, dict(provenance or {})))
    Path(path).write_bytes(blob)
    return blob


def read_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    if len(blob) < 12 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[12 : 12 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    return header, 12 + hlen


def decode(blob: bytes, dtype=None, arch: ArchConfig | None = None) -> Checkpoint:
    """Rebuild a checkpoint from bytes.

    ``dtype`` overrides the recorded compute dtype.  ``arch``, if given, must
    match the stored architecture.
    """
    header, start = read_header(blob)
    data = blob[start:]
    if len(data) != header["data_bytes"] or hashlib.sha256(data).hexdigest() != header["data_sha256"]:
        raise CheckpointError("checkpoint data is truncated or corrupt")
    stored_arch = ArchConfig.from_dict(header["arch"])
    if arch is not None and arch != stored_arch:
        raise CheckpointError(f"checkpoint architecture {stored_arch.to_dict()} does not match requested {arch.to_dict()}")
    dtype = np.dtype(dtype or header["compute_dtype"])
    model = build_ctn(stored_arch, rng=0, dtype=dtype)
    model.freeze_mask = list(header["freeze_mask"])
    model.metadata = header["metadata"]
    expected = {**model.params(), **model.buffers()}

    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(data, dtype=dt, count=count, offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = a

    for name, ref in expected.items():
        a = arrays.get(f"model.{name}")
        if a is None:
            raise CheckpointError(f"checkpoint lacks array {name}")
        if a.shape != ref.shape:
            raise CheckpointError(f"array {name}: stored shape {a.shape}, architecture needs {ref.shape}")
        _replace_array(model, name, a.astype(dtype))

    heads = {}
    for name, info in header["heads"].items():
        w, b = arrays[f"heads.{name}.weight"], arrays[f"heads.{name}.bias"]
        if w.shape != (info["num_classes"], model.embedding_dim):
            raise CheckpointError(f"head {name}: weight shape {w.shape} incompatible with the network")
        heads[name] = Head(name, w.astype(dtype), b.astype(dtype))

    optimizers = {}
    for oname, hp in header["optimizers"].items():
        st = AdamState(hp["learning_rate"], hp["beta1"], hp["beta2"], hp["eps"], hp["t"])
        prefix = f"optim.{oname}."
        for key, a in arrays.items():
            if key.startswith(prefix):
                which, pname = key[len(prefix) :].split(".", 1)
                getattr(st, which)[pname] = a.astype(a.dtype.newbyteorder("="))
        optimizers[oname] = st
    return Checkpoint(model, heads, optimizers, header["seed"], header["provenance"])


def load_checkpoint(path, dtype=None, arch: ArchConfig | None = None) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return decode(p.read_bytes(), dtype, arch)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
