"""Binary checkpoint format (little-endian).

    "UADC" | version u32 | tensor count u32
    per canonical tensor (sorted by name):
        name length u32 | name utf-8 | rank u32 | extents u64[rank] | f32 data
    alias count u32 | per alias: name length u32 | name | canonical length u32 | canonical
    trainable count u32 | per name: length u32 | name
    config hash: length u32 | ascii
    metadata: length u32 | utf-8 JSON with sorted keys (task, kind, backbone hash)
"""
from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import json
import struct

import numpy as np

from .tensor import Tensor
from .adaptation import ParameterStore

MAGIC = b"UADC"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    aliases: dict = field(default_factory=dict)
    trainable: list = field(default_factory=list)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def to_store(self):
        store = ParameterStore()
        for n, arr in self.tensors.items():
            store.add(n, Tensor(arr.astype(np.float32)))
        for a, c in self.aliases.items():
            store.alias(a, c)
        store.set_trainable(self.trainable)
        return store


def _str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
        out.append(_str(name))
        out.append(struct.pack("<I", arr.ndim))
        out.append(np.asarray(arr.shape, dtype="<u8").tobytes())
        out.append(arr.tobytes())
    out.append(struct.pack("<I", len(ckpt.aliases)))
    for a in sorted(ckpt.aliases):
        out.append(_str(a) + _str(ckpt.aliases[a]))
    out.append(struct.pack("<I", len(ckpt.trainable)))
    for n in sorted(ckpt.trainable):
        out.append(_str(n))
    out.append(_str(ckpt.config_hash))
    out.append(_str(json.dumps(ckpt.meta, sort_keys=True)))
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.off = buf, 0

    def take(self, n):
        if self.off + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.off} (need {n} more)")
        b = self.buf[self.off: self.off + n]
        self.off += n
        return b

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def string(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"corrupt string in checkpoint: {e}") from e


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        shape = tuple(int(x) for x in np.frombuffer(r.take(8 * rank), "<u8"))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * count), "<f4").reshape(shape).astype(np.float32)
    aliases = {}
    for _ in range(r.u32()):
        a = r.string()
        aliases[a] = r.string()
    trainable = [r.string() for _ in range(r.u32())]
    config_hash = r.string()
    meta = json.loads(r.string())
    if r.off != len(buf):
        raise CheckpointError(f"{len(buf) - r.off} trailing bytes after checkpoint")
    for a, c in aliases.items():
        if c not in tensors:
            raise CheckpointError(f"dangling alias {a!r} -> {c!r}")
    for n in trainable:
        if n not in tensors:
            raise CheckpointError(f"trainable listing names unknown tensor {n!r}")
    return Checkpoint(tensors, aliases, trainable, config_hash, meta)


def from_store(store: ParameterStore, config_hash="", meta=None, names=None):
    """Snapshot ``store`` (optionally only canonical ``names`` and their aliases)."""
    keep = set(store.canonical_names()) if names is None else {store.canonical(n) for n in names}
    tensors = {n: np.array(store[n].data, dtype=np.float32) for n in store.canonical_names() if n in keep}
    aliases = {a: c for a, c in store.aliases().items() if c in keep}
    trainable = sorted(n for n in store.trainable if n in keep)
    return Checkpoint(tensors, aliases, trainable, config_hash, dict(meta or {}))


def save_checkpoint(path, store_or_ckpt, config_hash="", meta=None, names=None):
    ckpt = store_or_ckpt if isinstance(store_or_ckpt, Checkpoint) else \
        from_store(store_or_ckpt, config_hash, meta, names)
    data = encode(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode(buf)


def checksum(store, names):
    """SHA-256 over the float32 bytes of the named tensors (sorted by name)."""
    h = hashlib.sha256()
    for n in sorted(names):
        arr = np.asarray(store[n].data if hasattr(store[n], "data") else store[n], dtype="<f4", order="C")
        h.update(n.encode())
        h.update(arr.tobytes())
    return h.hexdigest()
