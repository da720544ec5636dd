"""Named parameter storage, the Adam optimizer, and the checkpoint archive.

Checkpoint archive layout (all integers little-endian)::

    magic      8 bytes   b"LMDETRCK"
    version    u32       currently 1
    meta_len   u32       length of the UTF-8 JSON metadata blob
    meta       bytes     JSON object (config, step counter, ...)
    count      u32       number of tensor entries
    entry*     u16 name_len, name (UTF-8), u8 trainable, u8 ndim,
               u32 * ndim shape, float64 * prod(shape) values

Values are written with ``<f8`` so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor

MAGIC = b"LMDETRCK"
FORMAT_VERSION = 1
OPTIM_PREFIX = "optim/"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Entry:
    tensor: Tensor
    trainable: bool

    @property
    def count(self) -> int:
        return int(self.tensor.data.size)


class ParamRegistry:
    """Ordered name -> (tensor, trainable) map; the freezing contract lives here."""

    def __init__(self, shapes_only: bool = False):
        self._entries: dict[str, Entry] = {}
        # shape-only registries hold read-only zero-stride views: no memory, no values
        self.shapes_only = shapes_only

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already registered")
        if self.shapes_only:
            data = np.broadcast_to(np.float64(0.0), np.shape(data))
        else:
            data = np.array(data, dtype=np.float64)
        t = Tensor(data, requires_grad=trainable, name=name)
        self._entries[name] = Entry(t, trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def items(self) -> Iterator[tuple[str, Entry]]:
        return iter(self._entries.items())

    def entry(self, name: str) -> Entry:
        return self._entries[name]

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def set_trainable(self, name: str, trainable: bool) -> None:
        e = self._entries[name]
        e.trainable = trainable
        e.tensor.requires_grad = trainable
        if not trainable:
            e.tensor.grad = None

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, e.tensor) for n, e in self._entries.items() if e.trainable]

    def frozen(self) -> list[tuple[str, Tensor]]:
        return [(n, e.tensor) for n, e in self._entries.items() if not e.trainable]

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.tensor.grad = None

    def count(self, trainable: bool | None = None, prefix: str = "") -> int:
        return sum(
            e.count
            for n, e in self._entries.items()
            if n.startswith(prefix) and (trainable is None or e.trainable == trainable)
        )

    def fingerprint(self, names=None) -> dict[str, str]:
        """sha256 of the raw bytes of each named tensor (default: frozen ones)."""
        names = [n for n, _ in self.frozen()] if names is None else names
        return {n: hashlib.sha256(self[n].data.tobytes()).hexdigest() for n in names}

    def state(self) -> dict[str, np.ndarray]:
        return {n: e.tensor.data.copy() for n, e in self._entries.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self._entries[n].tensor.data = np.array(arr, dtype=np.float64)


@dataclass
class Adam:
    """Adam with bias correction; touches trainable registry entries only."""

    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_index: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, registry: ParamRegistry) -> None:
        self.step_index += 1
        adam_step(registry, self.lr, self.betas, self.eps, self.step_index, self.m, self.v)


def adam_step(registry: ParamRegistry, lr: float, betas, eps: float, step_index: int,
              m: dict, v: dict) -> None:
    b1, b2 = betas
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for name, entry in registry.items():
        if not entry.trainable:
            continue
        g = entry.tensor.grad
        if g is None:
            continue
        mt = m.get(name)
        if mt is None:
            mt = m[name] = np.zeros_like(g)
            v[name] = np.zeros_like(g)
        vt = v[name]
        mt *= b1
        mt += (1.0 - b1) * g
        vt *= b2
        vt += (1.0 - b2) * g * g
        update = lr * (mt / c1) / (np.sqrt(vt / c2) + eps)
        entry.tensor.data = entry.tensor.data - update


# -- archive ---------------------------------------------------------------
def save_archive(path, entries: list[tuple[str, np.ndarray, bool]], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(entries))]
    for name, arr, trainable in entries:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", int(trainable), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_archive(path) -> tuple[list[tuple[str, np.ndarray, bool]], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported archive version {version}")
    pos = 16
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        trainable, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        entries.append((name, arr, bool(trainable)))
    return entries, meta


def save_registry(path, registry: ParamRegistry, meta: dict | None = None,
                  extra: list[tuple[str, np.ndarray, bool]] = ()) -> None:
    entries = [(n, e.tensor.data, e.trainable) for n, e in registry.items()]
    save_archive(path, entries + list(extra), meta)


def load_into_registry(path, registry: ParamRegistry) -> tuple[dict, dict[str, np.ndarray]]:
    """Load tensors into an already-built registry.

    Returns the metadata and any archive entries that are not registry
    parameters (optimizer state).  Raises on the first mismatch.
    """
    entries, meta = load_archive(path)
    by_name = {}
    extra = {}
    for name, arr, trainable in entries:
        if name in registry:
            by_name[name] = (arr, trainable)
        elif name.startswith(OPTIM_PREFIX):
            extra[name] = arr
        else:
            raise CheckpointError(f"checkpoint tensor {name!r} has no counterpart in the model")
    for name, entry in registry.items():
        if name not in by_name:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr, trainable = by_name[name]
        if arr.shape != entry.tensor.shape:
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {entry.tensor.shape}")
        if trainable != entry.trainable:
            raise CheckpointError(f"tensor {name!r}: trainable flag differs from model")
    for name, (arr, _) in by_name.items():
        registry[name].data = arr
    return meta, extra
