"""Binary tensor archive used for checkpoints and lattice dumps.

Layout (all integers little-endian)::

    b"MSLT" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
    count x ( u32 name_len | name | u8 flags | u32 rank | rank x u64 dim | doubles )

``flags`` bit 0 marks a frozen parameter, bit 1 a decay-exempt one.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .params import ParamStore

MAGIC = b"MSLT"
VERSION = 1
FROZEN = 1
DECAY_EXEMPT = 2


class ArchiveError(ValueError):
    pass


def write_archive(path, tensors: dict[str, np.ndarray], meta: dict | None = None, flags: dict[str, int] | None = None) -> None:
    flags = flags or {}
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BI", flags.get(name, 0), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_archive(path) -> tuple[dict, dict[str, np.ndarray], dict[str, int]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive")
    pos = 4
    version, meta_len = struct.unpack_from("<II", buf, pos)
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    pos += 8
    meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    flags: dict[str, int] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        flag, rank = struct.unpack_from("<BI", buf, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
        tensors[name] = arr
        flags[name] = flag
    if pos != len(buf):
        raise ArchiveError(f"{path}: {len(buf) - pos} trailing bytes")
    return meta, tensors, flags


def save_store(path, store: ParamStore, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["stages"] = {p.name: p.stage for p in store}
    tensors = {p.name: p.value.data for p in store}
    flags = {p.name: (FROZEN if p.frozen else 0) | (DECAY_EXEMPT if p.decay_exempt else 0) for p in store}
    write_archive(path, tensors, meta, flags)


def load_store(path) -> tuple[ParamStore, dict]:
    meta, tensors, flags = read_archive(path)
    stages = meta.get("stages", {})
    store = ParamStore()
    for name, arr in tensors.items():
        f = flags[name]
        store.add(name, arr, decay_exempt=bool(f & DECAY_EXEMPT), frozen=bool(f & FROZEN), stage=stages.get(name, ""))
    return store, meta
