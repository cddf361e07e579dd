"""Checkpoint files: a plain-text manifest, an ``END`` line, then one float32 blob.

Manifest records are tab separated: name, shape (comma list, empty for
scalars), frozen flag (0/1) and the byte offset of the entry in the blob.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .params import ParamStore

MAGIC = "stprompt-checkpoint 1"
_END = b"\nEND\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(store: ParamStore, path: str | os.PathLike) -> Path:
    path = Path(path)
    lines = [MAGIC]
    chunks = []
    offset = 0
    for name, t in store.items():
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"parameter name {name!r} cannot be stored")
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        shape = ",".join(str(n) for n in t.shape)
        lines.append(f"{name}\t{shape}\t{int(store.is_frozen(name))}\t{offset}")
        chunks.append(blob)
        offset += len(blob)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write("\n".join(lines).encode())
        fh.write(_END)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, dtype=np.float32) -> ParamStore:
    raw = Path(path).read_bytes()
    cut = raw.find(_END)
    if cut < 0:
        raise CheckpointError(f"{path}: manifest terminator missing")
    header = raw[:cut].decode().split("\n")
    blob = raw[cut + len(_END):]
    if header[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (header {header[0]!r})")

    store = ParamStore(dtype=dtype)
    expected = 0
    for line in header[1:]:
        try:
            name, shape_s, frozen_s, offset_s = line.split("\t")
        except ValueError:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}") from None
        shape = tuple(int(n) for n in shape_s.split(",")) if shape_s else ()
        offset = int(offset_s)
        if offset != expected:
            raise CheckpointError(f"{path}: {name} at offset {offset}, expected {expected}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        expected += nbytes
        if expected > len(blob):
            raise CheckpointError(f"{path}: blob truncated at {name}")
        values = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        store.add(name, values, frozen=frozen_s == "1")
    if expected != len(blob):
        raise CheckpointError(f"{path}: blob holds {len(blob)} bytes, manifest declares {expected}")
    return store
