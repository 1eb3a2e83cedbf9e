"""Parameter checkpoint file.

Layout::

    8 bytes   magic b"SPSGCKPT"
    uint32    format version (little-endian)
    uint32    manifest length in bytes
    manifest  UTF-8 JSON: {"version", "config", "tensors": [{"name", "shape", "offset", "nbytes"}]}
    data      little-endian float32 buffers; offsets are relative to the start of this section
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SPSGCKPT"
VERSION = 1


def save_checkpoint(path, state, config=None):
    entries, buffers, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        buffers.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"version": VERSION, "config": config, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, len(manifest)))
            fh.write(manifest)
            for buf in buffers:
                fh.write(buf)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    """Return ``(state, config)``; ``state`` maps names to float32 arrays."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a sparseseg checkpoint")
    version, mlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[16:16 + mlen].decode())
    data = memoryview(raw)[16 + mlen:]
    state = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated buffer for {entry['name']}")
        arr = np.frombuffer(data[start:start + nbytes], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = arr.astype(np.float32)
    return state, manifest.get("config")
