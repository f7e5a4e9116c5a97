"""Checkpoint I/O.

Layout: 8-byte magic ``SPKTCKP1``, a uint32 little-endian header length, the
UTF-8 JSON header (list of ``{"name", "shape", "offset"}`` entries, offsets
relative to the start of the data section), then the little-endian float32
arrays back to back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from segprompt.errors import ContractError
from segprompt.nn.tensor import Tensor, default_dtype

MAGIC = b"SPKTCKP1"


def save_checkpoint(path: str | Path, params: dict[str, Tensor | np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = params[name]
        data = (arr.data if isinstance(arr, Tensor) else np.asarray(arr))
        blob = np.ascontiguousarray(data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(entries).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Load arrays in the current default dtype, keyed by name."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContractError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    (header_len,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    data_start = 12 + header_len
    out: dict[str, np.ndarray] = {}
    for entry in header:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = data_start + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(default_dtype())
    return out


def load_into(path: str | Path, params: dict[str, Tensor]) -> None:
    """Load a checkpoint into existing parameter tensors, checking shapes."""
    loaded = load_checkpoint(path)
    missing = set(params) - set(loaded)
    if missing:
        raise ContractError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise ContractError(
                f"checkpoint shape {arr.shape} != expected {p.data.shape} for {name}")
        p.data = arr.astype(p.data.dtype)
