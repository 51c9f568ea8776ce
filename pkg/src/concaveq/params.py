"""Named parameter collections and the binary checkpoint container.

Checkpoint layout (documented contract, version 1):

    bytes 0..3    magic b"CQPK"
    bytes 4..7    format version, uint32 little-endian (currently 1)
    bytes 8..15   header length H, uint64 little-endian
    bytes 16..16+H  UTF-8 JSON header:
                    {"tensors": [{"name": str, "shape": [int, ...]}, ...],
                     "meta": {...}}   # meta is free-form JSON
    remainder     tensor payloads, float64 little-endian, row-major,
                  concatenated in header order

Tensor names are "<set>/<tensor>" when written through save_checkpoint.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Node, parameter

MAGIC = b"CQPK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or version-incompatible checkpoint file."""


class ParameterSet:
    """Ordered name -> leaf-Node mapping for one network."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, Node] = {}

    def add(self, key: str, value: np.ndarray) -> Node:
        if key in self._params:
            raise KeyError(f"duplicate parameter {self.name}/{key}")
        node = parameter(np.asarray(value, dtype=np.float64))
        self._params[key] = node
        return node

    def __getitem__(self, key: str) -> Node:
        return self._params[key]

    def __contains__(self, key: str) -> bool:
        return key in self._params

    def items(self):
        return self._params.items()

    def nodes(self) -> list[Node]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self._params.items():
            src = state[k]
            if src.shape != p.value.shape:
                raise CheckpointError(
                    f"shape mismatch for {self.name}/{k}: "
                    f"{src.shape} vs {p.value.shape}")
            p.value[...] = src

    def copy_from(self, other: "ParameterSet") -> None:
        for k, p in self._params.items():
            p.value[...] = other[k].value

    def checksum(self) -> float:
        return float(sum(np.abs(v.value).sum() for v in self._params.values()))


def save_checkpoint(path, sets: dict[str, ParameterSet], meta: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write parameter sets (plus optional named arrays) to one file."""
    tensors: list[tuple[str, np.ndarray]] = []
    for set_name, ps in sets.items():
        for key, node in ps.items():
            tensors.append((f"{set_name}/{key}", node.value))
    for name, arr in (extra_arrays or {}).items():
        tensors.append((name, np.asarray(arr, dtype=np.float64)))

    header = {
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (name -> array, meta)."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} != supported {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    off = 16 + hlen
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off)
        arrays[t["name"]] = arr.reshape(shape).astype(np.float64)
        off += 8 * n
    return arrays, header["meta"]


def load_into(sets: dict[str, ParameterSet], arrays: dict[str, np.ndarray]) -> None:
    for set_name, ps in sets.items():
        ps.load_state({
            name.split("/", 1)[1]: arr
            for name, arr in arrays.items()
            if name.startswith(set_name + "/")
        })
