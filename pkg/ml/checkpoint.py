"""
Binary checkpoint format.

    CVRLAB-CKPT 1\\n
    <uint32 little-endian header length>
    <JSON header: caller fields + "tensors": [{"name", "shape"}, ...]>
    <float32 little-endian tensors in header order>

A sidecar `<checkpoint>.sums.txt` lists `name shape sha256` per tensor.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from errors import CheckpointError

logger = logging.getLogger("[LAB]")

MAGIC = b"CVRLAB-CKPT 1\n"
TENSOR_DTYPE = np.dtype("<f4")


def sums_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".sums.txt")


def _digest(array: np.ndarray) -> str:
    return hashlib.sha256(array.tobytes()).hexdigest()


def _shape_text(shape) -> str:
    return "x".join(str(d) for d in shape) or "scalar"


def save_tensors(path: Path, header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> Dict[str, str]:
    """Write the checkpoint and its sidecar; returns name -> sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    encoded = {name: np.ascontiguousarray(value, dtype=TENSOR_DTYPE) for name, value in tensors.items()}
    full_header = dict(header)
    full_header["tensors"] = [{"name": name, "shape": list(arr.shape)} for name, arr in encoded.items()]
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for arr in encoded.values():
            f.write(arr.tobytes())

    sums = {name: _digest(arr) for name, arr in encoded.items()}
    with open(sums_path(path), "w", encoding="utf-8") as f:
        for name, arr in encoded.items():
            f.write(f"{name} {_shape_text(arr.shape)} {sums[name]}\n")
    logger.info(f"checkpoint_saved path={path} tensors={len(encoded)}")
    return sums


def read_sums(path: Path) -> Dict[str, str]:
    sidecar = sums_path(path)
    try:
        lines = sidecar.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as e:
        raise CheckpointError(f"checksum sidecar missing: {sidecar}") from e
    sums: Dict[str, str] = {}
    for line in lines:
        parts = line.split()
        if len(parts) != 3:
            raise CheckpointError(f"malformed sidecar line: {line!r}")
        sums[parts[0]] = parts[2]
    return sums


def load_tensors(path: Path, verify: bool = True) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Return (header, tensors); tensors come back as float32 arrays."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    offset = len(MAGIC)
    if len(data) < offset + 4:
        raise CheckpointError(f"{path} is truncated")
    (header_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    try:
        header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has an unreadable header") from e
    offset += header_len

    tensors: Dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * TENSOR_DTYPE.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path} is truncated at tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data, dtype=TENSOR_DTYPE, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path} has {len(data) - offset} trailing bytes")

    if verify:
        sums = read_sums(path)
        for name, arr in tensors.items():
            if sums.get(name) != _digest(arr):
                raise CheckpointError(f"checksum mismatch for tensor {name}")
    return header, tensors


def checkpoint_digest(path: Path) -> str:
    """sha256 over the whole checkpoint file; equal digests mean identical weights and header."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
