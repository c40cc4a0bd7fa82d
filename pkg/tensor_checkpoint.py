#!/usr/bin/env python3
"""
Tensor checkpoint files.

A checkpoint is a short ASCII header followed by a raw little-endian float32
payload, so the same set of tensors always serializes to the same bytes:

    MODALBRIDGE-CHECKPOINT 1
    tag arch conv3d
    tag config {"feature_dim": 64, ...}
    tensor stem.weight 16x3x3x3x3 0 5184
    tensor stem.bias 16 5184 64
    end
    <payload>

Tag lines carry free text up to the newline. Tensor lines give the name,
the shape joined by "x", and the byte offset and length inside the payload.
Tensors are written in mapping order, back to back.
"""

import hashlib
import os
import re
import tempfile
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

# ─────────────────────────────────────────────────────────────────────────────
# CONSTANTS
# ─────────────────────────────────────────────────────────────────────────────

MAGIC = "MODALBRIDGE-CHECKPOINT 1"
PAYLOAD_DTYPE = np.dtype("<f4")

NAME_PATTERN = re.compile(r"^[A-Za-z0-9_.\-]+$")


class CheckpointError(ValueError):
    """A checkpoint could not be written or parsed."""


# ─────────────────────────────────────────────────────────────────────────────
# FUNCTIONS
# ─────────────────────────────────────────────────────────────────────────────

def _as_array(value) -> np.ndarray:
    # Accepts autograd Tensors as well as arrays
    array = getattr(value, "data", value)
    return np.ascontiguousarray(np.asarray(array), dtype=PAYLOAD_DTYPE)


def encode_checkpoint(tensors: Mapping[str, object], tags: Optional[Mapping[str, str]] = None) -> bytes:
    """Serialize named tensors (and string tags) to checkpoint bytes."""
    header = [MAGIC]
    for key, value in (tags or {}).items():
        value = str(value)
        if not NAME_PATTERN.match(key) or "\n" in value:
            raise CheckpointError(f"invalid tag {key!r}")
        header.append(f"tag {key} {value}")

    chunks = []
    offset = 0
    for name, value in tensors.items():
        if not NAME_PATTERN.match(name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        array = _as_array(value)
        if array.ndim == 0 or 0 in array.shape:
            raise CheckpointError(f"tensor {name} needs at least one positive dimension, got {array.shape}")
        raw = array.tobytes()
        dims = "x".join(str(d) for d in array.shape)
        header.append(f"tensor {name} {dims} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    header.append("end")
    return ("\n".join(header) + "\n").encode("ascii") + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """Parse checkpoint bytes back into (tensors, tags)."""
    marker = b"\nend\n"
    cut = blob.find(marker)
    if cut < 0:
        raise CheckpointError("missing 'end' line")
    try:
        lines = blob[:cut].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError("header is not ASCII") from None
    payload = blob[cut + len(marker):]
    if lines[0] != MAGIC:
        raise CheckpointError(f"bad magic line {lines[0]!r}")

    tensors: Dict[str, np.ndarray] = {}
    tags: Dict[str, str] = {}
    expected_offset = 0
    for number, line in enumerate(lines[1:], start=2):
        kind, _, rest = line.partition(" ")
        if kind == "tag":
            key, _, value = rest.partition(" ")
            tags[key] = value
        elif kind == "tensor":
            fields = rest.split(" ")
            if len(fields) != 4:
                raise CheckpointError(f"line {number}: malformed tensor entry")
            name, dims, offset, length = fields
            try:
                shape = tuple(int(d) for d in dims.split("x"))
                offset, length = int(offset), int(length)
            except ValueError:
                raise CheckpointError(f"line {number}: non-integer shape or range") from None
            if offset != expected_offset or length != int(np.prod(shape)) * PAYLOAD_DTYPE.itemsize:
                raise CheckpointError(f"line {number}: byte range of {name} is inconsistent")
            if offset + length > len(payload):
                raise CheckpointError(f"payload truncated inside {name}")
            tensors[name] = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=length // 4,
                                          offset=offset).reshape(shape).astype(np.float32)
            expected_offset = offset + length
        else:
            raise CheckpointError(f"line {number}: unknown entry {kind!r}")
    if expected_offset != len(payload):
        raise CheckpointError(f"{len(payload) - expected_offset} trailing payload bytes")
    return tensors, tags


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, object],
                    tags: Optional[Mapping[str, str]] = None) -> str:
    """
    Write a checkpoint atomically (temp file + rename).

    Returns:
        sha256 hex digest of the written bytes
    """
    blob = encode_checkpoint(tensors, tags)
    write_atomic(Path(path), blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    try:
        return decode_checkpoint(blob)
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from None


def write_atomic(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
