"""Self-describing binary container used for operator caches and checkpoints.

Layout::

    TETCNN <kind> v<version>
    key=value                      (header fields, values are JSON)
    ...
    array <name> <dtype> <shape> <offset> <nbytes>
    ...
    end
    <little-endian payload>
    <32-byte sha256 of everything above>

The trailing digest makes any single-byte corruption detectable.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = "TETCNN"
_DTYPES = {"f8": "<f8", "i8": "<i8", "f4": "<f4"}


class ContainerError(ValueError):
    """Raised when a container file is malformed or fails its checksum."""

    def __init__(self, path: str | os.PathLike, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f4" if arr.dtype.itemsize == 4 else "f8"
    if arr.dtype.kind in "iub":
        return "i8"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode(kind: str, header: dict[str, Any], arrays: dict[str, np.ndarray], version: int = 1) -> bytes:
    lines = [f"{MAGIC} {kind} v{version}"]
    for key, value in header.items():
        if "=" in key or "\n" in key:
            raise ValueError(f"bad header key {key!r}")
        lines.append(f"{key}={json.dumps(value, sort_keys=True)}")
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"array {name} {tag} {shape} {offset} {len(data)}")
        chunks.append(data)
        offset += len(data)
    lines.append("end")
    body = ("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes, path: str | os.PathLike = "<memory>", kind: str | None = None):
    """Return ``(kind, version, header, arrays)``; raises ContainerError."""
    if len(blob) < 32:
        raise ContainerError(path, "truncated file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(path, "checksum mismatch (file corrupted)")
    end = body.find(b"\nend\n")
    if end < 0:
        raise ContainerError(path, "missing header terminator")
    text = body[: end + 1].decode("utf-8")
    payload = body[end + 5 :]
    lines = text.splitlines()
    first = lines[0].split()
    if len(first) != 3 or first[0] != MAGIC or not first[2].startswith("v"):
        raise ContainerError(path, "bad magic line")
    file_kind, version = first[1], int(first[2][1:])
    if kind is not None and file_kind != kind:
        raise ContainerError(path, f"expected a {kind} container, found {file_kind}")
    header: dict[str, Any] = {}
    arrays: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if line.startswith("array "):
            _, name, tag, shape, off, nbytes = line.split(" ")
            off, nbytes = int(off), int(nbytes)
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            raw = payload[off : off + nbytes]
            if len(raw) != nbytes:
                raise ContainerError(path, f"array {name} runs past payload")
            arrays[name] = np.frombuffer(raw, dtype=_DTYPES[tag]).reshape(dims).copy()
        else:
            key, _, value = line.partition("=")
            header[key] = json.loads(value)
    return file_kind, version, header, arrays


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, kind, header, arrays, version: int = 1) -> None:
    write_atomic(path, encode(kind, header, arrays, version))


def load(path, kind: str | None = None):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(path, f"cannot read ({exc.strerror})") from exc
    return decode(blob, path, kind)
