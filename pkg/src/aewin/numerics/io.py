"""Tensor container files.

Layout: a UTF-8 text manifest, then the raw payload.

    AEWIN-TENSORS 1
    meta <key> <value>
    tensor <name> <d0,d1,...> <offset> <nbytes>
    ...
    end
    <little-endian float64 payloads, row-major, offsets relative to payload start>
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = "AEWIN-TENSORS 1"
_DTYPE = np.dtype("<f8")


class ContainerError(ValueError):
    """Malformed or mismatched tensor container."""


def save_tensors(
    path: str | os.PathLike,
    tensors: Mapping[str, Tensor],
    meta: Mapping[str, str] | None = None,
) -> None:
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if not key or any(ch.isspace() for ch in key) or "\n" in str(value):
            raise ContainerError(f"bad meta entry {key!r}")
        lines.append(f"meta {key} {value}")
    offset = 0
    payload = []
    for name, t in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ContainerError(f"tensor name {name!r} must be non-empty without whitespace")
        data = np.ascontiguousarray(t.data, dtype=_DTYPE)
        shape = ",".join(str(d) for d in data.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset} {data.nbytes}")
        payload.append(data.tobytes())
        offset += data.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            fh.write(chunk)


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, Tensor], dict[str, str]]:
    """Return ``(tensors, meta)`` in file order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    entries = []
    meta: dict[str, str] = {}
    pos = 0
    first = True
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ContainerError(f"{path}: manifest is not terminated by 'end'")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise ContainerError(f"{path}: not a tensor container (header {line!r})")
            first = False
            continue
        if line == "end":
            break
        parts = line.split(" ")
        if parts[0] == "meta" and len(parts) >= 3:
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "tensor" and len(parts) == 5:
            shape = () if parts[2] == "-" else tuple(int(d) for d in parts[2].split(","))
            entries.append((parts[1], shape, int(parts[3]), int(parts[4])))
        else:
            raise ContainerError(f"{path}: bad manifest line {line!r}")
    body = raw[pos:]
    tensors = {}
    for name, shape, offset, nbytes in entries:
        count = int(np.prod(shape, dtype=np.int64))
        if nbytes != count * _DTYPE.itemsize or offset + nbytes > len(body):
            raise ContainerError(f"{path}: tensor {name!r} payload out of range")
        arr = np.frombuffer(body, dtype=_DTYPE, count=count, offset=offset)
        tensors[name] = Tensor(arr.reshape(shape))
    return tensors, meta
