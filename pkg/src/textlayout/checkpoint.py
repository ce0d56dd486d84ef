"""Checkpoint container: a versioned text manifest followed by raw float64 payloads.

Layout::

    TLCKPT 1
    <name>\t<dim0,dim1,...>\t<offset>\t<count>
    ...
    END
    <little-endian float64 payload>

Offsets and counts are in elements, relative to the start of the payload.
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

MAGIC = "TLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    offset = 0
    for name, arr in arrays.items():
        if any(c in name for c in "\t\n"):
            raise CheckpointError(f"invalid parameter name {name!r}")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{shape}\t{offset}\t{arr.size}")
        offset += arr.size
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"\nEND\n")
    if end < 0:
        raise CheckpointError("missing manifest terminator")
    header = blob[:end].decode("ascii").split("\n")
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(magic[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {magic[1]}")
    payload = np.frombuffer(blob[end + 5:], dtype="<f8")
    out = {}
    for line in header[1:]:
        name, shape_s, off_s, cnt_s = line.split("\t")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        off, cnt = int(off_s), int(cnt_s)
        if off + cnt > payload.size or int(np.prod(shape)) != cnt:
            raise CheckpointError(f"corrupt entry for {name}")
        out[name] = payload[off:off + cnt].reshape(shape).astype(np.float64)
    return out
