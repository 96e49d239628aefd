"""Flat binary parameter checkpoints with a plain-text index sidecar.

Layout of ``<name>.ckpt``: for each tensor, a little-endian uint64 value
count followed by that many little-endian float64 values. The sidecar
``<name>.ckpt.idx`` holds one line per tensor::

    name<TAB>shape_csv<TAB>byte_offset<TAB>frozen_flag

where the offset points at the count field and frozen is 0/1.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


def save_checkpoint(path, named: list[tuple[str, np.ndarray, bool]]):
    """Write tensors as (name, array, frozen) triples."""
    path = Path(path)
    index_lines = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr, frozen in named:
            values = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<Q", values.size))
            fh.write(values.tobytes())
            shape_csv = ",".join(str(d) for d in arr.shape)
            index_lines.append(f"{name}\t{shape_csv}\t{offset}\t{int(frozen)}")
            offset += 8 + 8 * values.size
    Path(str(path) + ".idx").write_text("\n".join(index_lines) + "\n")


def load_checkpoint(path) -> dict[str, tuple[np.ndarray, bool]]:
    """Read a checkpoint; returns name -> (float64 array, frozen flag)."""
    path = Path(path)
    blob = path.read_bytes()
    out: dict[str, tuple[np.ndarray, bool]] = {}
    for line in Path(str(path) + ".idx").read_text().splitlines():
        if not line.strip():
            continue
        name, shape_csv, offset_s, frozen_s = line.split("\t")
        offset = int(offset_s)
        (count,) = struct.unpack_from("<Q", blob, offset)
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset + 8)
        shape = tuple(int(d) for d in shape_csv.split(",")) if shape_csv else ()
        out[name] = (values.reshape(shape).copy(), bool(int(frozen_s)))
    return out
