"""Versioned binary checkpoint container.

Layout: the 5-byte magic ``AVLT1``, then a sequence of records until end of file::

    uint32 name length | name (utf-8) | uint32 rank | rank x uint64 dims | float64 payload

All integers and floats are little-endian. A size-1 record ``meta.kind`` tells
which victim the arrays belong to.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from avlt.errors import InvalidArgumentError

MAGIC = b"AVLT1"
KINDS = ("monolithic", "attentive", "densecap")


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
    os.replace(tmp, path)


def read_arrays(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise InvalidArgumentError(f"{path}: not an AVLT1 checkpoint")
    pos = 5
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(data):
                raise InvalidArgumentError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            if name in out:
                raise InvalidArgumentError(f"{path}: duplicate array {name!r}")
            out[name] = arr.astype(np.float64)
    except struct.error as e:
        raise InvalidArgumentError(f"{path}: truncated checkpoint") from e
    return out


def save_model(path, model) -> None:
    from avlt.victims.densecap import DenseCapVictim

    kind = "densecap" if isinstance(model, DenseCapVictim) else model.variant
    arrays = {"meta.kind": np.array([float(KINDS.index(kind))])}
    arrays.update(model.params.items())
    write_arrays(path, arrays)


def load_model(path):
    from avlt.victims.densecap import DenseCapVictim
    from avlt.victims.vqa import VqaVictim

    arrays = read_arrays(path)
    if "meta.kind" not in arrays:
        raise InvalidArgumentError(f"{path}: missing meta.kind")
    kind = KINDS[int(arrays.pop("meta.kind")[0])]
    if kind == "densecap":
        template = DenseCapVictim.init(zero=True)
    else:
        template = VqaVictim.init(kind, zero=True)
    if set(arrays) != set(template.params.names()):
        raise InvalidArgumentError(f"{path}: parameter names do not match a {kind} victim")
    for name, value in arrays.items():
        template.params[name] = value
    return template
