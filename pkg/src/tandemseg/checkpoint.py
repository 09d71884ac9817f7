"""Flat binary checkpoint files (magic ``CKPT1``).

Layout after the 5-byte magic, repeated per entry until EOF:
name length (u32 LE), UTF-8 name bytes, rank (u32 LE), one u32 LE extent per
axis, then the float32 LE payload in C order. Text metadata (such as the
architecture config) rides along as entries under ``__meta__/`` whose float
values are the UTF-8 byte values.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Iterable, Mapping

import numpy as np

from ._binio import ByteReader
from .errors import FormatError

MAGIC = b"CKPT1"
META_PREFIX = "__meta__/"


def save_checkpoint(path: str, arrays: "Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]",
                    meta: Mapping[str, str] | None = None) -> None:
    """Write named float32 arrays (and optional text metadata) to ``path``."""
    items = list(arrays.items()) if isinstance(arrays, Mapping) else list(arrays)
    if meta:
        for key in sorted(meta):
            items.append((META_PREFIX + key, encode_text(meta[key])))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in items:
            nb = name.encode("utf-8")
            # asarray keeps 0-d entries 0-d so rank round-trips exactly
            arr = np.asarray(arr, dtype="<f4", order="C")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str]]:
    """Read ``path``; returns (arrays in file order, decoded ``__meta__/`` texts)."""
    with open(path, "rb") as fh:
        reader = ByteReader(fh.read(), source=path)
    reader.expect_magic(MAGIC, "checkpoint")
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    meta: dict[str, str] = {}
    while reader.offset < len(reader.payload):
        name_len = reader.u32("entry name length")
        name = reader.take(name_len, "entry name").decode("utf-8")
        rank = reader.u32(f"rank of {name!r}")
        if rank > 32:
            raise FormatError(
                f"{path}: implausible rank {rank} for {name!r} at offset {reader.offset - 4}")
        shape = tuple(reader.u32(f"extent of {name!r}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = reader.take(4 * count, f"payload of {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if name in arrays or (name.startswith(META_PREFIX) and name[len(META_PREFIX):] in meta):
            raise FormatError(f"{path}: duplicate entry {name!r}")
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = decode_text(arr)
        else:
            arrays[name] = arr
    return arrays, meta


def encode_text(text: str) -> np.ndarray:
    """Encode text as a float32 vector of UTF-8 byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    values = np.asarray(arr).ravel()
    rounded = np.rint(values)
    if values.size and (np.abs(values - rounded) > 1e-3).any():
        raise FormatError("metadata entry does not hold byte values")
    if values.size and (rounded.min() < 0 or rounded.max() > 255):
        raise FormatError("metadata entry holds out-of-range byte values")
    return rounded.astype(np.uint8).tobytes().decode("utf-8")
