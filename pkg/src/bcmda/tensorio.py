"""Binary tensor records and named-tensor archives.

Record layout (little endian)::

    b"BCMD" | u32 version=1 | u32 rank | rank x u64 extents | u32 dtype | payload

dtype codes: 1 = float32, 2 = uint8. Payload is row-major.

An archive is ``<stem>.bin`` (concatenated records) plus ``<stem>.idx``, a text
index with one ``name<TAB>offset<TAB>shape`` line per record.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"BCMD"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("u1"): 2}
CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}


class FormatError(ValueError):
    """Corrupt or unsupported tensor record."""


def _normalize(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return arr.astype("<f4", copy=False)
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return arr.astype("u1", copy=False)
    raise FormatError(f"unsupported dtype {arr.dtype}; only float32 and uint8 are stored")


def encode(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(_normalize(arr))
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<I", DTYPE_CODES[arr.dtype])
    return header + arr.tobytes()


def read_record(fh: BinaryIO, name: str = "<stream>") -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    raw = fh.read(8)
    if len(raw) != 8:
        raise FormatError(f"{name}: truncated header")
    version, rank = struct.unpack("<II", raw)
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    raw = fh.read(8 * rank + 4)
    if len(raw) != 8 * rank + 4:
        raise FormatError(f"{name}: truncated header")
    shape = struct.unpack(f"<{rank}Q", raw[: 8 * rank])
    (code,) = struct.unpack("<I", raw[8 * rank :])
    if code not in CODE_DTYPES:
        raise FormatError(f"{name}: unknown dtype code {code}")
    dtype = CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"{name}: truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_tensors(path, arrays) -> None:
    """Write one or more records back to back into a single file."""
    with open(path, "wb") as fh:
        for arr in arrays:
            fh.write(encode(arr))


def load_tensors(path) -> list[np.ndarray]:
    path = Path(path)
    out = []
    size = path.stat().st_size
    with open(path, "rb") as fh:
        while fh.tell() < size:
            out.append(read_record(fh, str(path)))
    return out


def save_tensor(path, arr) -> None:
    save_tensors(path, [arr])


def load_tensor(path) -> np.ndarray:
    arrays = load_tensors(path)
    if len(arrays) != 1:
        raise FormatError(f"{path}: expected one record, found {len(arrays)}")
    return arrays[0]


def _archive_paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".bin"), stem.with_suffix(".idx")


def save_archive(stem, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Atomically write a named-tensor archive; ``meta`` is stored as a JSON uint8 record."""
    bin_path, idx_path = _archive_paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    items = dict(tensors)
    if meta is not None:
        items["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    lines = []
    offset = 0
    chunks = []
    for name, arr in items.items():
        if "\t" in name or "\n" in name:
            raise ValueError(f"invalid tensor name {name!r}")
        rec = encode(arr)
        shape = "x".join(str(s) for s in np.shape(arr))
        lines.append(f"{name}\t{offset}\t{shape}")
        offset += len(rec)
        chunks.append(rec)
    tmp_bin = bin_path.with_name(bin_path.name + ".tmp")
    tmp_idx = idx_path.with_name(idx_path.name + ".tmp")
    tmp_bin.write_bytes(b"".join(chunks))
    tmp_idx.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp_bin, bin_path)
    os.replace(tmp_idx, idx_path)


def load_archive(stem) -> tuple[dict[str, np.ndarray], dict | None]:
    bin_path, idx_path = _archive_paths(stem)
    if not bin_path.exists() or not idx_path.exists():
        raise FileNotFoundError(f"checkpoint archive {stem} not found")
    tensors = {}
    with open(bin_path, "rb") as fh:
        for line in idx_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            name, offset, _shape = line.split("\t")
            fh.seek(int(offset))
            tensors[name] = read_record(fh, f"{bin_path}:{name}")
    meta = None
    if "__meta__" in tensors:
        meta = json.loads(tensors.pop("__meta__").tobytes().decode())
    return tensors, meta
