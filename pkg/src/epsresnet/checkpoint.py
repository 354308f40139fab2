"""Bit-exact checkpoint archive.

Layout (all integers little-endian):

    magic 'ERES' | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u8 dtype (0=f32, 1=f64)
                | u8 rank | rank * u32 dims | raw data (little-endian)
    u32 metadata_len | metadata (UTF-8 'key = value' lines)

The format is deliberately dumb so any language can parse it.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"ERES"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path: str, tensors: dict[str, np.ndarray],
                    metadata: dict[str, str]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(le.tobytes())
    meta_lines = "".join(f"{k} = {v}\n" for k, v in sorted(metadata.items()))
    mb = meta_lines.encode("utf-8")
    chunks.append(struct.pack("<I", len(mb)))
    chunks.append(mb)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} at offset {self.pos} "
                f"(needed {n} bytes, {len(self.blob) - self.pos} left)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not an ERES checkpoint)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: tensor {i} name is not UTF-8") from exc
        code, rank = r.unpack("<BB", f"tensor {name!r} header")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I", f"tensor {name!r} dims") if rank else ()
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if rank == 0:
            nbytes = dtype.itemsize
        raw = r.take(nbytes, f"tensor {name!r} data")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_raw = r.take(meta_len, "metadata").decode("utf-8")
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes at offset {r.pos}")
    metadata: dict[str, str] = {}
    for line in meta_raw.splitlines():
        if not line.strip():
            continue
        if " = " not in line:
            raise CheckpointError(f"{path}: malformed metadata line {line!r}")
        key, value = line.split(" = ", 1)
        metadata[key] = value
    return tensors, metadata
