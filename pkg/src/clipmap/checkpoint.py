"""Versioned little-endian tensor container ("CMAP" bundles).

Layout::

    b"CMAP"                       magic
    u32 version
    u32 record count
    per record:
        u32 name length, UTF-8 name
        u8  dtype code
        u32 rank, rank x u64 dims
        u64 byte offset into the payload
    payload                       raw little-endian element data
    u32 CRC32 of the payload

Offsets are relative to the payload start, strictly increasing and
non-overlapping.  Run metadata travels as a JSON string in the uint8 tensor
``__meta__``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .mapping import CompressionMaps, CompressionSpec, TowerSpec, maps_from_state
from .model import ClipModel, EncoderConfig, model_from_state

MAGIC = b"CMAP"
VERSION = 1
META_KEY = "__meta__"

DTYPE_CODES = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        dtype = np.dtype("<f8") if arr.dtype.itemsize == 8 else np.dtype("<f4")
    elif arr.dtype.kind in "iu" and arr.dtype.itemsize == 1 and arr.dtype.kind == "u":
        dtype = np.dtype("u1")
    elif arr.dtype.kind in "iub":
        dtype = np.dtype("<i8")
    else:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return np.asarray(arr, dtype=dtype, order="C")  # ascontiguousarray would promote 0-d to 1-d


def encode_bundle(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = dict(tensors)
    if meta is not None:
        items[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    header = [MAGIC, struct.pack("<II", VERSION, len(items))]
    chunks = []
    offset = 0
    for name, arr in items.items():
        arr = _le(arr)
        raw = arr.tobytes()
        encoded = name.encode("utf-8")
        header.append(struct.pack("<I", len(encoded)) + encoded)
        header.append(struct.pack("<BI", DTYPE_CODES[arr.dtype], arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.append(struct.pack("<Q", offset))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    return b"".join(header) + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError("truncated checkpoint header")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint header")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def decode_bundle(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a CMAP checkpoint (bad magic)")
    r = _Reader(buf)
    r.pos = 4
    version, count = r.take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    records = []
    for _ in range(count):
        (n,) = r.take("<I")
        try:
            name = r.raw(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8") from None
        code, rank = r.take("<BI")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = r.take(f"<{rank}Q") if rank else ()
        (offset,) = r.take("<Q")
        records.append((name, CODE_DTYPES[code], tuple(int(d) for d in dims), int(offset)))
    payload_start = r.pos
    payload = buf[payload_start:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("payload CRC32 mismatch (corrupted checkpoint)")
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for name, dtype, dims, offset in records:
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if offset != expected or offset + nbytes > len(payload):
            raise CheckpointError(f"tensor {name} has an inconsistent offset")
        expected = offset + nbytes
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name}")
        tensors[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=offset).reshape(dims).astype(dtype.newbyteorder("="))
    if expected != len(payload):
        raise CheckpointError("payload has trailing bytes not owned by any tensor")
    meta = None
    if META_KEY in tensors:
        meta = json.loads(tensors.pop(META_KEY).tobytes().decode("utf-8"))
    return tensors, meta


def save_bundle(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    data = encode_bundle(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict | None]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return decode_bundle(buf)


# -- typed helpers ----------------------------------------------------------------

def save_model(path, model: ClipModel, **extra) -> None:
    meta = {"kind": "model", "image": asdict(model.image.config), "text": asdict(model.text.config), **extra}
    save_bundle(path, model.state_dict(), meta)


def load_model(path, requires_grad: bool = False) -> ClipModel:
    tensors, meta = load_bundle(path)
    if not meta or meta.get("kind") != "model":
        raise CheckpointError(f"{path} does not hold a model")
    return model_from_state(EncoderConfig(**meta["image"]), EncoderConfig(**meta["text"]), tensors, requires_grad)


def save_maps(path, maps: CompressionMaps, spec: CompressionSpec, **extra) -> None:
    meta = {"kind": "maps", "image": asdict(spec.image), "text": asdict(spec.text), **extra}
    save_bundle(path, maps.state_dict(), meta)


def load_maps(path, requires_grad: bool = False) -> tuple[CompressionMaps, CompressionSpec]:
    tensors, meta = load_bundle(path)
    if not meta or meta.get("kind") != "maps":
        raise CheckpointError(f"{path} does not hold mapping matrices")
    spec = CompressionSpec(TowerSpec(**meta["image"]), TowerSpec(**meta["text"]))
    return maps_from_state(tensors, requires_grad), spec
