"""Binary serialization for named tensors, protocol frames, and checkpoints.

Everything is little-endian and fully specified so encoded bytes are
bit-identical across platforms and runs:

Named tensor block::

    u32 tensor count
    per tensor: u16 name length | name utf-8 | u8 ndim | u64 * ndim dims
                | float64 row-major payload

Protocol frame (see :mod:`fedcourse.federation` for message semantics)::

    u32 body length | body
    body = magic "FEDM" | u16 version | u8 kind | u32 round | i32 school_id
           | kind-specific payload

Checkpoint file::

    magic "FCKP" | u16 version | u32 metadata length | metadata JSON (utf-8,
    sorted keys) | named tensor block
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO

import numpy as np

from fedcourse.errors import ProtocolError

FRAME_MAGIC = b"FEDM"
CHECKPOINT_MAGIC = b"FCKP"
WIRE_VERSION = 1


def encode_tensor_block(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ProtocolError(f"tensor name too long: {name[:32]}...")
        # asarray keeps 0-d shape; ascontiguousarray would promote it to 1-d
        data = np.asarray(arr, dtype="<f8", order="C")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b"")
        parts.append(data.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0) -> None:
        self.buf = buf
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError("truncated payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensor_block(reader: _Reader) -> dict[str, np.ndarray]:
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        if name in tensors:
            raise ProtocolError(f"duplicate tensor name {name!r}")
        (ndim,) = reader.unpack("<B")
        dims = reader.unpack(f"<{ndim}Q") if ndim else ()
        size = 1
        for dim in dims:
            size *= dim
        payload = reader.take(8 * size)
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        tensors[name] = arr
    return tensors


def tensor_block_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    return encode_tensor_block(tensors)


def read_tensor_block(buf: bytes, offset: int = 0) -> tuple[dict[str, np.ndarray], int]:
    reader = _Reader(buf, offset)
    tensors = decode_tensor_block(reader)
    return tensors, reader.pos


# --- protocol frames ---------------------------------------------------------

def encode_frame(kind: int, round_no: int, school_id: int, payload: bytes) -> bytes:
    body = b"".join(
        (FRAME_MAGIC, struct.pack("<HBIi", WIRE_VERSION, kind, round_no, school_id), payload)
    )
    return struct.pack("<I", len(body)) + body


def decode_frame(buf: bytes, offset: int = 0) -> tuple[int, int, int, bytes, int]:
    """Return (kind, round, school_id, payload, next_offset)."""
    reader = _Reader(buf, offset)
    (body_len,) = reader.unpack("<I")
    body = reader.take(body_len)
    inner = _Reader(body)
    if inner.take(4) != FRAME_MAGIC:
        raise ProtocolError("bad frame magic")
    version, kind, round_no, school_id = inner.unpack("<HBIi")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    payload = body[inner.pos :]
    return kind, round_no, school_id, payload, reader.pos


def iter_frames(buf: bytes):
    """Yield (kind, round, school_id, payload) for each frame in ``buf``."""
    offset = 0
    while offset < len(buf):
        kind, round_no, school_id, payload, offset = decode_frame(buf, offset)
        yield kind, round_no, school_id, payload


# --- checkpoints --------------------------------------------------------------

def write_checkpoint(fh: BinaryIO, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<H", WIRE_VERSION))
    fh.write(struct.pack("<I", len(meta_bytes)))
    fh.write(meta_bytes)
    fh.write(encode_tensor_block(tensors))


def checkpoint_bytes(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, meta, tensors)
    return buf.getvalue()


def read_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    reader = _Reader(buf)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise ProtocolError("not a checkpoint file")
    (version,) = reader.unpack("<H")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported checkpoint version {version}")
    (meta_len,) = reader.unpack("<I")
    meta = json.loads(reader.take(meta_len).decode("utf-8"))
    tensors = decode_tensor_block(reader)
    if reader.pos != len(buf):
        raise ProtocolError("trailing bytes after checkpoint")
    return meta, tensors


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh.read())
