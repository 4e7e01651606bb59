"""Coordinated per-process checkpoints in a small versioned binary format.

Layout (little-endian)::

    b"MLCK" | u16 version=1 | u32 rank | u64 iter | u64 body_len | body | u32 crc32

The crc covers header and body. The body stores the kernel id followed by the
named arrays of the kernel state, so a round trip is bitwise exact.
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"MLCK"
VERSION = 1
_HEADER = struct.Struct("<4sHIQQ")
_CRC = struct.Struct("<I")
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CheckpointError(RuntimeError):
    pass


class MissingCheckpoint(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


def should_checkpoint(iter: int, cp_int: int) -> bool:
    if iter < 1:
        raise ValueError("iteration must be >= 1")
    return iter % cp_int == 0


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return buf[off:off + n].decode(), off + n


def encode_state(kernel_id: str, state: dict[str, np.ndarray]) -> bytes:
    parts = [_pack_str(kernel_id), struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        code = "f8" if arr.dtype.kind == "f" else "i8"
        arr = arr.astype(_DTYPES[code], order="C", copy=False)
        parts.append(_pack_str(name))
        parts.append(_pack_str(code))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_state(body: bytes) -> tuple[str, dict[str, np.ndarray]]:
    kernel_id, off = _unpack_str(body, 0)
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    state = {}
    for _ in range(count):
        name, off = _unpack_str(body, off)
        code, off = _unpack_str(body, off)
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
        state[name] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        off += nbytes
    return kernel_id, state


def encode(rank: int, iter: int, kernel_id: str, state: dict[str, np.ndarray]) -> bytes:
    body = encode_state(kernel_id, state)
    head = _HEADER.pack(MAGIC, VERSION, rank, iter, len(body))
    return head + body + _CRC.pack(zlib.crc32(head + body))


def decode(blob: bytes) -> tuple[int, int, str, dict[str, np.ndarray]]:
    if len(blob) < _HEADER.size + _CRC.size:
        raise CorruptCheckpoint("truncated checkpoint")
    magic, version, rank, iter, body_len = _HEADER.unpack_from(blob, 0)
    end = _HEADER.size + body_len
    if magic != MAGIC or version != VERSION or len(blob) != end + _CRC.size:
        raise CorruptCheckpoint("bad header")
    (crc,) = _CRC.unpack_from(blob, end)
    if crc != zlib.crc32(blob[:end]):
        raise CorruptCheckpoint("crc mismatch")
    kernel_id, state = decode_state(blob[_HEADER.size:end])
    return rank, iter, kernel_id, state


class MemoryStore:
    """Keeps the latest checkpoint blob of every rank in memory."""

    def __init__(self, kernel_id: str):
        self.kernel_id = kernel_id
        self.blobs: dict[int, bytes] = {}

    def write(self, rank: int, blob: bytes) -> str:
        decode(blob)
        self.blobs[rank] = blob
        return f"mem://ckpt_{self.kernel_id}_{rank}.bin"

    def read(self, rank: int) -> bytes:
        try:
            return self.blobs[rank]
        except KeyError:
            raise MissingCheckpoint(f"no checkpoint for rank {rank}") from None


class FileStore:
    """One ``ckpt_<kernel>_<rank>.bin`` per rank in ``directory``."""

    def __init__(self, directory, kernel_id: str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.kernel_id = kernel_id

    def path(self, rank: int) -> Path:
        return self.directory / f"ckpt_{self.kernel_id}_{rank}.bin"

    def write(self, rank: int, blob: bytes) -> str:
        final = self.path(rank)
        tmp = final.with_suffix(".bin.tmp")
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        decode(tmp.read_bytes())
        # the rename replaces the previous generation only once the new one validates
        os.replace(tmp, final)
        return str(final)

    def read(self, rank: int) -> bytes:
        try:
            return self.path(rank).read_bytes()
        except FileNotFoundError:
            raise MissingCheckpoint(f"no checkpoint for rank {rank}") from None


def write_checkpoint(store, rank: int, iter: int, state: dict[str, np.ndarray]) -> str:
    return store.write(rank, encode(rank, iter, store.kernel_id, state))


def read_checkpoint(store, rank: int) -> tuple[int, dict[str, np.ndarray]]:
    got_rank, iter, kernel_id, state = decode(store.read(rank))
    if got_rank != rank or kernel_id != store.kernel_id:
        raise CorruptCheckpoint(f"checkpoint belongs to rank {got_rank}/{kernel_id}")
    return iter, state
