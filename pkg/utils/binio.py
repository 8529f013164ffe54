"""
Binary containers - magic, little-endian header, payload byte count, length-prefixed arrays,
trailing CRC32
"""

import struct
import zlib
from pathlib import Path
from typing import Tuple

import numpy as np

from utils.errors import (
    BadMagicError,
    ChecksumError,
    FormatError,
    InvalidInputError,
    PlainIOError,
    TruncatedFileError,
    VersionMismatchError,
)

LENGTH = struct.Struct("<Q")
CRC = struct.Struct("<I")
# largest integer magnitude each payload dtype holds exactly
EXACT_INTEGER_LIMIT = {4: 2**24, 8: 2**53}


class PayloadWriter:
    """Accumulates length-prefixed little-endian float arrays"""

    def __init__(self, dtype: str = "<f4"):
        self.dtype = np.dtype(dtype)
        self._chunks: list[bytes] = []

    def add_array(self, values) -> None:
        flat = np.ascontiguousarray(np.asarray(values, dtype=np.float64).ravel()).astype(self.dtype)
        self._chunks.append(LENGTH.pack(flat.size))
        self._chunks.append(flat.tobytes())

    def add_integers(self, values) -> None:
        """Integer metadata stored in the float payload; rejects values the dtype would round"""
        flat = np.asarray(values, dtype=np.float64).ravel()
        limit = EXACT_INTEGER_LIMIT[self.dtype.itemsize]
        if flat.size and (
            not np.all(np.isfinite(flat)) or np.any(flat != np.round(flat)) or np.max(np.abs(flat)) > limit
        ):
            raise InvalidInputError(f"Integer payload values must be whole numbers within +/-{limit}")
        self.add_array(flat)

    def payload(self) -> bytes:
        return b"".join(self._chunks)


class PayloadReader:
    def __init__(self, payload: bytes, dtype: str = "<f4"):
        self.payload = payload
        self.dtype = np.dtype(dtype)
        self.pos = 0

    def read_array(self, expected: int | None = None) -> np.ndarray:
        if self.pos + LENGTH.size > len(self.payload):
            raise FormatError("Payload ended before an array length")
        (count,) = LENGTH.unpack_from(self.payload, self.pos)
        self.pos += LENGTH.size
        nbytes = count * self.dtype.itemsize
        if self.pos + nbytes > len(self.payload):
            raise FormatError(f"Array of {count} values runs past the payload end")
        values = np.frombuffer(self.payload, dtype=self.dtype, count=count, offset=self.pos)
        self.pos += nbytes
        if expected is not None and count != expected:
            raise FormatError(f"Expected {expected} values, found {count}")
        return values.astype(np.float64)

    def read_integers(self, expected: int | None = None) -> np.ndarray:
        return self.read_array(expected).astype(np.int64)

    def done(self) -> bool:
        return self.pos == len(self.payload)


def write_container(path: str | Path, magic: bytes, header: bytes, payload: bytes) -> None:
    blob = magic + header + LENGTH.pack(len(payload)) + payload + CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(blob)
    except OSError as e:
        raise PlainIOError(f"Cannot write {path}: {str(e)}") from e


def read_container(path: str | Path, magic: bytes, version: int, header: struct.Struct) -> Tuple[tuple, bytes]:
    """Validate magic, version (first header field), length and CRC; return header fields and payload.

    Truncation is judged against the stored payload byte count, so any CRC mismatch on a
    full-length file is a checksum failure.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise PlainIOError(f"Cannot read {path}: {str(e)}") from e

    if len(data) < len(magic):
        raise TruncatedFileError(f"{path} is shorter than its magic")
    if data[: len(magic)] != magic:
        raise BadMagicError(f"{path} does not start with {magic!r}")
    start = len(magic) + header.size + LENGTH.size
    if len(data) < start + CRC.size:
        raise TruncatedFileError(f"{path} is shorter than its header")

    fields = header.unpack_from(data, len(magic))
    if fields[0] != version:
        raise VersionMismatchError(f"{path} has format version {fields[0]}, expected {version}")

    (declared,) = LENGTH.unpack_from(data, len(magic) + header.size)
    available = len(data) - start - CRC.size
    if available < declared:
        raise TruncatedFileError(f"{path} is truncated: {available} of {declared} payload bytes present")
    if available > declared:
        raise FormatError(f"{path} has {available - declared} bytes beyond its declared payload")

    payload = data[start : start + declared]
    (stored,) = CRC.unpack_from(data, len(data) - CRC.size)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{path} failed its CRC32 check")

    return fields, payload


def as_f32_exact(values) -> np.ndarray:
    """Round to the nearest float32 and widen back, so f32 storage is lossless"""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)
