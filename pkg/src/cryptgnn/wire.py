"""Wire formats: message framing and field-matrix serialization.

Frame layout (little-endian):
    4B payload length | 16B session id | 4B round id | 2B sender | 2B tag | payload

Matrices serialize row-major as unsigned 64-bit little-endian words,
preceded by an 8-byte (rows: u32, cols: u32) header. Stacks of R
batch matrices are serialized as a single (R*N, K) matrix; R is public
protocol context.
"""

import struct
from enum import IntEnum

import numpy as np

SESSION_ID_BYTES = 16
_HEADER = struct.Struct("<16sIHH")
_LEN = struct.Struct("<I")
_MATRIX_HEADER = struct.Struct("<II")


class Tag(IntEnum):
    READ_PASS = 0
    WRITE_PASS = 1
    BEAVER_OPEN = 2
    ALPHA_OPEN = 3
    RESULT = 4
    CONTROL = 5


class FrameError(ValueError):
    pass


def encode_frame(session_id: bytes, round_id: int, sender: int, tag: int, payload: bytes) -> bytes:
    if len(session_id) != SESSION_ID_BYTES:
        raise FrameError("bad session id length")
    header = _HEADER.pack(session_id, round_id, sender, tag)
    return _LEN.pack(len(payload)) + header + payload


def decode_frame(frame: bytes):
    if len(frame) < _LEN.size + _HEADER.size:
        raise FrameError("truncated frame")
    (length,) = _LEN.unpack_from(frame, 0)
    session_id, round_id, sender, tag = _HEADER.unpack_from(frame, _LEN.size)
    payload = frame[_LEN.size + _HEADER.size :]
    if len(payload) != length:
        raise FrameError(f"payload length mismatch: header {length}, got {len(payload)}")
    return session_id, round_id, sender, Tag(tag), payload


FRAME_OVERHEAD = _LEN.size + _HEADER.size


def pack_matrix(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim == 3:  # batch stack: flatten the batch axis
        arr = arr.reshape(arr.shape[0] * arr.shape[1], arr.shape[2])
    if arr.ndim != 2:
        raise FrameError(f"cannot serialize array of ndim {arr.ndim}")
    rows, cols = arr.shape
    return _MATRIX_HEADER.pack(rows, cols) + arr.astype("<u8").tobytes()


def unpack_matrix(buf: bytes, offset: int = 0):
    """Returns (array, next_offset); the array is a fresh writable copy."""
    rows, cols = _MATRIX_HEADER.unpack_from(buf, offset)
    start = offset + _MATRIX_HEADER.size
    end = start + rows * cols * 8
    if end > len(buf):
        raise FrameError("matrix block exceeds buffer")
    arr = np.frombuffer(buf, dtype="<u8", count=rows * cols, offset=start)
    return arr.reshape(rows, cols).astype(np.uint64), end


def pack_matrices(arrays) -> bytes:
    return b"".join(pack_matrix(a) for a in arrays)


def unpack_matrices(buf: bytes, count: int):
    out, offset = [], 0
    for _ in range(count):
        arr, offset = unpack_matrix(buf, offset)
        out.append(arr)
    if offset != len(buf):
        raise FrameError("trailing bytes after matrix blocks")
    return out
