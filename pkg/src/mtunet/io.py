"""Binary persistence: BTSR tensors and MTCK checkpoints.

BTSR: ``BTSR`` magic, u8 version (1), u8 dtype (0=f64, 1=u8), u8 rank,
rank × u32 extents, row-major little-endian payload.

MTCK: ``MTCK`` magic, u8 version (1), u32 entry count, then per entry a u16
name length, the UTF-8 name and one BTSR tensor.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import LoadError, UsageError

BTSR_MAGIC = b"BTSR"
MTCK_MAGIC = b"MTCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}
_CODES = {np.dtype("<f8"): 0, np.dtype("u1"): 1}


def encode_tensor(array):
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code = 1
    else:
        array = array.astype("<f8", copy=False)
        code = 0
    header = BTSR_MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array).astype(_DTYPES[code], copy=False).tobytes()


def _need(buf, offset, count, what):
    if offset + count > len(buf):
        raise LoadError(f"truncated {what} at byte {offset}: need {count} bytes, have {len(buf) - offset}")


def decode_tensor(buf, offset=0):
    """Parse one BTSR tensor starting at ``offset``; returns (array, end)."""
    _need(buf, offset, 7, "tensor header")
    if buf[offset:offset + 4] != BTSR_MAGIC:
        raise LoadError(f"bad tensor magic at byte {offset}")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise LoadError(f"unsupported tensor version {version} at byte {offset}")
    if code not in _DTYPES:
        raise LoadError(f"unknown dtype code {code} at byte {offset}")
    offset += 7
    _need(buf, offset, 4 * rank, "tensor extents")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    _need(buf, offset, nbytes, "tensor payload")
    array = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)
    return array.astype(np.float64 if code == 0 else np.uint8), offset + nbytes


def write_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path):
    buf = Path(path).read_bytes()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise LoadError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return array


def encode_checkpoint(named):
    parts = [MTCK_MAGIC, struct.pack("<BI", VERSION, len(named))]
    for name, array in named.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise UsageError(f"checkpoint entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(encode_tensor(np.asarray(array, dtype=np.float64)))
    return b"".join(parts)


def save_checkpoint(path, named):
    """Write ``{name: array}`` in iteration order."""
    Path(path).write_bytes(encode_checkpoint(named))


def decode_checkpoint(buf, expected=None, strict=False):
    _need(buf, 0, 9, "checkpoint header")
    if buf[:4] != MTCK_MAGIC:
        raise LoadError("bad checkpoint magic")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    offset = 9
    named = {}
    for _ in range(count):
        _need(buf, offset, 2, "entry name length")
        (length,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        _need(buf, offset, length, "entry name")
        name = bytes(buf[offset:offset + length]).decode("utf-8")
        offset += length
        if name in named:
            raise LoadError(f"duplicate checkpoint entry {name!r}")
        named[name], offset = decode_tensor(buf, offset)
    if offset != len(buf):
        raise LoadError(f"{len(buf) - offset} trailing bytes at byte {offset}")
    if expected is not None:
        for name, array in named.items():
            if name not in expected:
                if strict:
                    raise LoadError(f"unknown checkpoint entry {name!r}")
                continue
            if tuple(expected[name]) != array.shape:
                raise LoadError(f"{name}: shape {array.shape} conflicts with expected {tuple(expected[name])}")
    return named


def load_checkpoint(path, expected=None, strict=False):
    """Read a checkpoint; ``expected`` maps names to shapes for validation."""
    return decode_checkpoint(Path(path).read_bytes(), expected, strict)
