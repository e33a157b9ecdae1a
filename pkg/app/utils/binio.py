# app/utils/binio.py
import struct
from typing import BinaryIO

import numpy as np


class TruncatedStream(EOFError):
    pass


def read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedStream(f"truncated while reading {what}: wanted {n} bytes, got {len(data)}")
    return data


def read_struct(fh: BinaryIO, fmt: str, what: str) -> tuple:
    return struct.unpack(fmt, read_exact(fh, struct.calcsize(fmt), what))


def write_f32(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    raw = read_exact(fh, 4 * count, what)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def write_u32(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<u4").tobytes())


def read_u32(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    raw = read_exact(fh, 4 * count, what)
    return np.frombuffer(raw, dtype="<u4").astype(np.int64)
