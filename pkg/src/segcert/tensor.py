"""Dense tensors, the SEGT binary container, and margin primitives.

SEGT layout (little-endian, no padding)::

    0..3   b"SEGT"
    4      version (0x01)
    5      dtype code: 0x01 real32, 0x02 index8 (uint8), 0x03 index32 (int32)
    6      rank, 1..4
    7      0x00 reserved
    8..    rank x u32 extents, then the row-major payload
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from segcert._kernels import top2_scan

MAGIC = b"SEGT"
VERSION = 1
MAX_RANK = 4
HEADER_SIZE = 8

DTYPES = {
    "real32": (1, np.dtype("<f4")),
    "index8": (2, np.dtype("u1")),
    "index32": (3, np.dtype("<i4")),
}
_BY_CODE = {code: (name, dt) for name, (code, dt) in DTYPES.items()}


class SegtError(ValueError):
    """Base class for malformed or unsupported SEGT content."""

    code = "SegtError"


class BadMagic(SegtError):
    code = "BadMagic"


class UnsupportedVersion(SegtError):
    code = "UnsupportedVersion"


class UnsupportedDtype(SegtError):
    code = "UnsupportedDtype"


class UnsupportedRank(SegtError):
    code = "UnsupportedRank"


class BadReserved(SegtError):
    code = "BadReserved"


class TruncatedHeader(SegtError):
    code = "TruncatedHeader"


class TruncatedPayload(SegtError):
    code = "TruncatedPayload"


class TrailingBytes(SegtError):
    code = "TrailingBytes"


class ZeroExtent(SegtError):
    code = "ZeroExtent"


class ExtentOverflow(SegtError):
    code = "ExtentOverflow"


class NonFiniteLogits(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Tensor:
    dtype: str
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise UnsupportedDtype(f"unknown dtype {self.dtype!r}")
        arr = np.ascontiguousarray(self.data, dtype=DTYPES[self.dtype][1])
        if not 1 <= arr.ndim <= MAX_RANK:
            raise UnsupportedRank(f"rank {arr.ndim} outside 1..{MAX_RANK}")
        if 0 in arr.shape:
            raise ZeroExtent(f"shape {arr.shape} has a zero extent")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    @classmethod
    def real32(cls, data) -> Tensor:
        return cls("real32", np.asarray(data))

    @classmethod
    def index(cls, data) -> Tensor:
        """Smallest index dtype that holds every value."""
        arr = np.asarray(data)
        if arr.size and arr.min() >= 0 and arr.max() <= 255:
            return cls("index8", arr)
        return cls("index32", arr)


def encode(tensor: Tensor) -> bytes:
    code = DTYPES[tensor.dtype][0]
    header = MAGIC + bytes([VERSION, code, tensor.data.ndim, 0])
    extents = struct.pack(f"<{tensor.data.ndim}I", *tensor.shape)
    return header + extents + tensor.data.tobytes(order="C")


def decode(buf: bytes) -> Tensor:
    if len(buf) < HEADER_SIZE:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise BadMagic(f"magic {bytes(buf[:4])!r}")
        raise TruncatedHeader(f"{len(buf)} bytes, header needs {HEADER_SIZE}")
    if buf[:4] != MAGIC:
        raise BadMagic(f"magic {bytes(buf[:4])!r}")
    version, code, rank, reserved = buf[4], buf[5], buf[6], buf[7]
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if code not in _BY_CODE:
        raise UnsupportedDtype(f"dtype code {code:#04x}")
    if not 1 <= rank <= MAX_RANK:
        raise UnsupportedRank(f"rank {rank}")
    if reserved != 0:
        raise BadReserved(f"reserved byte {reserved:#04x}")
    end_extents = HEADER_SIZE + 4 * rank
    if len(buf) < end_extents:
        raise TruncatedHeader("extent table cut short")
    shape = struct.unpack_from(f"<{rank}I", buf, HEADER_SIZE)
    if 0 in shape:
        raise ZeroExtent(f"shape {shape}")
    name, dt = _BY_CODE[code]
    count = 1
    for extent in shape:
        count *= extent
    nbytes = count * dt.itemsize
    # the element count must be addressable on this platform
    if nbytes > np.iinfo(np.intp).max:
        raise ExtentOverflow(f"shape {shape} needs {nbytes} bytes")
    available = len(buf) - end_extents
    if available < nbytes:
        raise TruncatedPayload(f"payload has {available} bytes, shape needs {nbytes}")
    if available > nbytes:
        raise TrailingBytes(f"{available - nbytes} bytes after payload")
    data = np.frombuffer(buf, dtype=dt, count=count, offset=end_extents).reshape(shape)
    return Tensor(name, data.copy())


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_tensor(tensor: Tensor, path) -> None:
    if not isinstance(tensor, Tensor):
        raise TypeError("write_tensor expects a Tensor")
    data = encode(tensor)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# --- margin primitives ---------------------------------------------------


@dataclass(frozen=True)
class TopTwo:
    """Per-pixel argmax, top logit and top1-top2 margin, each H x W."""

    preds: np.ndarray
    top1: np.ndarray
    margin: np.ndarray


def _class_major(logits) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.ndim != 3:
        raise ValueError(f"logits must be K x H x W, got shape {logits.shape}")
    if logits.shape[0] < 2:
        raise ValueError("need at least two classes")
    if logits.dtype not in (np.float32, np.float64):
        logits = logits.astype(np.float64)
    return np.ascontiguousarray(logits)


def _scan_chunked(flat, threads):
    from concurrent.futures import ThreadPoolExecutor

    bounds = np.linspace(0, flat.shape[1], threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda ab: top2_scan(np.ascontiguousarray(flat[:, ab[0]:ab[1]])),
                              zip(bounds[:-1], bounds[1:])))
    arg, top1, margin = (np.concatenate([part[i] for part in parts]) for i in range(3))
    return arg, top1, margin, all(part[3] for part in parts)


def top_two(logits, threads: int = 1) -> TopTwo:
    """Argmax, top logit and margin in one pass; ``threads`` splits the pixels."""
    logits = _class_major(logits)
    k, h, w = logits.shape
    flat = logits.reshape(k, h * w)
    if threads > 1 and h * w >= 4096 * threads:
        arg, top1, margin, finite = _scan_chunked(flat, threads)
    else:
        arg, top1, margin, finite = top2_scan(flat)
    if not finite:
        raise NonFiniteLogits("logits contain NaN or infinity")
    return TopTwo(arg.reshape(h, w), top1.reshape(h, w), margin.reshape(h, w))


def argmax_predictions(logits) -> np.ndarray:
    """Per-pixel predicted class, lowest index on ties."""
    return top_two(logits).preds


def margins(logits) -> np.ndarray:
    """Top-1 minus top-2 logit per pixel, in float64."""
    return top_two(logits).margin


def class_margins(logits, k: int, top: TopTwo | None = None):
    """Raw TP and TN margins for class ``k``.

    tp_raw = f_k - max_{j != k} f_j (negative where k is not predicted),
    tn_raw = top1 - f_k (zero where k is predicted).
    """
    logits = _class_major(logits)
    if not 0 <= k < logits.shape[0]:
        raise ValueError(f"class index {k} outside [0, {logits.shape[0]})")
    if top is None:
        top = top_two(logits)
    fk = logits[k].astype(np.float64)
    is_k = top.preds == k
    tn_raw = np.where(is_k, 0.0, top.top1 - fk)
    tp_raw = np.where(is_k, top.margin, fk - top.top1)
    return tp_raw, tn_raw
