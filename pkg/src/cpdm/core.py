"""Tensors, seeded random streams and the CPDT binary container.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in C (row-major)
order. Reductions elsewhere in the package accumulate in float64.

Random streams use numpy's Philox-4x64 counter-based generator. The 128-bit
key is the BLAKE2b digest of ``"<seed>:<label>"``, so every (seed, label)
pair names an independent, reproducible stream.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from cpdm.errors import ConfigError, FormatError, ShapeError

DTYPE = np.float32

MAGIC = b"CPDT"
VERSION = 1
DTYPE_F32 = 0


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    return shape


class Prng:
    """Deterministic random stream keyed by ``(seed, label)``.

    A stream must not be drawn from concurrently. Use :meth:`child` to split
    independent labelled streams up front.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed)
        self.label = str(label)
        digest = hashlib.blake2b(f"{self.seed}:{self.label}".encode(), digest_size=16).digest()
        key = np.frombuffer(digest, dtype="<u8").copy()
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"Prng(seed={self.seed}, label={self.label!r})"

    def child(self, label: str) -> "Prng":
        return Prng(self.seed, f"{self.label}/{label}")

    def gaussian(self, shape) -> np.ndarray:
        return self._gen.standard_normal(check_shape(shape), dtype=DTYPE)

    def normal64(self, shape) -> np.ndarray:
        return self._gen.standard_normal(check_shape(shape))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        """Integers in ``[low, high)``, as :meth:`numpy.random.Generator.integers`."""
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)


def gaussian(prng: Prng, shape) -> np.ndarray:
    """I.i.d. standard-normal float32 draws of the given shape."""
    return prng.gaussian(shape)


_UNARY = {"exp"}
_OPS = {"add", "sub", "mul", "scale", "exp", "clamp"}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Pointwise tensor arithmetic.

    ``add``/``sub``/``mul`` accept a tensor or scalar for ``b``; ``scale``
    takes a scalar; ``exp`` ignores ``b``; ``clamp`` takes ``(low, high)``.
    """
    if op not in _OPS:
        raise ConfigError(f"unknown elementwise op {op!r}")
    a = as_tensor(a)
    if op == "exp":
        out = np.exp(a)
    elif op == "clamp":
        low, high = b
        out = np.clip(a, low, high)
    elif op == "scale":
        out = a * DTYPE(b)
    else:
        if np.ndim(b) > 0:
            b = as_tensor(b)
            if b.shape != a.shape:
                raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
        else:
            b = DTYPE(b)
        out = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b)
    return as_tensor(out)


def encode_tensor(t) -> bytes:
    t = np.asarray(t)
    if t.ndim == 0:
        t = t.reshape(1)
    check_shape(t.shape)
    if t.ndim > 255:
        raise ShapeError("at most 255 dimensions are supported")
    header = MAGIC + struct.pack("<HBB", VERSION, DTYPE_F32, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'CPDT'", 0)
    if len(buf) < 8:
        raise FormatError("truncated header", len(buf))
    version, dtype_code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype_code != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype_code}", 6)
    if ndim == 0:
        raise FormatError("ndim must be >= 1", 7)
    dims_end = 8 + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError("truncated extents", len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    for i, s in enumerate(shape):
        if s == 0:
            raise FormatError("zero extent", 8 + 4 * i)
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    payload = len(buf) - dims_end
    if payload < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, found {payload}", len(buf))
    if payload > expected:
        raise FormatError(f"trailing bytes after payload ({payload - expected})", dims_end + expected)
    data = np.frombuffer(buf, dtype="<f4", count=expected // 4, offset=dims_end)
    return data.astype(DTYPE).reshape(shape)


def save_tensor(t, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
