"""Dense float32 tensors, descriptive statistics, seeded sampling and the QTNS container."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from qlens.errors import (
    BadHeaderError,
    BadMagicError,
    BadVersionError,
    EmptyInputError,
    InvalidParameterError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedFileError,
)

MASK64 = (1 << 64) - 1
GOLDEN64 = 0x9E3779B97F4A7C15


class Tensor:
    """Immutable row-major float32 array.

    Construction copies the input (unless it is already a read-only float32
    array) and rejects NaN/Inf.
    """

    __slots__ = ("_data",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.asarray(data, dtype=np.float32)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise InvalidParameterError("shape", f"extents must be positive, got {shape}")
            if math.prod(shape) != arr.size:
                raise InvalidParameterError("shape", f"product of {shape} != {arr.size} elements")
            arr = arr.reshape(shape)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise EmptyInputError()
        if not np.isfinite(arr).all():
            raise NonFiniteError()
        if arr.flags.writeable or not arr.flags.c_contiguous:
            arr = np.array(arr, dtype=np.float32, order="C", copy=True)
            arr.flags.writeable = False
        self._data = arr

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=np.float32))

    @property
    def data(self) -> np.ndarray:
        """Read-only float32 view."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable float32 copy."""
        return self._data.copy()

    def tolist(self):
        return self._data.tolist()

    def __len__(self) -> int:
        return self._data.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


TensorLike = Union[Tensor, np.ndarray, Sequence[float]]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class TensorStats:
    mean: float
    std: float
    min: float
    max: float
    absmax: float
    l2norm: float
    kurtosis: float
    count: int


def stats(t: TensorLike) -> TensorStats:
    """Descriptive statistics with float64 accumulation.

    ``std`` is the population standard deviation; ``kurtosis`` is excess
    kurtosis (0 for a Gaussian, defined as 0 when std is 0).
    """
    x = as_tensor(t).data.astype(np.float64).ravel()
    if x.size == 0:
        raise EmptyInputError()
    mean = float(x.mean())
    c = x - mean
    var = float(np.mean(c * c))
    std = math.sqrt(var)
    kurt = float(np.mean(c**4) / (var * var) - 3.0) if var > 0 else 0.0
    lo, hi = float(x.min()), float(x.max())
    # guard against float64 mean drifting one ulp outside [min, max]
    mean = min(max(mean, lo), hi)
    return TensorStats(
        mean=mean,
        std=std,
        min=lo,
        max=hi,
        absmax=max(abs(lo), abs(hi)),
        l2norm=float(np.sqrt(np.dot(x, x))),
        kurtosis=kurt,
        count=int(x.size),
    )


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    return Tensor(a.data + b.data)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    return Tensor(a.data - b.data)


def scale(a: TensorLike, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor((a.data.astype(np.float64) * float(c)).astype(np.float32))


def l2(a: TensorLike) -> float:
    x = as_tensor(a).data.astype(np.float64).ravel()
    return float(np.sqrt(np.dot(x, x)))


# ---------------------------------------------------------------------------
# randomness


def splitmix64(x: int) -> int:
    """SplitMix64 output finalizer (a bijection on 64-bit integers)."""
    x = (x + GOLDEN64) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix_seed(base_seed: int, stream_id: int) -> int:
    """Derive a substream seed.

    ``splitmix64(base + GOLDEN * (stream_id + 1))``; the multiplier is odd so
    distinct stream ids give distinct pre-images, and splitmix64 is bijective.
    """
    return splitmix64((int(base_seed) + GOLDEN64 * (int(stream_id) + 1)) & MASK64)


class RngStream:
    """Seeded stream on numpy's PCG64 bit generator.

    PCG64's output sequence for a given integer seed is fixed by numpy's
    documented SeedSequence/PCG64 algorithms and is platform independent.
    Normal draws use numpy's ziggurat sampler.
    """

    algorithm = "numpy-PCG64/SeedSequence; normals via ziggurat; substreams via splitmix64 mixing"

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def substream(self, stream_id: int) -> "RngStream":
        return RngStream(mix_seed(self.seed, stream_id))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def rademacher(self, size) -> np.ndarray:
        return np.where(self._gen.integers(0, 2, size=size, dtype=np.int8) == 1, 1.0, -1.0)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def raw(self, n: int) -> np.ndarray:
        """``n`` raw 64-bit outputs."""
        return self._gen.bit_generator.random_raw(n)


# ---------------------------------------------------------------------------
# distributions


@dataclass(frozen=True)
class Normal:
    mu: float = 0.0
    sigma: float = 1.0


@dataclass(frozen=True)
class Uniform:
    a: float = -1.0
    b: float = 1.0


@dataclass(frozen=True)
class Laplace:
    mu: float = 0.0
    b: float = 1.0


@dataclass(frozen=True)
class OutlierMixture:
    """Standard normal with a random ``p_out`` fraction multiplied by ``scale_out``."""

    p_out: float = 0.01
    scale_out: float = 20.0


DistSpec = Union[Normal, Uniform, Laplace, OutlierMixture]


def validate_dist(dist: DistSpec) -> None:
    if isinstance(dist, Normal):
        if not dist.sigma > 0:
            raise InvalidParameterError("sigma", f"must be > 0, got {dist.sigma}")
    elif isinstance(dist, Uniform):
        if not dist.a < dist.b:
            raise InvalidParameterError("a", f"need a < b, got a={dist.a}, b={dist.b}")
    elif isinstance(dist, Laplace):
        if not dist.b > 0:
            raise InvalidParameterError("b", f"must be > 0, got {dist.b}")
    elif isinstance(dist, OutlierMixture):
        if not 0.0 <= dist.p_out <= 1.0:
            raise InvalidParameterError("p_out", f"must be in [0, 1], got {dist.p_out}")
        if not dist.scale_out >= 1.0:
            raise InvalidParameterError("scale_out", f"must be >= 1, got {dist.scale_out}")
    else:
        raise InvalidParameterError("dist", f"unknown distribution {dist!r}")


def parse_dist(text: str) -> DistSpec:
    """Parse ``normal:0,1``, ``uniform:-1,1``, ``laplace:0,1`` or ``outlier:0.01,20``."""
    name, _, params = text.partition(":")
    ctor = {"normal": Normal, "uniform": Uniform, "laplace": Laplace, "outlier": OutlierMixture}.get(name.strip().lower())
    if ctor is None:
        raise InvalidParameterError("dist", f"unknown distribution {name!r}")
    try:
        args = [float(v) for v in params.split(",")] if params.strip() else []
        dist = ctor(*args)
    except (TypeError, ValueError) as exc:
        raise InvalidParameterError("dist", f"cannot parse {text!r}: {exc}") from None
    validate_dist(dist)
    return dist


def sample(dist: DistSpec, shape: Sequence[int], rng: RngStream) -> Tensor:
    validate_dist(dist)
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise InvalidParameterError("shape", f"extents must be positive, got {shape}")
    n = math.prod(shape)
    g = rng.generator
    if isinstance(dist, Normal):
        x = dist.mu + dist.sigma * g.standard_normal(n)
    elif isinstance(dist, Uniform):
        x = g.uniform(dist.a, dist.b, n)
    elif isinstance(dist, Laplace):
        x = g.laplace(dist.mu, dist.b, n)
    else:
        x = g.standard_normal(n)
        n_out = int(round(dist.p_out * n))
        if n_out:
            idx = g.choice(n, size=n_out, replace=False)
            x[idx] *= dist.scale_out
    return Tensor(x.astype(np.float32).reshape(shape))


# ---------------------------------------------------------------------------
# QTNS container

QTNS_MAGIC = b"QTNS"
QTNS_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIBBH")


def encode_shape_header(shape: Sequence[int]) -> bytes:
    ndim = len(shape)
    if not 1 <= ndim <= 8:
        raise InvalidParameterError("ndim", f"must be in 1..8, got {ndim}")
    return struct.pack("<BBH", DTYPE_F32, ndim, 0) + struct.pack(f"<{ndim}Q", *shape)


def decode_shape_header(buf: bytes, offset: int) -> tuple[tuple[int, ...], int]:
    if len(buf) < offset + 4:
        raise TruncatedFileError("header")
    dtype, ndim, reserved = struct.unpack_from("<BBH", buf, offset)
    offset += 4
    if dtype != DTYPE_F32:
        raise BadHeaderError(f"unsupported dtype code {dtype}")
    if not 1 <= ndim <= 8:
        raise BadHeaderError(f"ndim must be in 1..8, got {ndim}")
    if reserved != 0:
        raise BadHeaderError(f"reserved field must be 0, got {reserved}")
    if len(buf) < offset + 8 * ndim:
        raise TruncatedFileError("shape")
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    if any(s == 0 for s in shape):
        raise BadHeaderError(f"zero extent in shape {shape}")
    return tuple(shape), offset + 8 * ndim


def encode_tensor(t: Tensor) -> bytes:
    head = struct.pack("<4sI", QTNS_MAGIC, QTNS_VERSION) + encode_shape_header(t.shape)
    return head + t.data.astype("<f4").tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 8:
        raise TruncatedFileError("header")
    magic, version = struct.unpack_from("<4sI", buf, 0)
    if magic != QTNS_MAGIC:
        raise BadMagicError(magic, QTNS_MAGIC)
    if version != QTNS_VERSION:
        raise BadVersionError(version, QTNS_VERSION)
    shape, offset = decode_shape_header(buf, 8)
    nbytes = 4 * math.prod(shape)
    if len(buf) < offset + nbytes:
        raise TruncatedFileError("payload")
    if len(buf) > offset + nbytes:
        raise BadHeaderError(f"{len(buf) - offset - nbytes} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=math.prod(shape), offset=offset)
    if not np.isfinite(data).all():
        raise NonFiniteError("non-finite value in payload")
    return Tensor(data.astype(np.float32).reshape(shape))


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_tensor(path: Union[str, Path], t: TensorLike) -> None:
    atomic_write_bytes(path, encode_tensor(as_tensor(t)))


def read_tensor(path: Union[str, Path]) -> Tensor:
    return decode_tensor(Path(path).read_bytes())
