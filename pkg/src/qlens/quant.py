"""Uniform and signed-power quantization, quantization noise, and scale sweeps.

Conventions
-----------
* Symmetric policies use step ``s = alpha / 2**(b-1)`` and zero-point
  ``z = 2**(b-1)``; codes live in ``[0, 2**b - 1]``. The ``+alpha`` endpoint
  therefore lands on code ``2**b`` and is clipped to ``2**b - 1``.
* Rounding is round-half-to-even.
* Every step is rounded *up* to a 15-bit mantissa before use. With at most
  9-bit integer offsets this makes every grid value ``(code - z) * s``
  exactly representable in float32, so dequantization introduces no extra
  rounding on top of the quantizer's own.
* Scale policies are evaluated on the transformed tensor when a
  ``SignedPower`` transform is configured.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from qlens.errors import BadHeaderError, BadMagicError, BadVersionError, InvalidParameterError, TruncatedFileError
from qlens.tensor import (
    Tensor,
    TensorLike,
    as_tensor,
    atomic_write_bytes,
    decode_shape_header,
    encode_shape_header,
    l2,
)

STEP_MANTISSA_BITS = 15


# ---------------------------------------------------------------------------
# scheme


@dataclass(frozen=True)
class AbsmaxSymmetric:
    pass


@dataclass(frozen=True)
class MinMaxAsymmetric:
    pass


@dataclass(frozen=True)
class Fixed:
    alpha: float


@dataclass(frozen=True)
class PerTensor:
    pass


@dataclass(frozen=True)
class PerChannel:
    axis: int = 0


@dataclass(frozen=True)
class PerGroup:
    axis: int
    group_size: int


@dataclass(frozen=True)
class Identity:
    def forward(self, x: np.ndarray) -> np.ndarray:
        return x

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y


@dataclass(frozen=True)
class SignedPower:
    """``y = sign(x) * |x|**p`` with inverse ``x = sign(y) * |y|**(1/p)``."""

    exponent: float = 1.0 / 3.0

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.exponent == 1.0 / 3.0:
            return np.cbrt(x)
        return np.sign(x) * np.abs(x) ** self.exponent

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if self.exponent == 1.0 / 3.0:
            return y * y * y
        return np.sign(y) * np.abs(y) ** (1.0 / self.exponent)


ScalePolicy = Union[AbsmaxSymmetric, MinMaxAsymmetric, Fixed]
Granularity = Union[PerTensor, PerChannel, PerGroup]
Transform = Union[Identity, SignedPower]


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 8
    policy: ScalePolicy = field(default_factory=AbsmaxSymmetric)
    granularity: Granularity = field(default_factory=PerTensor)
    transform: Transform = field(default_factory=Identity)

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 8:
            raise InvalidParameterError("bits", f"must be an integer in [2, 8], got {self.bits!r}")
        if isinstance(self.policy, Fixed):
            if not (math.isfinite(self.policy.alpha) and self.policy.alpha > 0):
                raise InvalidParameterError("alpha", f"fixed scale must be positive, got {self.policy.alpha}")
        elif not isinstance(self.policy, (AbsmaxSymmetric, MinMaxAsymmetric)):
            raise InvalidParameterError("policy", f"unknown scale policy {self.policy!r}")
        if isinstance(self.granularity, PerGroup):
            if self.granularity.group_size < 2:
                raise InvalidParameterError("group_size", f"must be >= 2, got {self.granularity.group_size}")
        elif not isinstance(self.granularity, (PerTensor, PerChannel)):
            raise InvalidParameterError("granularity", f"unknown granularity {self.granularity!r}")
        if isinstance(self.transform, SignedPower):
            if not 0.0 < self.transform.exponent <= 1.0:
                raise InvalidParameterError("exponent", f"must be in (0, 1], got {self.transform.exponent}")
        elif not isinstance(self.transform, Identity):
            raise InvalidParameterError("transform", f"unknown transform {self.transform!r}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def symmetric_zero_point(self) -> int:
        return 1 << (self.bits - 1)

    def with_policy(self, policy: ScalePolicy) -> "QuantScheme":
        return QuantScheme(self.bits, policy, self.granularity, self.transform)

    def describe(self) -> str:
        return f"b{self.bits}/{format_policy(self.policy)}/{format_granularity(self.granularity)}/{format_transform(self.transform)}"


def parse_policy(text: str) -> ScalePolicy:
    name, _, arg = text.strip().lower().partition(":")
    if name in ("absmax", "symmetric", "absmax-symmetric"):
        return AbsmaxSymmetric()
    if name in ("minmax", "asymmetric", "minmax-asymmetric"):
        return MinMaxAsymmetric()
    if name == "fixed":
        try:
            return Fixed(float(arg))
        except ValueError:
            raise InvalidParameterError("policy", f"fixed policy needs a numeric alpha, got {text!r}") from None
    raise InvalidParameterError("policy", f"unknown scale policy {text!r}")


def format_policy(p: ScalePolicy) -> str:
    if isinstance(p, Fixed):
        return f"fixed:{p.alpha:.9g}"
    return "absmax" if isinstance(p, AbsmaxSymmetric) else "minmax"


def parse_granularity(text: str) -> Granularity:
    parts = text.strip().lower().split(":")
    try:
        if parts[0] == "per-tensor" and len(parts) == 1:
            return PerTensor()
        if parts[0] == "per-channel" and len(parts) <= 2:
            return PerChannel(int(parts[1]) if len(parts) == 2 else 0)
        if parts[0] == "per-group" and len(parts) == 3:
            return PerGroup(int(parts[1]), int(parts[2]))
    except ValueError:
        pass
    raise InvalidParameterError("granularity", f"expected per-tensor | per-channel:AXIS | per-group:AXIS:SIZE, got {text!r}")


def format_granularity(g: Granularity) -> str:
    if isinstance(g, PerChannel):
        return f"per-channel:{g.axis}"
    if isinstance(g, PerGroup):
        return f"per-group:{g.axis}:{g.group_size}"
    return "per-tensor"


def parse_transform(text: str) -> Transform:
    name, _, arg = text.strip().lower().partition(":")
    if name in ("identity", "uniform", "none"):
        return Identity()
    if name in ("signed-power", "signedpower", "cbrt", "non-uniform", "nonuniform"):
        if not arg:
            return SignedPower()
        try:
            num, _, den = arg.partition("/")
            return SignedPower(float(num) / float(den) if den else float(num))
        except ValueError:
            raise InvalidParameterError("transform", f"bad exponent in {text!r}") from None
    raise InvalidParameterError("transform", f"unknown transform {text!r}")


def format_transform(t: Transform) -> str:
    if isinstance(t, SignedPower):
        return "signed-power" if t.exponent == 1.0 / 3.0 else f"signed-power:{t.exponent:.9g}"
    return "identity"


# ---------------------------------------------------------------------------
# grouping


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise InvalidParameterError("axis", f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _to_groups(x: np.ndarray, gran: Granularity) -> np.ndarray:
    """Reshape to ``(n_groups, group_elems)``.

    Group order: PerChannel -> channel index; PerGroup -> row-major over the
    remaining axes, then group index along ``axis``.
    """
    if isinstance(gran, PerTensor):
        return x.reshape(1, -1)
    axis = _normalize_axis(gran.axis, x.ndim)
    if isinstance(gran, PerChannel):
        return np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)
    extent = x.shape[axis]
    if extent % gran.group_size:
        raise InvalidParameterError(
            "group_size", f"group size {gran.group_size} does not divide extent {extent} along axis {axis}"
        )
    return np.moveaxis(x, axis, -1).reshape(-1, gran.group_size)


def _from_groups(g: np.ndarray, gran: Granularity, shape: tuple[int, ...]) -> np.ndarray:
    if isinstance(gran, PerTensor):
        return g.reshape(shape)
    axis = _normalize_axis(gran.axis, len(shape))
    if isinstance(gran, PerChannel):
        moved = (shape[axis],) + shape[:axis] + shape[axis + 1 :]
        return np.moveaxis(g.reshape(moved), 0, axis)
    moved = shape[:axis] + shape[axis + 1 :] + (shape[axis],)
    return np.moveaxis(g.reshape(moved), -1, axis)


def round_step_up(s: np.ndarray) -> np.ndarray:
    """Round positive steps up to ``STEP_MANTISSA_BITS`` significant bits (as float32).

    Steps are floored at the smallest normal float32 so subnormal inputs never
    produce a zero step.
    """
    s = np.maximum(np.asarray(s, dtype=np.float64), float(np.finfo(np.float32).tiny))
    m, e = np.frexp(s)
    m = np.ceil(m * (1 << STEP_MANTISSA_BITS)) / (1 << STEP_MANTISSA_BITS)
    return np.ldexp(m, e).astype(np.float32)


def _group_params(y: np.ndarray, scheme: QuantScheme) -> tuple[np.ndarray, np.ndarray]:
    """Per-group (step, zero_point) for grouped transformed values ``y``."""
    n_groups = y.shape[0]
    half = float(scheme.symmetric_zero_point)
    policy = scheme.policy
    if isinstance(policy, Fixed):
        s = np.full(n_groups, policy.alpha / half)
        z = np.full(n_groups, scheme.symmetric_zero_point, dtype=np.int64)
    elif isinstance(policy, AbsmaxSymmetric):
        amax = np.abs(y).max(axis=1)
        s = np.where(amax > 0, amax / half, 1.0)
        z = np.full(n_groups, scheme.symmetric_zero_point, dtype=np.int64)
    else:
        lo = np.minimum(y.min(axis=1), 0.0)
        hi = np.maximum(y.max(axis=1), 0.0)
        span = hi - lo
        s = np.where(span > 0, span / scheme.qmax, 1.0)
        s = round_step_up(s).astype(np.float64)
        z = np.clip(np.rint(-lo / s), 0, scheme.qmax).astype(np.int64)
        return s.astype(np.float32), z
    return round_step_up(s), z


# ---------------------------------------------------------------------------
# quantized tensor


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray  # uint8, source shape
    scales: np.ndarray  # float32, one per group
    zero_points: np.ndarray  # int64, one per group
    scheme: QuantScheme
    source_shape: tuple[int, ...]

    def __post_init__(self):
        if self.codes.shape != tuple(self.source_shape):
            raise InvalidParameterError("codes", f"shape {self.codes.shape} != source shape {self.source_shape}")
        if self.codes.dtype != np.uint8:
            raise InvalidParameterError("codes", f"expected uint8 codes, got {self.codes.dtype}")
        if int(self.codes.max(initial=0)) > self.scheme.qmax:
            raise InvalidParameterError("codes", f"code above 2^b - 1 = {self.scheme.qmax}")
        if self.scales.shape != self.zero_points.shape:
            raise InvalidParameterError("scales", "scales and zero_points differ in length")
        if not (np.isfinite(self.scales).all() and (self.scales > 0).all()):
            raise InvalidParameterError("scales", "every scale must be finite and positive")
        if ((self.zero_points < 0) | (self.zero_points > (1 << self.scheme.bits))).any():
            raise InvalidParameterError("zero_points", "zero point outside [0, 2^b]")
        for arr in (self.codes, self.scales, self.zero_points):
            arr.flags.writeable = False

    @property
    def n_groups(self) -> int:
        return self.scales.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.scheme == other.scheme
            and self.source_shape == other.source_shape
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scales, other.scales)
            and np.array_equal(self.zero_points, other.zero_points)
        )


@dataclass(frozen=True)
class QuantStats:
    """Side information from a quantization pass."""

    n_clipped: int
    count: int

    @property
    def clip_fraction(self) -> float:
        return self.n_clipped / self.count


def quantize_with_stats(t: TensorLike, scheme: QuantScheme) -> tuple[QuantizedTensor, QuantStats]:
    t = as_tensor(t)
    y = scheme.transform.forward(t.data.astype(np.float64))
    g = _to_groups(y, scheme.granularity)
    s, z = _group_params(g, scheme)
    pre = np.rint(g / s.astype(np.float64)[:, None]) + z[:, None]
    clipped = (pre < 0) | (pre > scheme.qmax)
    codes = np.clip(pre, 0, scheme.qmax).astype(np.uint8)
    q = QuantizedTensor(
        codes=np.ascontiguousarray(_from_groups(codes, scheme.granularity, t.shape)),
        scales=s,
        zero_points=z,
        scheme=scheme,
        source_shape=t.shape,
    )
    return q, QuantStats(int(clipped.sum()), t.size)


def quantize(t: TensorLike, scheme: QuantScheme) -> QuantizedTensor:
    return quantize_with_stats(t, scheme)[0]


def dequantize(q: QuantizedTensor) -> Tensor:
    g = _to_groups(q.codes, q.scheme.granularity).astype(np.float64)
    y = (g - q.zero_points[:, None]) * q.scales.astype(np.float64)[:, None]
    x = q.scheme.transform.inverse(_from_groups(y, q.scheme.granularity, q.source_shape))
    return Tensor(x.astype(np.float32))


def fake_quant(t: TensorLike, scheme: QuantScheme) -> Tensor:
    return dequantize(quantize(t, scheme))


def quant_perturbation(t: TensorLike, scheme: QuantScheme) -> Tensor:
    """Quantization noise ``t - fake_quant(t)`` in float32."""
    t = as_tensor(t)
    return Tensor(t.data - fake_quant(t, scheme).data)


def grid_values(scheme: QuantScheme, step: float, zero_point: int | None = None) -> np.ndarray:
    """All ``2**b`` dequantized values of one group, in code order."""
    z = scheme.symmetric_zero_point if zero_point is None else zero_point
    codes = np.arange(scheme.qmax + 1, dtype=np.float64)
    return scheme.transform.inverse((codes - z) * float(step)).astype(np.float32)


# ---------------------------------------------------------------------------
# scale sweep


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    l2_delta: float
    clip_fraction: float


def scale_sweep(t: TensorLike, scheme_base: QuantScheme, alphas: Sequence[float]) -> list[SweepRow]:
    """Quantization noise intensity and clip fraction at each fixed scale ``alpha``."""
    if len(alphas) == 0:
        raise InvalidParameterError("alphas", "empty alpha list")
    alphas = [float(a) for a in alphas]
    if any(b < a for a, b in zip(alphas, alphas[1:])):
        raise InvalidParameterError("alphas", "must be sorted ascending")
    t = as_tensor(t)
    rows = []
    for a in alphas:
        scheme = scheme_base.with_policy(Fixed(a))
        q, st = quantize_with_stats(t, scheme)
        delta = t.data - dequantize(q).data
        rows.append(SweepRow(a, l2(delta), st.clip_fraction))
    return rows


def reference_absmax(t: TensorLike, scheme: QuantScheme) -> float:
    """``max|f(t)|``: the zero-shot scale in the scheme's quantization space."""
    y = scheme.transform.forward(as_tensor(t).data.astype(np.float64))
    return float(np.abs(y).max())


def resolve_alpha(token: Union[str, float], t: TensorLike, scheme: QuantScheme) -> float:
    """``"2x"`` -> ``2 * absmax``; plain numbers are absolute."""
    if isinstance(token, str):
        tok = token.strip().lower()
        try:
            if tok.endswith("x"):
                return float(tok[:-1]) * reference_absmax(t, scheme)
            return float(tok)
        except ValueError:
            raise InvalidParameterError("alphas", f"cannot parse alpha {token!r}") from None
    return float(token)


# ---------------------------------------------------------------------------
# QTNQ container

QTNQ_MAGIC = b"QTNQ"
QTNQ_VERSION = 1
_POLICY_CODES = {AbsmaxSymmetric: 0, MinMaxAsymmetric: 1, Fixed: 2}
_GRAN_CODES = {PerTensor: 0, PerChannel: 1, PerGroup: 2}


def encode_quantized(q: QuantizedTensor) -> bytes:
    sch = q.scheme
    out = bytearray(struct.pack("<4sIB", QTNQ_MAGIC, QTNQ_VERSION, sch.bits))
    out += struct.pack("<B", _POLICY_CODES[type(sch.policy)])
    if isinstance(sch.policy, Fixed):
        out += struct.pack("<d", sch.policy.alpha)
    gran = sch.granularity
    out += struct.pack("<B", _GRAN_CODES[type(gran)])
    if isinstance(gran, PerChannel):
        out += struct.pack("<B", _normalize_axis(gran.axis, len(q.source_shape)))
    elif isinstance(gran, PerGroup):
        out += struct.pack("<BI", _normalize_axis(gran.axis, len(q.source_shape)), gran.group_size)
    if isinstance(sch.transform, SignedPower):
        out += struct.pack("<Bd", 1, sch.transform.exponent)
    else:
        out += struct.pack("<Bd", 0, 1.0)
    out += struct.pack("<Q", q.n_groups)
    rec = np.zeros(q.n_groups, dtype=[("s", "<f4"), ("z", "<u2")])
    rec["s"] = q.scales
    rec["z"] = q.zero_points
    out += rec.tobytes()
    out += encode_shape_header(q.source_shape)
    out += q.codes.astype(np.uint8).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise TruncatedFileError(what)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]


def decode_quantized(buf: bytes) -> QuantizedTensor:
    r = _Reader(buf)
    if len(buf) < 8:
        raise TruncatedFileError("header")
    magic, version = r.take("<4sI", "header")
    if magic != QTNQ_MAGIC:
        raise BadMagicError(magic, QTNQ_MAGIC)
    if version != QTNQ_VERSION:
        raise BadVersionError(version, QTNQ_VERSION)
    bits = r.take("<B", "header")
    pcode = r.take("<B", "header")
    if pcode == 0:
        policy = AbsmaxSymmetric()
    elif pcode == 1:
        policy = MinMaxAsymmetric()
    elif pcode == 2:
        policy = Fixed(r.take("<d", "header"))
    else:
        raise BadHeaderError(f"unknown scale policy code {pcode}")
    gcode = r.take("<B", "header")
    if gcode == 0:
        gran = PerTensor()
    elif gcode == 1:
        gran = PerChannel(r.take("<B", "header"))
    elif gcode == 2:
        axis, gs = r.take("<BI", "header")
        gran = PerGroup(axis, gs)
    else:
        raise BadHeaderError(f"unknown granularity code {gcode}")
    tcode, expo = r.take("<Bd", "header")
    if tcode == 0:
        transform = Identity()
    elif tcode == 1:
        transform = SignedPower(expo)
    else:
        raise BadHeaderError(f"unknown transform code {tcode}")
    try:
        scheme = QuantScheme(bits, policy, gran, transform)
    except InvalidParameterError as exc:
        raise BadHeaderError(str(exc)) from None
    n_groups = r.take("<Q", "header")
    rec_size = 6 * n_groups
    if r.pos + rec_size > len(buf):
        raise TruncatedFileError("group table")
    rec = np.frombuffer(buf, dtype=[("s", "<f4"), ("z", "<u2")], count=n_groups, offset=r.pos)
    r.pos += rec_size
    shape, r.pos = decode_shape_header(buf, r.pos)
    n = math.prod(shape)
    if r.pos + n > len(buf):
        raise TruncatedFileError("payload")
    if r.pos + n < len(buf):
        raise BadHeaderError("trailing bytes after payload")
    codes = np.frombuffer(buf, dtype=np.uint8, count=n, offset=r.pos).reshape(shape).copy()
    try:
        expected = _to_groups(codes, gran).shape[0]
    except InvalidParameterError as exc:
        raise BadHeaderError(str(exc)) from None
    if expected != n_groups:
        raise BadHeaderError(f"group count {n_groups} does not match shape {shape} ({expected} groups)")
    try:
        return QuantizedTensor(
            codes=codes,
            scales=rec["s"].astype(np.float32),
            zero_points=rec["z"].astype(np.int64),
            scheme=scheme,
            source_shape=tuple(shape),
        )
    except InvalidParameterError as exc:
        raise BadHeaderError(str(exc)) from None


def write_quantized(path: Union[str, Path], q: QuantizedTensor) -> None:
    atomic_write_bytes(path, encode_quantized(q))


def read_quantized(path: Union[str, Path]) -> QuantizedTensor:
    return decode_quantized(Path(path).read_bytes())
