"""Artificial perturbation families with intensity matched to quantization noise.

Sign convention follows the additive noise view ``x = x_tilde + delta``:
a perturbation ``delta`` produces the perturbed tensor ``x - delta``
(see :func:`apply_perturbation`). Quantization noise is
``t - fake_quant(t)``; the clipping perturbation is ``t - clipped(t)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from qlens.errors import DegeneratePerturbationError, InvalidParameterError
from qlens.quant import QuantScheme, quant_perturbation
from qlens.tensor import RngStream, Tensor, TensorLike, as_tensor, l2


@dataclass(frozen=True)
class Gaussian:
    pass


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class Rademacher:
    pass


@dataclass(frozen=True)
class MagPos:
    """``|delta_i|`` proportional to ``|t_i|``, Rademacher signs."""


@dataclass(frozen=True)
class MagNeg:
    """``|delta_i|`` proportional to ``1 / (|t_i| + eps)`` with ``eps = eps_rel * absmax(t)``."""

    eps_rel: float = 1e-3

    def __post_init__(self):
        if not self.eps_rel > 0:
            raise InvalidParameterError("eps_rel", f"must be > 0, got {self.eps_rel}")


@dataclass(frozen=True)
class Clip:
    """Clip to the band ``mean +- k * std`` (upper side only when ``two_sided`` is False)."""

    k: float = 3.0
    two_sided: bool = True

    def __post_init__(self):
        if not self.k > 0:
            raise InvalidParameterError("k", f"must be > 0, got {self.k}")


PerturbKind = Union[Gaussian, Uniform, Rademacher, MagPos, MagNeg, Clip]

KIND_NAMES = {
    Gaussian: "gaussian",
    Uniform: "uniform",
    Rademacher: "rademacher",
    MagPos: "mag-pos",
    MagNeg: "mag-neg",
    Clip: "clip",
}


def kind_name(kind: PerturbKind) -> str:
    name = KIND_NAMES[type(kind)]
    if isinstance(kind, Clip):
        return f"clip:{kind.k:g}" + ("" if kind.two_sided else ":upper")
    if isinstance(kind, MagNeg) and kind.eps_rel != 1e-3:
        return f"mag-neg:{kind.eps_rel:g}"
    return name


def parse_kind(text: str) -> PerturbKind:
    parts = text.strip().lower().split(":")
    name = parts[0]
    try:
        if name == "gaussian" and len(parts) == 1:
            return Gaussian()
        if name == "uniform" and len(parts) == 1:
            return Uniform()
        if name == "rademacher" and len(parts) == 1:
            return Rademacher()
        if name in ("mag-pos", "magpos") and len(parts) == 1:
            return MagPos()
        if name in ("mag-neg", "magneg") and len(parts) <= 2:
            return MagNeg(float(parts[1])) if len(parts) == 2 else MagNeg()
        if name == "clip" and len(parts) <= 3:
            k = float(parts[1]) if len(parts) >= 2 else 3.0
            if len(parts) == 3 and parts[2] not in ("upper", "two-sided"):
                raise ValueError(parts[2])
            return Clip(k, two_sided=len(parts) < 3 or parts[2] == "two-sided")
    except ValueError:
        pass
    raise InvalidParameterError("kind", f"unknown perturbation kind {text!r}")


@dataclass(frozen=True)
class MatchQuantL2:
    scheme: QuantScheme = field(default_factory=QuantScheme)


@dataclass(frozen=True)
class MatchQuantVariance:
    scheme: QuantScheme = field(default_factory=QuantScheme)


@dataclass(frozen=True)
class FixedL2:
    target: float

    def __post_init__(self):
        if not (math.isfinite(self.target) and self.target >= 0):
            raise InvalidParameterError("target", f"must be finite and >= 0, got {self.target}")


Intensity = Union[MatchQuantL2, MatchQuantVariance, FixedL2]


@dataclass(frozen=True)
class PerturbSpec:
    kind: PerturbKind
    intensity: Intensity = field(default_factory=MatchQuantL2)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kind, Clip) and self.intensity != MatchQuantL2():
            warnings.warn("Clip perturbations are never rescaled; the intensity field is ignored", stacklevel=3)


def apply_perturbation(t: TensorLike, delta: TensorLike) -> Tensor:
    t, delta = as_tensor(t), as_tensor(delta)
    return Tensor(t.data - delta.data)


def band(t: TensorLike, k: float) -> tuple[float, float]:
    """``(mean - k*std, mean + k*std)`` with population std, float64."""
    x = as_tensor(t).data.astype(np.float64)
    mu = float(x.mean())
    sigma = float(x.std())
    return mu - k * sigma, mu + k * sigma


def clipped(t: TensorLike, k: float, two_sided: bool = True, bounds: Optional[tuple[float, float]] = None) -> Tensor:
    """Cap values outside the band to its nearer edge.

    ``bounds`` freezes the band (e.g. from an earlier tensor); by default it
    is computed from ``t`` itself.
    """
    t = as_tensor(t)
    lo, hi = bounds if bounds is not None else band(t, k)
    x = t.data.astype(np.float64)
    y = np.minimum(x, hi)
    if two_sided:
        y = np.maximum(y, lo)
    return Tensor(y.astype(np.float32))


def clip_fraction(t: TensorLike, k: float, two_sided: bool = True) -> float:
    """Fraction of elements strictly outside ``mean +- k*std``."""
    if not k > 0:
        raise InvalidParameterError("k", f"must be > 0, got {k}")
    t = as_tensor(t)
    lo, hi = band(t, k)
    x = t.data.astype(np.float64)
    out = x > hi
    if two_sided:
        out |= x < lo
    return float(out.sum()) / x.size


def match_intensity(delta: TensorLike, target_l2: float) -> Tensor:
    """Rescale ``delta`` so its L2 norm equals ``target_l2``."""
    delta = as_tensor(delta)
    if not target_l2 >= 0:
        raise InvalidParameterError("target_l2", f"must be >= 0, got {target_l2}")
    if target_l2 == 0:
        return Tensor.zeros(delta.shape)
    norm = l2(delta)
    if norm == 0:
        raise DegeneratePerturbationError()
    return Tensor((delta.data.astype(np.float64) * (target_l2 / norm)).astype(np.float32))


def native_intensity(t: TensorLike, scheme: QuantScheme, variance: bool = False) -> float:
    """L2 norm (or population variance) of the quantization noise of ``t``."""
    delta = quant_perturbation(t, scheme)
    if variance:
        return float(delta.data.astype(np.float64).var())
    return l2(delta)


def raw_draw(t: Tensor, kind: PerturbKind, rng: RngStream) -> np.ndarray:
    """Unscaled float64 draw for the stochastic kinds."""
    n = t.shape
    if isinstance(kind, Gaussian):
        return rng.normal(n)
    if isinstance(kind, Uniform):
        return rng.uniform(-1.0, 1.0, n)
    if isinstance(kind, Rademacher):
        return rng.rademacher(n)
    x = np.abs(t.data.astype(np.float64))
    signs = rng.rademacher(n)
    if isinstance(kind, MagPos):
        return signs * x
    if isinstance(kind, MagNeg):
        amax = float(x.max())
        eps = kind.eps_rel * amax if amax > 0 else kind.eps_rel
        return signs / (x + eps)
    raise InvalidParameterError("kind", f"no stochastic draw for {kind!r}")


def gen_perturbation(t: TensorLike, spec: PerturbSpec, rng: Optional[RngStream] = None) -> Tensor:
    """Draw ``delta`` for ``t``; the perturbed tensor is ``t - delta``.

    ``rng`` defaults to a fresh stream seeded with ``spec.seed``.
    """
    t = as_tensor(t)
    kind = spec.kind
    if isinstance(kind, Clip):
        return Tensor(t.data - clipped(t, kind.k, kind.two_sided).data)
    rng = rng if rng is not None else RngStream(spec.seed)
    intensity = spec.intensity
    if isinstance(intensity, FixedL2) and intensity.target == 0:
        return Tensor.zeros(t.shape)
    raw = raw_draw(t, kind, rng)
    if isinstance(intensity, MatchQuantVariance):
        target_var = native_intensity(t, intensity.scheme, variance=True)
        if target_var == 0:
            return Tensor.zeros(t.shape)
        raw_var = float(raw.var())
        if raw_var == 0:
            raise DegeneratePerturbationError()
        return Tensor((raw * math.sqrt(target_var / raw_var)).astype(np.float32))
    if isinstance(intensity, MatchQuantL2):
        target = native_intensity(t, intensity.scheme)
    else:
        target = intensity.target
    if target == 0:
        return Tensor.zeros(t.shape)
    norm = float(np.sqrt(np.dot(raw.ravel(), raw.ravel())))
    if norm == 0:
        raise DegeneratePerturbationError()
    return Tensor((raw * (target / norm)).astype(np.float32))
