"""Damage measures: magnitude-bucketed error, rank correlation, logit KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from qlens.errors import InvalidParameterError, QlensError, ShapeMismatchError
from qlens.tensor import TensorLike, as_tensor


class UndefinedCorrelationError(QlensError, ValueError):
    def __init__(self):
        super().__init__("rank correlation undefined for constant input")


@dataclass(frozen=True)
class Bucket:
    lo: float
    hi: float
    count: int
    mean_abs_delta: float
    mean_rel_error: float
    max_abs_delta: float


@dataclass(frozen=True)
class BucketReport:
    edges: tuple[float, ...]
    buckets: tuple[Bucket, ...]

    @property
    def counts(self) -> list[int]:
        return [b.count for b in self.buckets]

    @property
    def means(self) -> list[float]:
        return [b.mean_abs_delta for b in self.buckets]


def bucketed_error(x: TensorLike, delta: TensorLike, n_buckets: int = 10) -> BucketReport:
    """Equal-count buckets over ``|x|`` (stable sort by value, then index).

    When ``n`` is not a multiple of ``n_buckets`` the first ``n % n_buckets``
    buckets hold one extra element. Relative error uses the floor
    ``1e-8 * absmax(x)``.
    """
    x, delta = as_tensor(x), as_tensor(delta)
    if x.shape != delta.shape:
        raise ShapeMismatchError(x.shape, delta.shape)
    if n_buckets < 2:
        raise InvalidParameterError("n_buckets", f"must be >= 2, got {n_buckets}")
    mag = np.abs(x.data.astype(np.float64)).ravel()
    err = np.abs(delta.data.astype(np.float64)).ravel()
    n = mag.size
    if n < n_buckets:
        raise InvalidParameterError("n_buckets", f"{n_buckets} buckets for only {n} elements")
    order = np.argsort(mag, kind="stable")
    mag, err = mag[order], err[order]
    floor = 1e-8 * float(mag[-1]) if mag[-1] > 0 else 1e-30
    sizes = np.full(n_buckets, n // n_buckets)
    sizes[: n % n_buckets] += 1
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    buckets = []
    edges = [float(mag[0])]
    for i in range(n_buckets):
        a, b = bounds[i], bounds[i + 1]
        m, e = mag[a:b], err[a:b]
        buckets.append(
            Bucket(
                lo=float(m[0]),
                hi=float(m[-1]),
                count=int(b - a),
                mean_abs_delta=float(e.mean()),
                mean_rel_error=float(np.mean(e / (m + floor))),
                max_abs_delta=float(e.max()),
            )
        )
        edges.append(float(m[-1]))
    return BucketReport(tuple(edges), tuple(buckets))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.concatenate([[True], sv[1:] != sv[:-1]]))
    ends = np.concatenate([starts[1:], [v.size]])
    avg = (starts + ends - 1) / 2.0 + 1.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def spearman(a: TensorLike, b: TensorLike) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(as_tensor(a).data, dtype=np.float64).ravel()
    b = np.asarray(as_tensor(b).data, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeMismatchError(a.shape, b.shape)
    if a.size < 2:
        raise InvalidParameterError("length", f"need at least 2 elements, got {a.size}")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if den == 0:
        raise UndefinedCorrelationError()
    return float(np.clip(np.dot(ra, rb) / den, -1.0, 1.0))


def kl_logits(p_logits, q_logits) -> float:
    """Mean over rows of KL(softmax(p) || softmax(q)); last axis is the class axis."""
    p = np.asarray(p_logits, dtype=np.float64)
    q = np.asarray(q_logits, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatchError(p.shape, q.shape)
    lp = log_softmax(p, axis=-1)
    lq = log_softmax(q, axis=-1)
    kl = np.sum(np.exp(lp) * (lp - lq), axis=-1)
    return float(max(kl.mean(), 0.0))


@dataclass(frozen=True)
class DegradationRow:
    setting: str
    metric: str
    baseline: float
    value: float
    seed: int

    @property
    def delta(self) -> float:
        return self.value - self.baseline
