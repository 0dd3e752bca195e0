"""MMD and the composite context metrics built on it."""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .core import DomainError

DEGENERATE_EPS = 1e-6


@dataclass(frozen=True)
class MmdResult:
    value: float
    n_x: int
    n_y: int
    bandwidth: float
    flag: str | None = None


def _as_matrix(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DomainError("expected a nonempty set of vectors")
    return arr


def median_bandwidth(z: np.ndarray) -> float:
    """Median pairwise distance; falls back to the median nonzero distance."""
    d = pdist(z)
    if d.size == 0:
        return 0.0
    med = float(np.median(d))
    if med > 0:
        return med
    nz = d[d > 0]
    return float(np.median(nz)) if nz.size else 0.0


def _kmean(a, b, gamma):
    return math.fsum(np.exp(-gamma * cdist(a, b, "sqeuclidean")).ravel()) / (len(a) * len(b))


def mmd(x, y, bandwidth: float | None = None) -> MmdResult:
    """Biased (V-statistic) squared MMD with an RBF kernel, clamped at zero.

    The default bandwidth is the median pairwise distance over the union.
    """
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape[1] != y.shape[1]:
        raise DomainError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.vstack([x, y]))
        if bandwidth == 0.0:
            return MmdResult(0.0, len(x), len(y), 0.0, "zero_bandwidth")
    elif not bandwidth > 0:
        raise DomainError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * bandwidth ** 2)
    # fsum is correctly rounded, so swapping x and y gives the same bits.
    kxx = _kmean(x, x, gamma)
    kyy = _kmean(y, y, gamma)
    kxy = _kmean(x, y, gamma)
    return MmdResult(float(max(kxx + kyy - 2.0 * kxy, 0.0)), len(x), len(y), float(bandwidth))


def _fb(features) -> tuple[np.ndarray, np.ndarray]:
    """(fg, bg) matrices from a FeatureSet-like object or a list of records."""
    if hasattr(features, "f") and hasattr(features, "b"):
        return _as_matrix(features.f), _as_matrix(features.b)
    recs = list(features)
    if not recs:
        raise DomainError("empty feature partition")
    return (_as_matrix([r.X_f_avg for r in recs]), _as_matrix([r.X_b_avg for r in recs]))


def context_mmds(f_a, f_na, bandwidth: float | None = None) -> dict[str, float]:
    """Within- and cross-context MMDs between non-associated and associated sets."""
    na_f, na_b = _fb(f_na)
    a_f, a_b = _fb(f_a)
    return {
        "f2f": mmd(na_f, a_f, bandwidth).value,
        "f2b": mmd(na_f, a_b, bandwidth).value,
        "b2f": mmd(na_b, a_f, bandwidth).value,
        "b2b": mmd(na_b, a_b, bandwidth).value,
    }


@dataclass
class DomainGradient:
    drop_rate: float
    mmds: dict[str, float]
    denominator: float
    value: float | None
    degenerate: bool
    negative_denominator: bool


@dataclass
class GradientResult:
    pair: tuple[str, str]
    source: DomainGradient | None
    target: DomainGradient | None
    flags: list[str] = field(default_factory=list)

    @property
    def gradient_S(self) -> float | None:
        return self.source.value if self.source else None

    @property
    def gradient_T(self) -> float | None:
        return self.target.value if self.target else None


def association_gradient(drop_rate: float, mmds: dict[str, float],
                         eps: float = DEGENERATE_EPS) -> DomainGradient:
    """Drop rate per unit of (cross-context minus within-context) MMD."""
    if not 0.0 <= drop_rate <= 1.0:
        raise DomainError(f"drop rate {drop_rate} outside [0, 1]")
    denom = mmds["f2b"] + mmds["b2f"] - mmds["f2f"] - mmds["b2b"]
    if abs(denom) < eps:
        return DomainGradient(drop_rate, dict(mmds), denom, None, True, False)
    return DomainGradient(drop_rate, dict(mmds), denom, drop_rate / denom, False, denom < 0)


def cross_domain_sums(fa_s, fa_t, fna_s, fna_t, bandwidth: float | None = None) -> dict[str, Any]:
    """``f2b + b2f`` across domains, for associated and for non-associated sets."""
    as_f, as_b = _fb(fa_s)
    at_f, at_b = _fb(fa_t)
    ns_f, ns_b = _fb(fna_s)
    nt_f, nt_b = _fb(fna_t)
    f2b_a = mmd(as_f, at_b, bandwidth).value
    b2f_a = mmd(as_b, at_f, bandwidth).value
    f2b_na = mmd(ns_f, nt_b, bandwidth).value
    b2f_na = mmd(ns_b, nt_f, bandwidth).value
    return {"sum_aa": f2b_a + b2f_a, "sum_nana": f2b_na + b2f_na,
            "f2b_asso": f2b_a, "b2f_asso": b2f_a, "f2b_no_asso": f2b_na, "b2f_no_asso": b2f_na}
