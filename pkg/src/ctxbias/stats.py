"""Signed-rank, Shapiro-Wilk and paired t tests, and C1/C2/C3 labelling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats as sps
from scipy.stats import rankdata

EXACT_MAX_N = 12

SIGNIFICANT = "significant"
NOT_SIGNIFICANT = "not_significant"
INAPPLICABLE = "inapplicable"


@dataclass(frozen=True)
class TestResult:
    test: str
    statistic: float | None
    p_value: float | None
    n: int
    alpha: float
    decision: str
    note: str = ""

    @classmethod
    def inapplicable(cls, test: str, n: int, alpha: float, note: str) -> "TestResult":
        return cls(test, None, None, n, alpha, INAPPLICABLE, note)

    @classmethod
    def decide(cls, test: str, statistic: float, p: float, n: int, alpha: float,
               note: str = "") -> "TestResult":
        p = min(1.0, max(0.0, float(p)))
        return cls(test, float(statistic), p, n, alpha,
                   SIGNIFICANT if p < alpha else NOT_SIGNIFICANT, note)

    def to_json(self) -> dict:
        return {"test": self.test, "statistic": self.statistic, "p_value": self.p_value,
                "n": self.n, "alpha": self.alpha, "decision": self.decision, "note": self.note}


def _differences(a, b=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if b is None:
        return a.ravel()
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    return (a - b).ravel()


def signed_rank_distribution(ranks2: np.ndarray) -> np.ndarray:
    """Counts of each doubled positive-rank sum over all 2**n sign patterns."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_exact_p(d) -> Fraction:
    """Exact two-sided p-value as a rational number (zero differences dropped)."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("no nonzero differences")
    ranks2 = np.rint(2 * rankdata(np.abs(d))).astype(int)
    t_plus2 = int(ranks2[d > 0].sum())
    counts = signed_rank_distribution(ranks2)
    lower = int(sum(counts[: t_plus2 + 1]))
    upper = int(sum(counts[t_plus2:]))
    p = Fraction(2 * min(lower, upper), 2 ** n)
    return min(p, Fraction(1))


def wilcoxon_signed_rank(a, b=None, alpha: float = 0.05) -> TestResult:
    """Two-sided signed-rank test on paired samples (or on differences).

    Exact null distribution for up to 12 nonzero differences, otherwise the
    tie-corrected normal approximation with continuity correction.  The
    statistic is the positive-rank sum.
    """
    d = _differences(a, b)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return TestResult.inapplicable("wilcoxon", 0, alpha, "all differences are zero")
    ranks = rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        return TestResult.decide("wilcoxon", t_plus, float(wilcoxon_exact_p(d)), n, alpha, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = max(abs(t_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return TestResult.decide("wilcoxon", t_plus, 2 * sps.norm.sf(z), n, alpha, "normal")


# Royston (1992/1995) polynomial approximations.
_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)


def _poly(coef, x):
    return sum(c * x ** i for i, c in enumerate(coef))


def shapiro_coefficients(n: int) -> np.ndarray:
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    i = np.arange(1, n + 1)
    m = sps.norm.ppf((i - 0.375) / (n + 0.25))
    mm = float(np.sum(m ** 2))
    u = 1.0 / math.sqrt(n)
    a = np.empty(n)
    an = _poly(_C1, u) + m[-1] / math.sqrt(mm)
    if n > 5:
        an1 = _poly(_C2, u) + m[-2] / math.sqrt(mm)
        eps = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an ** 2 - 2 * an1 ** 2)
        a[2:-2] = m[2:-2] / math.sqrt(eps)
        a[-2], a[1] = an1, -an1
    else:
        eps = (mm - 2 * m[-1] ** 2) / (1 - 2 * an ** 2)
        a[1:-1] = m[1:-1] / math.sqrt(eps)
    a[-1], a[0] = an, -an
    return a


def shapiro_wilk(sample, alpha: float = 0.05) -> TestResult:
    """W statistic with Royston's p-value approximation; valid for 3 <= n <= 5000."""
    x = np.sort(np.asarray(sample, dtype=np.float64).ravel())
    n = x.size
    if n < 3:
        return TestResult.inapplicable("shapiro_wilk", n, alpha, "n < 3")
    if n > 5000:
        return TestResult.inapplicable("shapiro_wilk", n, alpha, "n > 5000")
    ss = float(np.sum((x - x.mean()) ** 2))
    if ss <= 0 or x[-1] - x[0] <= 0:
        return TestResult.inapplicable("shapiro_wilk", n, alpha, "zero variance")
    a = shapiro_coefficients(n)
    w = min(1.0, float(np.dot(a, x)) ** 2 / ss)
    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
    elif n <= 11:
        gamma = -2.273 + 0.459 * n
        mu = 0.5440 - 0.39978 * n + 0.025054 * n ** 2 - 0.0006714 * n ** 3
        sigma = math.exp(1.3822 - 0.77857 * n + 0.062767 * n ** 2 - 0.0020322 * n ** 3)
        inner = gamma - math.log1p(-w) if w < 1 else math.inf
        z = (-math.log(inner) - mu) / sigma if inner > 0 else math.inf
        p = float(sps.norm.sf(z))
    else:
        ln = math.log(n)
        mu = -1.5861 - 0.31082 * ln - 0.083751 * ln ** 2 + 0.0038915 * ln ** 3
        sigma = math.exp(-0.4803 - 0.082676 * ln + 0.0030302 * ln ** 2)
        z = (math.log1p(-w) - mu) / sigma if w < 1 else -math.inf
        p = float(sps.norm.sf(z))
    # A small W is evidence against normality, so "significant" means non-normal.
    return TestResult.decide("shapiro_wilk", w, p, n, alpha)


def paired_t_test(x, y, alpha: float = 0.05) -> TestResult:
    d = _differences(x, y)
    n = d.size
    if n < 2:
        return TestResult.inapplicable("paired_t", n, alpha, "n < 2")
    sd = float(np.std(d, ddof=1))
    if sd == 0:
        return TestResult.inapplicable("paired_t", n, alpha, "zero variance of differences")
    t = float(d.mean()) / (sd / math.sqrt(n))
    return TestResult.decide("paired_t", t, 2 * sps.t.sf(abs(t), n - 1), n, alpha)


def holm(p_values) -> list[float]:
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[i]))
        adjusted[i] = running
    return adjusted.tolist()


def stars(p: float | None) -> str:
    if p is None:
        return "-"
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


@dataclass(frozen=True)
class CaseLabel:
    pair: tuple[str, ...] | None
    case: str
    direction: str
    test: TestResult
    normality: tuple[TestResult, TestResult] | None = None

    def to_json(self) -> dict:
        return {"pair": list(self.pair) if self.pair else None, "case": self.case,
                "direction": self.direction, "test": self.test.to_json(),
                "normality": [t.to_json() for t in self.normality] if self.normality else None}


def classify_case(a, b, alpha: float = 0.05, force_test: str | None = None,
                  pair: tuple[str, ...] | None = None) -> CaseLabel:
    """C1 if ``a`` is significantly lower than ``b``, C2 if higher, else C3.

    Without ``force_test`` the paired t-test is used when both samples pass
    Shapiro-Wilk, and the signed-rank test otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be nonempty")
    normality = None
    if force_test is None:
        sa, sb = shapiro_wilk(a, alpha), shapiro_wilk(b, alpha)
        normality = (sa, sb)
        both_normal = all(s.decision == NOT_SIGNIFICANT for s in normality)
        force_test = "ttest" if both_normal else "wilcoxon"
    d = a - b
    if force_test == "ttest":
        res = paired_t_test(a, b, alpha)
        center = float(np.mean(d))
    elif force_test == "wilcoxon":
        res = wilcoxon_signed_rank(a, b, alpha)
        center = float(np.median(d))
        if center == 0 and res.statistic is not None:
            center = res.statistic - res.n * (res.n + 1) / 4.0
    else:
        raise ValueError(f"unknown test {force_test!r}")
    if res.decision == INAPPLICABLE:
        return CaseLabel(pair, "C3", f"inapplicable: {res.note}", res, normality)
    if res.decision == SIGNIFICANT and center < 0:
        return CaseLabel(pair, "C1", "first lower", res, normality)
    if res.decision == SIGNIFICANT and center > 0:
        return CaseLabel(pair, "C2", "first higher", res, normality)
    return CaseLabel(pair, "C3", "no significant difference", res, normality)
