"""Normality testing and the paired-significance pipeline for model comparisons.

The pipeline runs both normality tests on the paired differences: only when
neither rejects at the chosen level does it use a paired t-test, otherwise it
falls back to the Wilcoxon signed-rank test. Constant differences short-circuit
to a "not applicable" decision, since none of the tests are defined at zero
variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm as _norm
from scipy.stats import t as _student_t

__all__ = [
    "PairedSamples",
    "DecisionRecord",
    "shapiro_wilk",
    "ks_normality",
    "paired_t_test",
    "wilcoxon_signed_rank",
    "significance_pipeline",
]


class ZeroVarianceError(ValueError):
    """Raised when a test is applied to a constant sample."""


@dataclass
class PairedSamples:
    """Two aligned measurement vectors (per-run or per-user metric values)."""

    a: np.ndarray
    b: np.ndarray
    label_a: str = "a"
    label_b: str = "b"

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.a.shape != self.b.shape:
            raise ValueError("paired samples must have equal length")
        if self.a.size < 3:
            raise ValueError("paired samples need at least 3 observations")
        if not (np.isfinite(self.a).all() and np.isfinite(self.b).all()):
            raise ValueError("paired samples contain non-finite values")

    @property
    def differences(self) -> np.ndarray:
        return self.a - self.b


def _check_sample(sample: np.ndarray, min_n: int) -> np.ndarray:
    x = np.asarray(sample, dtype=np.float64).reshape(-1)
    if x.size < min_n:
        raise ValueError(f"sample size {x.size} below minimum {min_n}")
    if not np.isfinite(x).all():
        raise ValueError("sample contains non-finite values")
    if np.ptp(x) == 0.0:
        raise ZeroVarianceError("sample is constant; the test is undefined")
    return x


def _poly(coeffs, value):
    """Evaluate sum(c_k * value^k) with coeffs given in ascending order."""
    out = 0.0
    for power, c in enumerate(coeffs):
        out += c * value ** power
    return out


def shapiro_wilk(sample: np.ndarray) -> tuple[float, float]:
    """W statistic and p-value via the standard normalizing approximation.

    Valid for 3 <= n <= 5000. The weights come from the published polynomial
    corrections to the normal order-statistic scores; the p-value transforms W
    to an approximately standard normal deviate (with an arcsine form at n=3).
    """
    x = np.sort(_check_sample(sample, 3))
    n = x.size
    if n > 5000:
        raise ValueError("shapiro_wilk supports n <= 5000")

    m = _norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    m_ss = float(m @ m)
    a = np.empty(n)
    if n == 3:
        a[0], a[1], a[2] = -math.sqrt(0.5), 0.0, math.sqrt(0.5)
    else:
        u = 1.0 / math.sqrt(n)
        rsn = 1.0 / math.sqrt(m_ss)
        a_n = _poly([0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056], u) \
            + m[-1] * rsn
        if n > 5:
            a_n1 = _poly([0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633], u) \
                + m[-2] * rsn
            phi = (m_ss - 2.0 * m[-1] ** 2 - 2.0 * m[-2] ** 2) / \
                  (1.0 - 2.0 * a_n ** 2 - 2.0 * a_n1 ** 2)
            a[2:-2] = m[2:-2] / math.sqrt(phi)
            a[-1], a[-2] = a_n, a_n1
            a[0], a[1] = -a_n, -a_n1
        else:
            phi = (m_ss - 2.0 * m[-1] ** 2) / (1.0 - 2.0 * a_n ** 2)
            a[1:-1] = m[1:-1] / math.sqrt(phi)
            a[-1] = a_n
            a[0] = -a_n

    centered = x - x.mean()
    w = float((a @ x) ** 2 / (centered @ centered))
    w = min(w, 1.0)

    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(max(p, 0.0), 1.0))
    if n <= 11:
        gamma = -2.273 + 0.459 * n
        transformed = -math.log(gamma - math.log1p(-w))
        mu = _poly([0.5440, -0.39978, 0.025054, -6.714e-4], n)
        sigma = math.exp(_poly([1.3822, -0.77857, 0.062767, -0.0020322], n))
    else:
        log_n = math.log(n)
        transformed = math.log1p(-w)
        mu = _poly([-1.5861, -0.31082, -0.083751, 0.0038915], log_n)
        sigma = math.exp(_poly([-0.4803, -0.082676, 0.0030302], log_n))
    z = (transformed - mu) / sigma
    return w, float(_norm.sf(z))


def ks_normality(sample: np.ndarray) -> tuple[float, float]:
    """Kolmogorov-Smirnov distance against a normal fitted to the sample.

    D = sup |empirical CDF - fitted normal CDF| with mean and variance
    estimated from the data; the p-value uses the Dallal-Wilkinson
    approximation of the Lilliefors-corrected distribution.
    """
    x = np.sort(_check_sample(sample, 3))
    n = x.size
    z = (x - x.mean()) / x.std(ddof=1)
    cdf = _norm.cdf(z)
    steps = np.arange(1, n + 1) / n
    d_plus = float(np.max(steps - cdf))
    d_minus = float(np.max(cdf - (steps - 1.0 / n)))
    d = max(d_plus, d_minus)

    if n > 100:
        kd = d * (n / 100.0) ** 0.49
        nd = 100.0
    else:
        kd = d
        nd = float(n)
    p = math.exp(-7.01256 * kd * kd * (nd + 2.78019)
                 + 2.99587 * kd * math.sqrt(nd + 2.78019)
                 - 0.122119 + 0.974598 / math.sqrt(nd) + 1.67997 / nd)
    if p > 0.1:
        kk = (math.sqrt(n) - 0.01 + 0.85 / math.sqrt(n)) * d
        if kk <= 0.302:
            p = 1.0
        elif kk <= 0.5:
            p = _poly([2.76773, -19.828315, 80.709644, -138.55152, 81.541484], kk)
        elif kk <= 0.9:
            p = _poly([-4.901232, 40.662806, -97.490286, 94.029866, -32.355711], kk)
        elif kk <= 1.31:
            p = _poly([6.198765, -19.558097, 23.186922, -12.234627, 2.423045], kk)
        else:
            p = 0.0
    return d, float(min(max(p, 0.0), 1.0))


def paired_t_test(x: PairedSamples) -> tuple[float, float]:
    """Two-sided paired t-test on the mean difference (n - 1 df)."""
    d = x.differences
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise ZeroVarianceError("differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = float(2.0 * _student_t.sf(abs(t), n - 1))
    return t, p


def _signed_rank_components(d: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Midranks of |d| (zeros dropped) plus the positive and negative rank sums."""
    d = d[d != 0.0]
    if d.size == 0:
        raise ZeroVarianceError("all differences are zero")
    magnitude = np.abs(d)
    order = np.argsort(magnitude, kind="stable")
    ranks = np.empty(d.size)
    sorted_mag = magnitude[order]
    rank_values = np.arange(1, d.size + 1, dtype=np.float64)
    start = 0
    while start < d.size:
        stop = start
        while stop + 1 < d.size and sorted_mag[stop + 1] == sorted_mag[start]:
            stop += 1
        rank_values[start:stop + 1] = 0.5 * (start + 1 + stop + 1)
        start = stop + 1
    ranks[order] = rank_values
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    return ranks, w_plus, w_minus


def _exact_signed_rank_p(ranks: np.ndarray, w: float) -> float:
    """Exact two-sided tail over all 2^n equally likely sign assignments.

    Computed by dynamic programming over subset sums of the (doubled, hence
    integer) ranks; identical to explicit enumeration, just polynomial-time.
    """
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] += counts[:-r].copy()
    threshold = int(np.rint(2.0 * w))
    tail = counts[:threshold + 1].sum() / (2.0 ** len(ranks))
    return float(min(1.0, 2.0 * tail))


def wilcoxon_signed_rank(x: PairedSamples) -> tuple[float, float]:
    """Signed-rank test: W = min(rank sum above, rank sum below).

    Zero differences are dropped before ranking. For n <= 25 the p-value is
    exact over the 2^n sign-assignment distribution; beyond that a normal
    approximation with tie correction is used.
    """
    ranks, w_plus, w_minus = _signed_rank_components(x.differences)
    w = min(w_plus, w_minus)
    n = ranks.size
    if n <= 25:
        return w, _exact_signed_rank_p(ranks, w)
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
    z = (w - mu) / math.sqrt(variance)
    p = float(min(1.0, 2.0 * _norm.cdf(z)))
    return w, p


@dataclass
class DecisionRecord:
    """Outcome of the significance pipeline: which test ran and why."""

    test_used: str
    statistic: float
    p: float
    significant: bool
    alpha: float
    shapiro: tuple[float, float] | None = None
    lilliefors: tuple[float, float] | None = None
    reason: str = ""
    labels: tuple[str, str] = ("a", "b")

    def to_dict(self) -> dict:
        return {
            "test_used": self.test_used,
            "statistic": self.statistic,
            "p": self.p,
            "significant": self.significant,
            "alpha": self.alpha,
            "shapiro_w": None if self.shapiro is None else self.shapiro[0],
            "shapiro_p": None if self.shapiro is None else self.shapiro[1],
            "lilliefors_d": None if self.lilliefors is None else self.lilliefors[0],
            "lilliefors_p": None if self.lilliefors is None else self.lilliefors[1],
            "reason": self.reason,
            "labels": list(self.labels),
        }


def significance_pipeline(x: PairedSamples, alpha: float = 0.05) -> DecisionRecord:
    """Pick and run the paired test appropriate for the difference distribution.

    Both normality tests must fail to reject at ``alpha`` for the t-test to be
    used; otherwise the Wilcoxon signed-rank test runs. Zero-variance
    differences yield a "not applicable" record (no test is defined there).
    """
    d = x.differences
    labels = (x.label_a, x.label_b)
    if np.ptp(d) == 0.0:
        return DecisionRecord(
            test_used="not_applicable", statistic=float("nan"), p=float("nan"),
            significant=False, alpha=alpha,
            reason="zero variance in the paired differences", labels=labels)
    sw = shapiro_wilk(d)
    ks = ks_normality(d)
    normal = sw[1] > alpha and ks[1] > alpha
    if normal:
        stat, p = paired_t_test(x)
        test = "paired_t"
        reason = (f"both normality tests retained at alpha={alpha} "
                  f"(shapiro p={sw[1]:.4g}, lilliefors p={ks[1]:.4g})")
    else:
        stat, p = wilcoxon_signed_rank(x)
        test = "wilcoxon"
        reason = (f"normality rejected at alpha={alpha} "
                  f"(shapiro p={sw[1]:.4g}, lilliefors p={ks[1]:.4g})")
    return DecisionRecord(
        test_used=test, statistic=stat, p=p, significant=bool(p < alpha),
        alpha=alpha, shapiro=sw, lilliefors=ks, reason=reason, labels=labels)
