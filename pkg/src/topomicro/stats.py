"""Regression metrics and two-sample statistics for ablation reports."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidArgument, UndefinedMetric

METRICS = ("mse", "mae", "r2", "pearson", "spearman")
# metrics where larger is better; the others are errors
HIGHER_IS_BETTER = {"r2", "pearson", "spearman"}
TIERS = ((0.01, "***"), (0.05, "**"), (0.10, "*"))


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if len(p) != len(t) or len(p) == 0:
        raise InvalidArgument("pred and truth must be non-empty and of equal length")
    return p, t


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(a, b) -> float:
    a, b = _pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    if den == 0:
        raise UndefinedMetric("correlation of a constant vector")
    return float(np.clip((da @ db) / den, -1.0, 1.0))


def spearman(a, b) -> float:
    return pearson(average_ranks(a), average_ranks(b))


@dataclass(frozen=True)
class MetricsRow:
    mse: float
    mae: float
    r2: float
    pearson: float
    spearman: float

    def as_dict(self) -> dict:
        return asdict(self)


def metrics(pred, truth) -> MetricsRow:
    p, t = _pair(pred, truth)
    res = p - t
    mse = float(np.mean(res ** 2))
    mae = float(np.mean(np.abs(res)))
    sst = float(np.sum((t - t.mean()) ** 2))
    if sst == 0:
        raise UndefinedMetric("constant truth")
    r2 = 1.0 - float(np.sum(res ** 2)) / sst
    try:
        r = pearson(p, t)
        rho = spearman(p, t)
    except UndefinedMetric:
        # constant predictions: correlation undefined, report 0
        r = rho = 0.0
    return MetricsRow(mse, mae, r2, r, rho)


def aggregate(rows) -> dict:
    """Mean and sample standard deviation of each metric over runs."""
    out = {}
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in rows])
        out[m] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


# ------------------------------------------------------ Student t by hand

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(0.5 * df, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - tail if t >= 0 else tail


def t_ppf(q: float, df: float) -> float:
    """Quantile of Student t by bisection on :func:`t_cdf`."""
    if not 0.0 < q < 1.0:
        raise InvalidArgument("quantile must lie in (0, 1)")
    if q == 0.5:
        return 0.0
    lo, hi = -1.0, 1.0
    while t_cdf(lo, df) > q:
        lo *= 2.0
    while t_cdf(hi, df) < q:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def _welch_parts(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise UndefinedMetric("each sample needs at least two values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        raise UndefinedMetric("both samples have zero variance")
    qa, qb = va / len(a), vb / len(b)
    se = math.sqrt(qa + qb)
    df = (qa + qb) ** 2 / (qa ** 2 / (len(a) - 1) + qb ** 2 / (len(b) - 1))
    return float(a.mean() - b.mean()), se, df


def welch_t(a, b) -> tuple[float, float, float]:
    """(t, df, two-sided p) for unequal-variance samples."""
    diff, se, df = _welch_parts(a, b)
    t = diff / se
    return t, df, t_sf_two_sided(t, df)


def cohens_d(a, b) -> float:
    """(mean(a) - mean(b)) / pooled SD."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise UndefinedMetric("each sample needs at least two values")
    pooled = ((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2)
    if pooled == 0:
        raise UndefinedMetric("zero pooled variance")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def mean_diff_ci(a, b, level: float = 0.95) -> tuple[float, float]:
    diff, se, df = _welch_parts(a, b)
    half = t_ppf(0.5 + level / 2.0, df) * se
    return diff - half, diff + half


def significance_tier(p: float) -> str:
    """Strictest of ``***`` (1%), ``**`` (5%), ``*`` (10%), else ``""``."""
    for threshold, mark in TIERS:
        if p <= threshold:
            return mark
    return ""


@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    p_value: float
    tier: str
    delta_mu: float
    cohens_d: float
    ci_low: float
    ci_high: float


SIGN_CONVENTION = (
    "delta_mu = mean(variant) - mean(full); t, d and CI are all oriented "
    "as variant minus full"
)


def compare(full, variant, metric: str = "") -> ComparisonRow:
    full = np.asarray(full, dtype=np.float64)
    variant = np.asarray(variant, dtype=np.float64)
    try:
        _, _, p = welch_t(variant, full)
        d = cohens_d(variant, full)
        lo, hi = mean_diff_ci(variant, full)
    except UndefinedMetric:
        if len(full) >= 2 and len(variant) >= 2 and np.array_equal(np.sort(full), np.sort(variant)):
            # identical constant samples: no evidence of a difference
            return ComparisonRow(metric, 1.0, "", 0.0, 0.0, 0.0, 0.0)
        raise
    return ComparisonRow(metric, p, significance_tier(p), float(variant.mean() - full.mean()),
                         d, lo, hi)


def ablation_compare(full_runs: dict, variant_runs: dict) -> list[ComparisonRow]:
    """Per metric comparison. Both arguments map metric name -> run values."""
    rows = []
    for m in METRICS:
        if m not in full_runs or m not in variant_runs:
            continue
        rows.append(compare(full_runs[m], variant_runs[m], m))
    return rows
