"""Target preprocessing (Yeo-Johnson -> z-score -> [0, 1]) and splits."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FitFailed, InvalidArgument

LAMBDA_BOUNDS = (-5.0, 5.0)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def yeo_johnson(y, lam: float):
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    pos = y >= 0
    yp, yn = y[pos], y[~pos]
    if abs(lam) < 1e-12:
        out[pos] = np.log1p(yp)
    else:
        out[pos] = np.expm1(lam * np.log1p(yp)) / lam
    if abs(lam - 2.0) < 1e-12:
        out[~pos] = -np.log1p(-yn)
    else:
        out[~pos] = -np.expm1((2.0 - lam) * np.log1p(-yn)) / (2.0 - lam)
    return out if out.ndim else float(out)


def inverse_yeo_johnson(t, lam: float):
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    tp, tn = t[pos], t[~pos]
    if abs(lam) < 1e-12:
        out[pos] = np.expm1(tp)
    else:
        out[pos] = np.expm1(np.log1p(lam * tp) / lam)
    if abs(lam - 2.0) < 1e-12:
        out[~pos] = -np.expm1(-tn)
    else:
        out[~pos] = -np.expm1(np.log1p(-(2.0 - lam) * tn) / (2.0 - lam))
    return out if out.ndim else float(out)


def yj_log_likelihood(values, lam: float) -> float:
    """Gaussian profile log-likelihood of the transformed sample, with the
    Jacobian term of the transform."""
    y = np.asarray(values, dtype=np.float64)
    t = yeo_johnson(y, lam)
    var = t.var()
    if not var > 0 or not np.isfinite(var):
        return -math.inf
    return -0.5 * len(y) * math.log(var) + (lam - 1.0) * float(np.sum(np.sign(y) * np.log1p(np.abs(y))))


def fit_lambda(values, bounds=LAMBDA_BOUNDS, tol: float = 1e-4) -> float:
    """Maximum-likelihood exponent by golden-section search on ``bounds``."""
    y = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise FitFailed("non-finite values")
    if len(np.unique(y)) < 3:
        raise FitFailed("need at least three distinct values")
    a, b = bounds
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc = yj_log_likelihood(y, c)
    fd = yj_log_likelihood(y, d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = yj_log_likelihood(y, c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = yj_log_likelihood(y, d)
    lam = 0.5 * (a + b)
    if not math.isfinite(yj_log_likelihood(y, lam)):
        raise FitFailed("degenerate sample")
    return lam


@dataclass(frozen=True)
class TransformParams:
    lam: float
    mean: float
    std: float
    lo: float
    hi: float

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TransformParams":
        return cls(**{k: float(d[k]) for k in ("lam", "mean", "std", "lo", "hi")})


def fit_transform(train_values) -> TransformParams:
    y = np.asarray(train_values, dtype=np.float64)
    lam = fit_lambda(y)
    t = yeo_johnson(y, lam)
    mean, std = float(t.mean()), float(t.std())
    if not std > 0:
        raise FitFailed("zero spread after transform")
    z = (t - mean) / std
    lo, hi = float(z.min()), float(z.max())
    if not hi > lo:
        raise FitFailed("zero range after standardisation")
    return TransformParams(lam, mean, std, lo, hi)


def apply(values, params: TransformParams):
    """Scaled targets; training values land in [0, 1], others are not clamped."""
    z = (yeo_johnson(values, params.lam) - params.mean) / params.std
    return (z - params.lo) / (params.hi - params.lo)


def inverse(scaled, params: TransformParams):
    z = np.asarray(scaled, dtype=np.float64) * (params.hi - params.lo) + params.lo
    return inverse_yeo_johnson(z * params.std + params.mean, params.lam)


@dataclass(frozen=True)
class SplitIndex:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "val", "test")}

    @classmethod
    def from_json(cls, d: dict) -> "SplitIndex":
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("train", "val", "test")))


def split(n: int, fractions=(0.65, 0.15, 0.20), seed: int = 0) -> SplitIndex:
    """Seeded shuffle; sizes floor(f_train n), floor(f_val n), remainder."""
    if n < 3:
        raise InvalidArgument("need at least three samples to split")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgument("fractions must be three values summing to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    return SplitIndex(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                      np.sort(perm[n_train + n_val:]))
