import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from topomicro.errors import FitFailed, InvalidArgument
from topomicro.features import (
    SplitIndex,
    TransformParams,
    apply,
    fit_lambda,
    fit_transform,
    inverse,
    inverse_yeo_johnson,
    split,
    yeo_johnson,
    yj_log_likelihood,
)
from topomicro.stats import spearman

finite = st.floats(-50, 50, allow_nan=False)


def test_yeo_johnson_branches():
    ys = np.linspace(-3, 3, 13)
    assert np.allclose(yeo_johnson(ys, 1.0), ys, atol=1e-12)
    assert math.isclose(yeo_johnson(math.e - 1, 0.0), 1.0, rel_tol=1e-12)
    assert math.isclose(yeo_johnson(-(math.e - 1), 2.0), -1.0, rel_tol=1e-12)


def test_yeo_johnson_matches_scipy():
    ys = np.linspace(-4, 4, 41)
    for lam in (-2.5, -0.3, 0.0, 0.7, 2.0, 3.1):
        assert np.allclose(yeo_johnson(ys, lam), sps.yeojohnson(ys, lam), rtol=1e-10, atol=1e-12)


@settings(max_examples=100)
@given(finite, finite, st.floats(-5, 5))
def test_yeo_johnson_strictly_increasing(a, b, lam):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    assert yeo_johnson(lo, lam) < yeo_johnson(hi, lam)


@settings(max_examples=100)
@given(st.floats(-20, 20), st.floats(-5, 5))
def test_yeo_johnson_inverse(y, lam):
    assert math.isclose(inverse_yeo_johnson(yeo_johnson(y, lam), lam), y, rel_tol=1e-9, abs_tol=1e-9)


def test_fit_lambda_is_likelihood_maximiser():
    rng = np.random.default_rng(0)
    y = rng.lognormal(0.0, 0.8, 300)
    lam = fit_lambda(y)
    assert -5 <= lam <= 5
    best = yj_log_likelihood(y, lam)
    for other in np.linspace(-5, 5, 201):
        assert yj_log_likelihood(y, other) <= best + 1e-6
    # scipy's optimiser lands on the same maximum
    assert abs(lam - sps.yeojohnson_normmax(y)) < 1e-3


def test_lognormal_skew_reduced_over_seeds():
    for seed in range(10):
        y = np.random.default_rng(seed).lognormal(0.0, 1.0, 500)
        t = yeo_johnson(y, fit_lambda(y))
        assert abs(sps.skew(t)) < 0.3


def test_normal_sample_skew_not_increased():
    y = np.random.default_rng(3).normal(size=400)
    assert abs(sps.skew(yeo_johnson(y, fit_lambda(y)))) <= abs(sps.skew(y)) + 1e-12


def test_fit_lambda_guards():
    with pytest.raises(FitFailed):
        fit_lambda([1.0, 1.0, 2.0])
    with pytest.raises(FitFailed):
        fit_lambda([1.0, np.nan, 2.0, 3.0])
    y = np.array([1.0, 1.0 + 1e-12, 1.0 + 2e-12, 1.0])
    try:
        lam = fit_lambda(y)
    except FitFailed:
        return
    assert -5 <= lam <= 5 and np.all(np.isfinite(yeo_johnson(y, lam)))


def test_transform_endpoints_and_no_clamp():
    y = np.random.default_rng(1).gamma(2.0, 1.0, 80)
    p = fit_transform(y)
    s = apply(y, p)
    assert math.isclose(s.min(), 0.0, abs_tol=1e-12) and math.isclose(s.max(), 1.0, abs_tol=1e-12)
    assert apply(np.array([y.max() * 2]), p)[0] > 1
    assert p.std > 0 and p.hi > p.lo


def test_transform_round_trip():
    rng = np.random.default_rng(2)
    p = fit_transform(rng.lognormal(size=60))
    v = rng.lognormal(size=100)
    assert np.max(np.abs(inverse(apply(v, p), p) - v)) < 1e-9
    assert TransformParams.from_json(json.loads(json.dumps(p.to_json()))) == p


def test_transform_zero_spread_rejected():
    with pytest.raises(FitFailed):
        fit_transform([2.0, 2.0, 2.0, 2.0])


def test_spearman_raw_vs_scaled_is_one():
    y = np.random.default_rng(4).lognormal(size=50)
    assert spearman(y, apply(y, fit_transform(y))) == pytest.approx(1.0, abs=1e-15)


def test_no_leakage_from_held_out_values():
    rng = np.random.default_rng(5)
    y = rng.lognormal(size=40)
    s = split(40, seed=1)
    p = fit_transform(y[s.train])
    poisoned = y.copy()
    poisoned[s.test] = 1e6
    poisoned[s.val] = -3.0
    assert fit_transform(poisoned[s.train]) == p


@pytest.mark.parametrize("n,sizes", [(1312, (852, 196, 264)), (20, (13, 3, 4)), (200, (130, 30, 40))])
def test_split_sizes(n, sizes):
    s = split(n, seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == sizes


@settings(max_examples=50)
@given(st.integers(3, 500), st.integers(0, 2 ** 32 - 1))
def test_split_disjoint_cover_and_deterministic(n, seed):
    s = split(n, seed=seed)
    all_idx = np.concatenate([s.train, s.val, s.test])
    assert np.array_equal(np.sort(all_idx), np.arange(n))
    t = split(n, seed=seed)
    assert all(np.array_equal(getattr(s, k), getattr(t, k)) for k in ("train", "val", "test"))
    r = SplitIndex.from_json(json.loads(json.dumps(s.to_json())))
    assert np.array_equal(r.test, s.test)


def test_split_validation():
    with pytest.raises(InvalidArgument):
        split(2)
    with pytest.raises(InvalidArgument):
        split(10, fractions=(0.5, 0.5, 0.5))
