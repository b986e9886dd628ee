import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ordsim.diagnostics import (
    DiagnosticsBundle,
    ess_bulk,
    ess_tail,
    split_rhat,
    summarize,
)


def _ar1(rng, phi, shape):
    e = rng.normal(size=shape)
    x = np.empty(shape)
    x[:, 0] = e[:, 0] / math.sqrt(1 - phi**2)
    for t in range(1, shape[1]):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    return x


def test_rhat_constant_is_one():
    assert split_rhat(np.full((4, 100), 2.5)) == 1.0


def test_rhat_iid_chains():
    passes = sum(split_rhat(np.random.default_rng(s).normal(size=(4, 3750))) < 1.01
                 for s in range(100))
    assert passes >= 99


def test_rhat_detects_shift():
    x = np.random.default_rng(0).normal(size=(2, 1000))
    x[1] += 5.0
    assert split_rhat(x) > 1.5


def test_rhat_needs_two_chains():
    with pytest.raises(ValueError):
        split_rhat(np.zeros((1, 100)))


def test_ess_iid():
    passes = 0
    for s in range(100):
        x = np.random.default_rng(s).normal(size=(4, 1000))
        passes += abs(ess_bulk(x) / 4000 - 1) < 0.15
    assert passes >= 95


def test_ess_ar1():
    phi = 0.9
    x = _ar1(np.random.default_rng(1), phi, (4, 10_000))
    expected = x.size * (1 - phi) / (1 + phi)
    assert abs(ess_bulk(x) / expected - 1) < 0.25


def test_ess_constant():
    x = np.ones((4, 250))
    assert ess_bulk(x) == 1000.0 and ess_tail(x) == 1000.0


def test_ess_tail_below_bulk_for_heavy_autocorrelation():
    x = _ar1(np.random.default_rng(2), 0.95, (4, 2000))
    assert 0 < ess_tail(x) < x.size


def test_summarize_examples():
    s = summarize([1, 2, 3, 4, 5])
    assert s.median == 3
    z = np.random.default_rng(3).normal(size=15_000)
    s = summarize(z)
    assert abs(s.ci_low + 1.96) < 0.06 and abs(s.ci_high - 1.96) < 0.06
    sym = np.concatenate([z, -z])
    assert abs(summarize(sym).median) < 3 * 1.2533 / math.sqrt(sym.size)
    assert s.ci_low <= s.median <= s.ci_high


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rhat_monotone_invariance(seed):
    x = np.random.default_rng(seed).normal(size=(4, 200))
    assert abs(split_rhat(x) - split_rhat(np.exp(x))) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100), st.floats(0.01, 100))
def test_ess_affine_invariance(seed, a, b):
    x = np.random.default_rng(seed).normal(size=(4, 200))
    y = a + b * x
    assert math.isclose(ess_bulk(x), ess_bulk(y), rel_tol=1e-9)
    assert math.isclose(ess_tail(x), ess_tail(y), rel_tol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10), st.floats(0.1, 10))
def test_summarize_equivariance(seed, a, b):
    x = np.random.default_rng(seed).normal(size=500)
    s, t = summarize(x), summarize(a + b * x)
    for u, v in zip(s, t):
        assert abs((a + b * u) - v) < 1e-12 * max(1.0, abs(v)) * 10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rhat_and_ess_bounds(seed):
    x = np.random.default_rng(seed).normal(size=(3, 60))
    assert split_rhat(x) >= 1 - 1e-8
    assert 0 < ess_bulk(x) <= x.size * math.log10(x.size)


def _bundle(**kw):
    base = dict(rhat=np.array([1.001]), ess_bulk=np.array([900.0]), ess_tail=np.array([800.0]),
                n_divergent=0, max_treedepth_hits=0, n_chains=4)
    base.update(kw)
    return DiagnosticsBundle(**base)


def test_bundle_flags():
    assert _bundle().converged and not _bundle().degraded
    assert not _bundle(rhat=np.array([1.02])).converged
    assert not _bundle(rhat=np.array([1.02])).degraded
    low = _bundle(ess_tail=np.array([399.0]))
    assert not low.converged and low.degraded
    div = _bundle(n_divergent=1)
    assert not div.converged and div.degraded
    assert _bundle().summary()["converged"] is True
