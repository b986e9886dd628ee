import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from ordsim.dgm import S2, SYMMETRIC, discretize_beta, gen_scenario2
from ordsim.errors import InitFailure, ShapeMismatch
from ordsim.ordcore import OrdinalCounts, probs_from_cumlogits, simplex_from_unconstrained
from ordsim.posterior import (
    MODEL_LABELS,
    ModelSpec,
    baseline_cumlogits,
    cumlogits_for_arm,
    cutpoint_logORs,
    initial_point,
    log_posterior,
)


def _params(spec, base, effects):
    x = np.zeros(spec.dim)
    lay = spec.layout()
    x[lay.baseline] = base
    x[lay.effects] = effects
    return x


def _reference_logp(spec, x, data):
    """Log posterior rebuilt from alpha, independent of the jitted kernel."""
    lay = spec.layout()
    _, logj = simplex_from_unconstrained(x[lay.baseline])
    lp = logj + norm.logpdf(x[lay.effects], 0.0, spec.effect_sds()).sum()
    for arm in (0, 1):
        p = probs_from_cumlogits(cumlogits_for_arm(spec, x, arm))
        if np.any(p <= 0):
            return -math.inf
        lp += float(np.dot(data.counts[arm], np.log(p)))
    return lp


def test_layout_sizes():
    for j in (3, 7, 11):
        assert ModelSpec.sep_logistic(j).for_cutpoint(2).dim == 2
        assert ModelSpec.po(j).dim == j
        assert ModelSpec.ppo_u(j).dim == 2 * (j - 1)
        assert ModelSpec.cppo_linear(j).dim == j + 1
        assert ModelSpec.cppo_last(j).dim == j + 1


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec.cppo(4, [0.5, 1.0, 2.0])
    with pytest.raises(ValueError):
        ModelSpec.po(3, prior_sd_effect=0.0)
    with pytest.raises(ValueError):
        ModelSpec.from_label("logistic", 3)


def test_arm_offsets():
    po = ModelSpec.po(4)
    x = _params(po, [0.3, -0.2, 0.1], [0.0])
    np.testing.assert_array_equal(cumlogits_for_arm(po, x, 0), cumlogits_for_arm(po, x, 1))

    ppo = ModelSpec.ppo_u(3)
    x = _params(ppo, [0.1, 0.4], [0.2, 0.1])
    off = cumlogits_for_arm(ppo, x, 1) - cumlogits_for_arm(ppo, x, 0)
    np.testing.assert_allclose(off, [0.2, 0.3], atol=1e-15)

    lin = ModelSpec.cppo_linear(7)
    x = _params(lin, np.zeros(6), [math.log(0.8), 0.06])
    theta = gen_scenario2(discretize_beta(SYMMETRIC, 7), S2()).theta_true
    np.testing.assert_array_equal(cutpoint_logORs(lin, x), theta)


def test_cutpoint_extraction():
    po = ModelSpec.po(5)
    np.testing.assert_array_equal(cutpoint_logORs(po, _params(po, np.zeros(4), [0.405])), [0.405] * 4)
    last = ModelSpec.cppo_last(11)
    t = cutpoint_logORs(last, _params(last, np.zeros(10), [0.0, math.log(1.5)]))
    np.testing.assert_array_equal(t, [0.0] * 9 + [math.log(1.5)])
    ppo = ModelSpec.ppo_u(6)
    t = cutpoint_logORs(ppo, _params(ppo, np.zeros(5), [0.7, 0, 0, 0, 0]))
    np.testing.assert_array_equal(t, [0.7] * 5)
    sep = ModelSpec.sep_logistic(5).for_cutpoint(3)
    assert cutpoint_logORs(sep, [0.1, -0.4]).tolist() == [-0.4]


def test_ppo_u_reproduces_truth():
    theta = gen_scenario2(discretize_beta(SYMMETRIC, 7), S2()).theta_true
    ppo = ModelSpec.ppo_u(7)
    x = _params(ppo, np.zeros(6), np.concatenate([[theta[0]], theta[1:] - theta[0]]))
    np.testing.assert_allclose(cutpoint_logORs(ppo, x), theta, atol=1e-15, rtol=0)


def test_po_j2_equals_sep_logistic(rng):
    data = OrdinalCounts.from_arms([12, 30], [20, 25])
    po = ModelSpec.po(2)
    sep = ModelSpec.sep_logistic(2).for_cutpoint(2)
    for _ in range(20):
        x = rng.normal(size=2)
        assert abs(log_posterior(po, x, data).logp - log_posterior(sep, x, data).logp) < 1e-10


@pytest.mark.parametrize("label", MODEL_LABELS)
def test_empty_data_is_prior(label, rng):
    spec = ModelSpec.from_label(label, 5)
    if spec.kind == "sep-logistic":
        spec = spec.for_cutpoint(3)
    data = OrdinalCounts.empty(spec.fit_j)
    lay = spec.layout()
    for _ in range(30):
        x = rng.normal(scale=0.3, size=spec.dim)
        res = log_posterior(spec, x, data)

        def prior(v):
            return (simplex_from_unconstrained(v[lay.baseline])[1]
                    + norm.logpdf(v[lay.effects], 0.0, spec.effect_sds()).sum())

        valid = all(np.all(probs_from_cumlogits(cumlogits_for_arm(spec, x, a)) > 0) for a in (0, 1))
        if not valid:
            assert res.logp == -math.inf
            continue
        assert abs(res.logp - prior(x)) < 1e-10
        h = 1e-6
        fd = np.array([(prior(x + h * e) - prior(x - h * e)) / (2 * h) for e in np.eye(spec.dim)])
        np.testing.assert_allclose(res.grad, fd, atol=1e-6)


@pytest.mark.parametrize("label", MODEL_LABELS)
def test_logp_matches_alpha_reference(label, rng):
    # logp depends on the baseline block only through alpha
    for _ in range(20):
        j = int(rng.integers(3, 9))
        spec = ModelSpec.from_label(label, j)
        if spec.kind == "sep-logistic":
            spec = spec.for_cutpoint(int(rng.integers(2, j + 1)))
        data = OrdinalCounts(rng.integers(0, 40, size=(2, spec.fit_j)))
        x = np.concatenate([rng.normal(size=spec.fit_j - 1), rng.normal(0, 0.1, spec.n_effect)])
        ref = _reference_logp(spec, x, data)
        got = log_posterior(spec, x, data).logp
        if math.isinf(ref):
            assert got == -math.inf
        else:
            assert abs(got - ref) < 1e-9 * max(1.0, abs(ref))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(MODEL_LABELS), st.integers(0, 2**32 - 1))
def test_gradient_finite_differences(label, seed):
    rng = np.random.default_rng(seed)
    j = int(rng.integers(3, 8))
    spec = ModelSpec.from_label(label, j)
    if spec.kind == "sep-logistic":
        spec = spec.for_cutpoint(int(rng.integers(2, j + 1)))
    data = OrdinalCounts(rng.integers(0, 100, size=(2, spec.fit_j)))
    x = np.concatenate([rng.normal(size=spec.fit_j - 1), rng.normal(0, 0.05, spec.n_effect)])
    res = log_posterior(spec, x, data)
    if not math.isfinite(res.logp):
        return
    h = 1e-5
    for i, e in enumerate(np.eye(spec.dim)):
        fd = (log_posterior(spec, x + h * e, data).logp
              - log_posterior(spec, x - h * e, data).logp) / (2 * h)
        assert abs(res.grad[i] - fd) / max(1.0, abs(fd), abs(res.grad[i])) < 1e-6


def test_negative_probability_guard():
    spec = ModelSpec.ppo_u(3)
    x = _params(spec, [0.0, 0.0], [0.0, 8.0])
    data = OrdinalCounts.from_arms([5, 5, 5], [5, 5, 5])
    res = log_posterior(spec, x, data)
    assert res.logp == -math.inf
    np.testing.assert_array_equal(res.grad, 0.0)


def test_nesting_likelihood_equal(rng):
    data = OrdinalCounts(rng.integers(1, 60, size=(2, 6)))
    po, ppo, cppo = ModelSpec.po(6), ModelSpec.ppo_u(6), ModelSpec.cppo_linear(6)
    for _ in range(10):
        base = rng.normal(size=5)
        beta = rng.normal(0, 0.3)
        lp_po = log_posterior(po, _params(po, base, [beta]), data).logp
        lp_ppo = log_posterior(ppo, _params(ppo, base, [beta, 0, 0, 0, 0]), data).logp
        lp_cppo = log_posterior(cppo, _params(cppo, base, [beta, 0.0]), data).logp
        inc = norm.logpdf(0.0, 0.0, 100.0)
        assert abs((lp_ppo - 4 * inc) - lp_po) < 1e-10
        assert abs((lp_cppo - inc) - lp_po) < 1e-10


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        log_posterior(ModelSpec.po(4), np.zeros(4), OrdinalCounts.empty(5))
    with pytest.raises(ShapeMismatch):
        log_posterior(ModelSpec.po(4), np.zeros(3), OrdinalCounts.empty(4))


def test_baseline_cumlogits_decreasing(rng):
    spec = ModelSpec.po(8)
    for _ in range(20):
        a = baseline_cumlogits(spec, rng.normal(size=8) * 3)
        assert np.all(np.diff(a) < 0)


@pytest.mark.parametrize("label", MODEL_LABELS)
def test_initial_point(label):
    j = 7
    spec = ModelSpec.from_label(label, j)
    if spec.kind == "sep-logistic":
        spec = spec.for_cutpoint(4)
    data = OrdinalCounts(np.full((2, spec.fit_j), 20))
    x0 = initial_point(spec, data, np.random.default_rng(0), jitter=0.0)
    np.testing.assert_array_equal(x0, initial_point(spec, data, np.random.default_rng(9), jitter=0.0))
    np.testing.assert_array_equal(x0[spec.layout().effects], 0.0)
    assert math.isfinite(log_posterior(spec, x0, data).logp)
    rng = np.random.default_rng(3)
    for _ in range(20):
        assert math.isfinite(log_posterior(spec, x0 + rng.uniform(-1e-3, 1e-3, spec.dim), data).logp)
    starts = [initial_point(spec, data, np.random.default_rng(s)) for s in range(4)]
    assert len({s.tobytes() for s in starts}) == 4


def test_initial_point_failure():
    # an exhausted attempt budget is reported, not looped on
    spec = ModelSpec.ppo_u(3)
    data = OrdinalCounts.from_arms([5, 5, 5], [5, 5, 5])
    with pytest.raises(InitFailure):
        initial_point(spec, data, np.random.default_rng(0), jitter=1e6, max_tries=0)
