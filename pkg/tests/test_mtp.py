"""Tests for the thresholding procedures and metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from hamt.clfdr import GaussianComponent, KnownPrior, PointMass
from hamt.core import (
    DiscreteSigma,
    TruthRecord,
    UniformSigma,
    gauss_cdf,
    gauss_pdf,
    gauss_sf,
    interval,
    left_ray,
)
from hamt.mtp import (
    QuadratureOptions,
    bh_step_up,
    composite_pvalue,
    composite_pvalue_batch,
    compute_metrics,
    oracle_mfdr,
    oracle_power,
    oracle_threshold,
    step_up,
    z_oracle_threshold,
)


def _pow15(s):
    return np.power(np.asarray(s, dtype=float), 1.5)


def _switch(s):
    s = np.asarray(s, dtype=float)
    return np.where(s <= 3.65, 0.0, np.power(s, 1.5))


def _twice_sigma(s):
    return 2.0 * np.asarray(s, dtype=float)


SPARSE_RAY_PRIOR = KnownPrior(((0.9, PointMass(0.0)), (0.1, PointMass(_pow15))))
SWITCH_PRIOR = KnownPrior(((1.0, PointMass(_switch, knots=(3.65,))),))
WIDE_UNIFORM = UniformSigma(0.5, 4.0)
ORIGIN_RAY = left_ray(0.0)


# ---------------------------------------------------------------------------
# step-up rule
# ---------------------------------------------------------------------------


def test_step_up_hand_example():
    res = step_up(np.array([0.01, 0.05, 0.2, 0.5]), alpha=0.1)
    assert res.r == 3
    assert res.realized_threshold == 0.2
    np.testing.assert_allclose(
        res.running_means, [0.01, 0.03, 0.26 / 3.0, 0.19], rtol=1e-15
    )
    np.testing.assert_array_equal(res.decisions.decisions, [True, True, True, False])
    assert res.decisions.rejected_count == 3


def test_step_up_all_zero_rejects_all():
    res = step_up(np.zeros(7), alpha=0.05)
    assert res.r == 7
    assert res.decisions.decisions.all()
    assert res.realized_threshold == 0.0


def test_step_up_all_above_alpha_rejects_none():
    res = step_up(np.full(5, 0.9), alpha=0.1)
    assert res.r == 0
    assert not res.decisions.decisions.any()
    assert res.realized_threshold == 0.0


def test_step_up_empty_input():
    res = step_up(np.zeros(0), alpha=0.1)
    assert res.r == 0
    assert res.decisions.decisions.size == 0
    assert res.running_means.size == 0


def test_step_up_ties_break_by_original_index():
    # prefix means 0, 0.03, 0.04: at alpha = 0.035 only two units pass, and
    # the two tied statistics at 0.06 are resolved in favor of the earlier one
    res = step_up(np.array([0.0, 0.06, 0.06]), alpha=0.035)
    assert res.r == 2
    np.testing.assert_array_equal(res.decisions.decisions, [True, True, False])


def test_step_up_input_validation():
    with pytest.raises(ValueError, match="alpha"):
        step_up(np.array([0.5]), alpha=1.5)
    with pytest.raises(ValueError, match="0, 1"):
        step_up(np.array([0.5, 1.2]), alpha=0.1)
    with pytest.raises(ValueError, match="0, 1"):
        step_up(np.array([np.nan]), alpha=0.1)


@given(
    values=st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=40),
    alpha=st.floats(min_value=0.01, max_value=0.5),
)
@settings(max_examples=200, deadline=None)
def test_step_up_threshold_property(values, alpha):
    t = np.array(values)
    res = step_up(t, alpha)
    sorted_t = np.sort(t)
    running = np.cumsum(sorted_t) / np.arange(1, t.size + 1)
    if res.r >= 1:
        assert running[res.r - 1] <= alpha
        assert res.realized_threshold == sorted_t[res.r - 1]
    if res.r < t.size:
        assert running[res.r] > alpha
    assert res.decisions.rejected_count == res.r
    # the rejected statistics are exactly the r smallest as a multiset
    rejected = np.sort(t[res.decisions.decisions])
    np.testing.assert_array_equal(rejected, sorted_t[: res.r])


@given(
    values=st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=30),
    a1=st.floats(min_value=0.01, max_value=0.5),
    a2=st.floats(min_value=0.01, max_value=0.5),
)
@settings(max_examples=200, deadline=None)
def test_step_up_monotone_in_alpha(values, a1, a2):
    lo, hi = min(a1, a2), max(a1, a2)
    t = np.array(values)
    small = step_up(t, lo).decisions.decisions
    large = step_up(t, hi).decisions.decisions
    assert np.all(large[small])


# ---------------------------------------------------------------------------
# BH baseline and composite p-values
# ---------------------------------------------------------------------------


def test_bh_hand_example():
    dec = bh_step_up(np.array([0.001, 0.2, 0.9]), alpha=0.1)
    np.testing.assert_array_equal(dec.decisions, [True, False, False])
    assert dec.rejected_count == 1


def test_bh_degenerate_pvalues():
    assert not bh_step_up(np.ones(6), alpha=0.1).decisions.any()
    assert bh_step_up(np.zeros(6), alpha=0.1).decisions.all()


@given(
    values=st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=40),
    alpha=st.floats(min_value=0.01, max_value=0.4),
)
@settings(max_examples=200, deadline=None)
def test_bh_adaptive_rejects_superset(values, alpha):
    p = np.array(values)
    plain = bh_step_up(p, alpha, adaptive=False).decisions
    adaptive = bh_step_up(p, alpha, adaptive=True).decisions
    assert np.all(adaptive[plain])


def test_composite_pvalue_values():
    region = left_ray(1.0)
    assert composite_pvalue((1.0, 2.0), region) == 0.5
    assert composite_pvalue((1.0 + 1.6449 * 2.0, 2.0), region) == pytest.approx(
        0.05, abs=1e-4
    )
    assert composite_pvalue((1.0 - 100.0, 2.0), region) > 1.0 - 1e-9


def test_composite_pvalue_interval_unsupported():
    with pytest.raises(NotImplementedError, match="left-ray"):
        composite_pvalue((0.0, 1.0), interval(-1.0, 1.0))


def test_composite_pvalue_batch_matches_scalar():
    region = left_ray(0.5)
    rng = np.random.Generator(np.random.Philox(3))
    x = rng.normal(size=20)
    sigma = rng.uniform(0.5, 2.0, 20)
    batch = composite_pvalue_batch(x, sigma, region)
    single = [composite_pvalue((a, b), region) for a, b in zip(x, sigma)]
    np.testing.assert_allclose(batch, single, rtol=1e-15)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _decisions(flags):
    flags = np.asarray(flags, dtype=bool)
    from hamt.core import DecisionSet

    return DecisionSet(flags, 0.5, int(flags.sum()))


def test_metrics_no_rejections():
    rec = compute_metrics(_decisions([False, False]), np.array([True, False]))
    assert rec == (0.0, 0.0, 0)


def test_metrics_perfect_decisions():
    truth = [TruthRecord(1.0, True), TruthRecord(0.0, False), TruthRecord(2.0, True)]
    rec = compute_metrics(_decisions([True, False, True]), truth)
    assert rec.fdp == 0.0 and rec.ptp == 1.0 and rec.rejections == 2


def test_metrics_hand_case():
    # 2 rejections, 1 false, 4 nonnull in total
    truth = np.array([True, False, True, True, True, False])
    rec = compute_metrics(_decisions([True, True, False, False, False, False]), truth)
    assert rec.fdp == 0.5 and rec.ptp == 0.25 and rec.rejections == 2


def test_metrics_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        compute_metrics(_decisions([True, False]), np.array([True]))


# ---------------------------------------------------------------------------
# oracle threshold: analytic example constants
# ---------------------------------------------------------------------------


def test_sparse_scale_example_constants():
    zres = z_oracle_threshold(SPARSE_RAY_PRIOR, WIDE_UNIFORM, ORIGIN_RAY, alpha=0.1)
    assert zres.t_z == pytest.approx(3.270868, abs=1e-5)
    assert zres.t_z == pytest.approx(3.273, abs=5e-3)
    assert zres.power == pytest.approx(0.0434233, abs=1e-5)
    assert zres.power == pytest.approx(0.0432, abs=1e-3)

    ores = oracle_threshold(SPARSE_RAY_PRIOR, WIDE_UNIFORM, ORIGIN_RAY, alpha=0.1)
    assert ores.regime == "interior"
    assert ores.t_star == pytest.approx(0.1764160, abs=1e-5)
    assert ores.t_star == pytest.approx(0.177, abs=5e-3)
    assert 0.1 - 1e-4 <= ores.q_value <= 0.1
    power = oracle_power(SPARSE_RAY_PRIOR, WIDE_UNIFORM, ORIGIN_RAY, ores.t_star)
    assert power == pytest.approx(0.0609168, abs=1e-5)
    assert power == pytest.approx(0.0611, abs=1e-3)


def test_switch_example_constants():
    zres = z_oracle_threshold(SWITCH_PRIOR, WIDE_UNIFORM, ORIGIN_RAY, alpha=0.1)
    assert zres.t_z == pytest.approx(4.123595, abs=1e-5)
    assert zres.t_z == pytest.approx(4.124, abs=5e-3)
    assert zres.power == pytest.approx(0.0015107, abs=1e-5)
    assert zres.power == pytest.approx(0.0015, abs=5e-4)

    ores = oracle_threshold(SWITCH_PRIOR, WIDE_UNIFORM, ORIGIN_RAY, alpha=0.1)
    assert ores.regime == "reject_all"
    assert ores.q_value == 0.0
    power = oracle_power(SWITCH_PRIOR, WIDE_UNIFORM, ORIGIN_RAY, ores.t_star)
    assert power == 1.0


def test_reject_none_when_prior_sits_inside_region():
    prior = KnownPrior(((1.0, PointMass(0.0)),))
    res = oracle_threshold(prior, WIDE_UNIFORM, left_ray(1.0), alpha=0.1)
    assert res.regime == "reject_none"
    assert res.t_star == 0.0
    assert math.isnan(res.q_value)


def test_threshold_monotone_in_alpha():
    stars = [
        oracle_threshold(SPARSE_RAY_PRIOR, WIDE_UNIFORM, ORIGIN_RAY, a).t_star
        for a in (0.05, 0.1, 0.2)
    ]
    assert stars[0] <= stars[1] <= stars[2]


def test_monotonicity_guard_wiring():
    # a negative slack turns any strictly increasing curve into a violation,
    # which exercises the error path without needing a pathological prior
    opts = QuadratureOptions(monotone_slack=-1.0)
    with pytest.raises(RuntimeError, match="nondecreasing"):
        oracle_threshold(SPARSE_RAY_PRIOR, WIDE_UNIFORM, ORIGIN_RAY, 0.1, opts)


# ---------------------------------------------------------------------------
# oracle mFDR against independent enumeration
# ---------------------------------------------------------------------------


def test_discrete_scenario_mfdr_matches_enumeration():
    # three sigma values; the alternative location 2 * sigma is inside the
    # region for sigma in {0.5, 1} (the statistic is identically 1 there), so
    # only sigma = 2 contributes, where T < t iff x > lam(t)
    prior = KnownPrior(((0.9, PointMass(0.0)), (0.1, PointMass(_twice_sigma))))
    law = DiscreteSigma((0.5, 1.0, 2.0))
    region = left_ray(2.0)
    for t in (0.05, 0.2, 0.5, 0.8):
        lam = 2.0 + math.log(9.0 * (1.0 - t) / t)
        null_tail = 0.9 * gauss_sf(lam / 2.0)
        alt_tail = 0.1 * gauss_sf((lam - 4.0) / 2.0)
        want = (null_tail / 3.0) / ((null_tail + alt_tail) / 3.0)
        got = oracle_mfdr(prior, law, region, t)
        assert got == pytest.approx(want, abs=1e-6)


def test_discrete_scenario_threshold_is_calibrated():
    prior = KnownPrior(((0.9, PointMass(0.0)), (0.1, PointMass(_twice_sigma))))
    law = DiscreteSigma((0.5, 1.0, 2.0))
    region = left_ray(2.0)
    res = oracle_threshold(prior, law, region, alpha=0.1)
    assert res.regime == "interior"
    assert 0.1 - 1e-4 <= res.q_value <= 0.1
    assert oracle_mfdr(prior, law, region, res.t_star) == pytest.approx(
        res.q_value, abs=1e-12
    )


def test_gaussian_component_mfdr_matches_quadrature():
    # point null at 0 plus a N(3, 1) alternative component at a single sigma;
    # the joint null mass P(X > lam, mu <= 1) is checked against 1-D quadrature
    prior = KnownPrior(((0.8, PointMass(0.0)), (0.2, GaussianComponent(3.0, 1.0)),))
    law = DiscreteSigma((1.0,))
    region = left_ray(1.0)

    def stat(x):
        point = 0.8 * gauss_pdf(x, 0.0, 1.0)
        marg = 0.2 * gauss_pdf(x, 3.0, math.sqrt(2.0))
        post_mean = (x + 3.0) / 2.0
        post_sd = math.sqrt(0.5)
        f0 = point + marg * gauss_cdf((1.0 - post_mean) / post_sd)
        return f0 / (point + marg)

    for t in (0.1, 0.3, 0.6):
        lam = brentq(lambda x: stat(x) - t, -5.0, 20.0, xtol=1e-12)
        point_null = 0.8 * gauss_sf(lam)
        gauss_joint = 0.2 * quad(
            lambda u: gauss_pdf(u, 3.0, 1.0) * gauss_sf(lam - u),
            -12.0,
            1.0,
            epsabs=1e-13,
            epsrel=1e-11,
        )[0]
        den = point_null + 0.2 * gauss_sf((lam - 3.0) / math.sqrt(2.0))
        want = (point_null + gauss_joint) / den
        got = oracle_mfdr(prior, law, region, t)
        assert got == pytest.approx(want, abs=1e-6)


def test_z_threshold_validation():
    with pytest.raises(NotImplementedError, match="left-ray"):
        z_oracle_threshold(SPARSE_RAY_PRIOR, WIDE_UNIFORM, interval(-1.0, 1.0), 0.1)
    shifted = KnownPrior(((0.9, PointMass(-1.0)), (0.1, PointMass(_pow15))))
    with pytest.raises(ValueError, match="null components at 0"):
        z_oracle_threshold(shifted, WIDE_UNIFORM, ORIGIN_RAY, 0.1)
    two_alts = KnownPrior(
        ((0.8, PointMass(0.0)), (0.1, PointMass(1.0)), (0.1, PointMass(2.0)))
    )
    with pytest.raises(ValueError, match="single alternative"):
        z_oracle_threshold(two_alts, WIDE_UNIFORM, ORIGIN_RAY, 0.1)
