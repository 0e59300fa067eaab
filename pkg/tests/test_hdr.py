import math

import numpy as np
import pytest
from scipy.special import erf

from stless.ess import LinearStlSampler
from stless.hdr import (
    LadderStallError,
    VerifyConfig,
    error_bound,
    mc_estimate,
    next_threshold,
    required_samples,
    variance,
    verify,
)
from stless.lingauss import LtvSystem, unroll
from stless.rng import substream
from stless.stl import parse


def analytic_p(beta: float) -> float:
    return 2.0 * (1.0 - 0.5 * (1.0 + erf(-beta / math.sqrt(2.0)))) ** 2


def corner_benchmark(beta: float):
    """x = w ~ N(0, I2); safe spec forbids the two x2-positive corners."""
    c = -beta
    sys = LtvSystem(n=2, m=0, q=0, N=1, mu0=[0.0, 0.0], Sigma0=np.eye(2))
    spec = f"!((x1 - {c} >= 0 & x2 - {c} >= 0) | (-x1 - {c} >= 0 & x2 - {c} >= 0))"
    phi = parse(spec, sys.state_names)
    return LinearStlSampler(unroll(sys), phi)


class TestNextThreshold:
    def test_median_rule(self):
        assert next_threshold([-5.0, -3.0, -1.0, 2.0]) == -2.0

    def test_terminal_zero(self):
        assert next_threshold([0.5, 1.0, 2.0]) == 0.0

    def test_needs_two(self):
        with pytest.raises(ValueError):
            next_threshold([1.0])


class TestVariance:
    def test_single_nesting(self):
        assert variance([0.5], 100) == pytest.approx(2.5e-3)

    def test_uniform_conditionals_closed_form(self):
        for k in (1, 3, 7):
            for n in (100, 250):
                got = variance([0.5] * k, n)
                want = (0.25 + 1.0 / (4 * n)) ** k - 0.25**k
                assert got == pytest.approx(want, rel=1e-12)

    def test_two_nestings_hand_value(self):
        # (0.25 + 0.001)^2 - 0.0625 = 5.01e-4
        assert variance([0.5, 0.5], 250) == pytest.approx(5.01e-4, rel=1e-12)


class TestErrorBound:
    def test_paper_worked_examples(self):
        b1 = error_bound(2.0, 0.5, 250, 10)
        assert b1 <= 0.0025
        assert b1 == pytest.approx(2.46e-3, abs=1e-4)
        assert error_bound(2.5, 0.5, 250, 10) == pytest.approx(2.8e-5, abs=1e-6)

    def test_lambda_to_one_limit(self):
        assert error_bound(1.0 + 1e-12, 0.5, 250, 10) == pytest.approx(1.0, abs=1e-6)

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            error_bound(0.9, 0.5, 250, 10)
        with pytest.raises(ValueError):
            error_bound(2.0, 1.5, 250, 10)
        with pytest.raises(ValueError):
            error_bound(2.0, 0.5, 0, 10)


class TestRequiredSamples:
    def test_inverts_worked_example(self):
        assert required_samples(2.0, 0.5, 10, 0.0025) == 250

    def test_floor_at_one(self):
        assert required_samples(2.0, 0.5, 10, 1.0) == 1

    def test_monotone_in_k(self):
        values = [required_samples(2.0, 0.5, k, 0.01) for k in (1, 5, 10, 20)]
        assert values == sorted(values)

    def test_consistency_with_bound(self):
        for eps in (0.5, 0.01, 0.0025):
            n = required_samples(2.0, 0.5, 10, eps)
            assert error_bound(2.0, 0.5, n, 10) <= eps + 1e-12
            if n > 1:
                assert error_bound(2.0, 0.5, n - 1, 10) > eps


class TestMcEstimate:
    def test_zero_failures_clopper_pearson(self):
        mc = mc_estimate(lambda rng, n: -np.ones(n), 100, substream(0, "mc"))
        assert mc.p_hat == 0.0
        assert mc.ci_low == 0.0
        assert mc.ci_high == pytest.approx(1.0 - 0.025 ** (1.0 / 100.0), rel=1e-9)

    def test_perfect_failure(self):
        mc = mc_estimate(lambda rng, n: np.ones(n), 50, substream(0, "mc"))
        assert mc.p_hat == 1.0
        assert mc.ci_high == 1.0

    def test_benchmark_within_ci(self):
        sampler = corner_benchmark(-2.0)
        mc = mc_estimate(sampler.mc_rhos, 100_000, substream(1, "mc"))
        assert mc.ci_low <= analytic_p(-2.0) <= mc.ci_high


class TestVerify:
    def test_benchmark_beta2(self):
        sampler = corner_benchmark(-2.0)
        res = verify(sampler, VerifyConfig(n_ess=250, n_skip=5, seed=3))
        assert 0.5 * analytic_p(-2.0) <= res.p_estimate <= 2.0 * analytic_p(-2.0)
        assert res.p_estimate == pytest.approx(np.prod(res.ladder.conditionals), rel=1e-12)
        assert res.simulations_used == sampler.simulations

    def test_expected_nesting_count(self):
        # K approximately ceil(log2(1/q)) for q = analytic p
        sampler = corner_benchmark(-2.0)
        res = verify(sampler, VerifyConfig(n_ess=250, n_skip=5, seed=4))
        expected = math.ceil(math.log2(1.0 / analytic_p(-2.0)))
        assert abs(res.ladder.n_nestings - expected) <= 2

    def test_thresholds_strictly_increasing_and_terminal_zero(self):
        sampler = corner_benchmark(-2.0)
        res = verify(sampler, VerifyConfig(n_ess=100, n_skip=2, seed=5))
        thr = res.ladder.thresholds[1:]
        assert all(b > a for a, b in zip(thr, thr[1:]))
        assert thr[-1] == 0.0

    def test_ladder_monotonicity_and_final_membership(self):
        sampler = corner_benchmark(-2.0)
        res = verify(sampler, VerifyConfig(n_ess=100, n_skip=2, seed=6))
        for record in res.ladder.records[1:]:
            assert np.all(record.rhos >= record.threshold)
        assert np.all(res.failure_rhos >= 0.0)
        # re-checking membership through the monitor never contradicts
        recheck = sampler.rho_batch(res.failure_samples)
        assert np.allclose(recheck, res.failure_rhos)
        assert np.all(recheck >= 0.0)

    def test_final_nesting_size(self):
        sampler = corner_benchmark(-2.0)
        res = verify(sampler, VerifyConfig(n_ess=100, n_skip=2, seed=7))
        assert res.failure_samples.shape[0] >= 100

    def test_conditionals_near_half(self):
        sampler = corner_benchmark(-2.0)
        res = verify(sampler, VerifyConfig(n_ess=250, n_skip=5, seed=8))
        inner = res.ladder.conditionals[1:-1]
        frac = np.mean([(0.4 <= p <= 0.6) for p in inner])
        assert frac >= 0.8

    def test_stall_on_impossible_spec(self):
        # Deterministic x1 = 0 satisfies the spec with margin 1 forever, so
        # the negated robustness is pinned at -1 and the ladder cannot rise.
        sys = LtvSystem(n=1, m=0, q=0, N=1, mu0=[0.0], Sigma0=[[0.0]])
        phi = parse("x1 + 1 >= 0", sys.state_names)
        sampler = LinearStlSampler(unroll(sys), phi)
        with pytest.raises(LadderStallError) as err:
            verify(sampler, VerifyConfig(n_ess=16, n_skip=0, seed=9))
        assert err.value.ladder is not None

    def test_threads_reproduce_serial(self):
        res1 = verify(corner_benchmark(-1.5), VerifyConfig(n_ess=60, n_skip=1, seed=10, threads=1))
        res2 = verify(corner_benchmark(-1.5), VerifyConfig(n_ess=60, n_skip=1, seed=10, threads=4))
        assert res1.p_estimate == res2.p_estimate
        assert np.array_equal(res1.failure_samples, res2.failure_samples)

    def test_unbiasedness_smoke(self):
        # beta = -1: p ~ 3.96e-2; mean of 30 cheap runs within 10%
        target = analytic_p(-1.0)
        estimates = []
        for seed in range(30):
            res = verify(corner_benchmark(-1.0), VerifyConfig(n_ess=100, n_skip=2, seed=seed))
            estimates.append(res.p_estimate)
        assert abs(np.mean(estimates) - target) <= 0.10 * target
