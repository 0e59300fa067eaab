import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from stless.blackbox import (
    BlackboxSampler,
    BoConfig,
    CallableRunFunction,
    EllipseObjective,
    GpModel,
    LipschitzState,
    SimulationBudgetExceeded,
    SimulatorError,
    blackbox_verify,
    bo_sample,
    lipschitz_sample,
    robustness_on_ellipse,
)
from stless.ess import AngularDomain, Ellipse, LinearStlSampler, TWO_PI, active_segments
from stless.hdr import VerifyConfig, verify
from stless.lingauss import LtvSystem, unroll
from stless.rng import substream
from stless.stl import negate, parse


def identity_run(q=2, budget=None):
    return CallableRunFunction(
        lambda w: w[None, :], l=q, channels=tuple(f"x{i+1}" for i in range(q)),
        horizon=1, budget=budget,
    )


def corner_spec(beta=-2.0, channels=("x1", "x2")):
    c = -beta
    return parse(
        f"!((x1 - {c} >= 0 & x2 - {c} >= 0) | (-x1 - {c} >= 0 & x2 - {c} >= 0))",
        channels,
    )


class TestRunFunctions:
    def test_counts_invocations(self):
        run = identity_run()
        run(np.zeros(2))
        run(np.ones(2))
        assert run.calls == 2

    def test_budget_enforced(self):
        run = identity_run(budget=3)
        for _ in range(3):
            run(np.zeros(2))
        with pytest.raises(SimulationBudgetExceeded):
            run(np.zeros(2))

    def test_bad_shape_is_simulator_error(self):
        run = CallableRunFunction(lambda w: w[None, :], l=2, channels=("a",), horizon=1)
        with pytest.raises(SimulatorError):
            run(np.zeros(2))


class TestEllipseObjective:
    def test_linear_composition(self):
        run = identity_run()
        phi = parse("x1 >= 0", ("x1", "x2"))
        w0 = np.array([0.3, -1.0])
        w1 = np.array([-0.4, 2.0])
        obj = robustness_on_ellipse(run, phi, w0, w1)
        for theta in np.linspace(0, TWO_PI, 9):
            expected = w0[0] * np.cos(theta) + w1[0] * np.sin(theta)
            assert obj(theta) == pytest.approx(expected, abs=1e-12)

    def test_theta_zero_reproduces_anchor(self):
        run = identity_run()
        phi = parse("x1 - 1 >= 0", ("x1", "x2"))
        w0 = np.array([2.5, 0.0])
        obj = robustness_on_ellipse(run, phi, w0, np.array([0.0, 1.0]))
        assert obj(0.0) == pytest.approx(1.5)

    def test_cache_contract(self):
        run = identity_run()
        phi = parse("x1 >= 0", ("x1", "x2"))
        obj = robustness_on_ellipse(run, phi, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        obj(1.234)
        calls = run.calls
        obj(1.234)
        assert run.calls == calls

    def test_two_pi_wraps_to_zero(self):
        run = identity_run()
        phi = parse("x1 >= 0", ("x1", "x2"))
        obj = robustness_on_ellipse(run, phi, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        a = obj(0.0)
        calls = run.calls
        assert obj(TWO_PI) == a
        assert run.calls == calls


class TestLipschitzSample:
    def make_objective(self, w0, seed=0):
        run = identity_run()
        phi = parse("x1 - 1 >= 0", ("x1", "x2"))
        w1 = substream(seed, "aux").standard_normal(2)
        return run, EllipseObjective(run, phi, np.asarray(w0, float), w1)

    def test_feasible_first_candidate_costs_two_sims(self):
        run, obj = self.make_objective([5.0, 0.0], seed=1)
        state = LipschitzState(M=10.0)
        rng = substream(2, "lip")
        theta, rho = lipschitz_sample(obj, -4.0, state, rng)
        assert rho >= -4.0
        assert run.calls == 2  # anchor evaluation + the accepted candidate

    def test_exclusion_radius(self):
        # deficit d at an infeasible candidate removes (theta - d/M, theta + d/M)
        run, obj = self.make_objective([2.0, 0.0], seed=3)
        state = LipschitzState(M=4.0)
        rng = substream(4, "lip")
        theta, rho = lipschitz_sample(obj, 0.5, state, rng)
        assert rho >= 0.5

    def test_domain_exhaustion_inflates_m(self):
        # Start with an absurdly small M: elimination overshoots, empties the
        # domain, and M must grow until a feasible angle survives.
        run, obj = self.make_objective([2.0, 0.0], seed=5)
        state = LipschitzState(M=1e-6)
        rng = substream(6, "lip")
        theta, rho = lipschitz_sample(obj, 0.5, state, rng)
        assert rho >= 0.5
        assert state.M > 1e-6

    def test_soundness_of_elimination(self):
        # With M at least the true slope bound, no feasible angle is excluded:
        # run the elimination loop manually and compare against closed form.
        run = identity_run()
        phi = parse("x1 - 1 >= 0", ("x1", "x2"))
        psi_planes_a = np.array([[1.0, 0.0]])
        psi_planes_c = np.array([-1.0])
        rng = substream(7, "sound")
        for _ in range(20):
            w0 = np.array([float(rng.uniform(1.5, 4.0)), float(rng.standard_normal())])
            w1 = rng.standard_normal(2)
            obj = EllipseObjective(run, phi, w0, w1)
            true_m = math.hypot(
                float(psi_planes_a[0] @ w0), float(psi_planes_a[0] @ w1)
            )
            ellipse = Ellipse(anchor=w0, auxiliary=w1, mean=np.zeros(2))
            feasible = active_segments(
                ellipse, lambda p: p[:, 0] - 1.0, 0.0, psi_planes_a, psi_planes_c,
                anchor_rho=w0[0] - 1.0,
            )
            domain = AngularDomain.full()
            for _ in range(40):
                theta = domain.sample(rng)
                rho = obj(theta)
                if rho >= 0.0:
                    break
                domain = domain.subtract(theta, (0.0 - rho) / (true_m * 1.0001))
            # every feasible angle still inside the candidate domain
            for start, length in feasible.arcs:
                for frac in (0.1, 0.5, 0.9):
                    assert domain.contains((start + frac * length) % TWO_PI, tol=1e-9)

    def test_anchor_never_excluded(self):
        run, obj = self.make_objective([3.0, 0.5], seed=8)
        state = LipschitzState(M=None)
        rng = substream(9, "lip")
        for _ in range(10):
            theta, rho = lipschitz_sample(obj, 1.0, state, rng)
            assert rho >= 1.0


class TestGp:
    def test_posterior_interpolates(self):
        gp = GpModel()
        for theta, rho in [(0.0, 1.0), (1.0, 0.2), (2.5, -0.5), (4.0, 0.9)]:
            gp.register(theta, rho)
        grid = np.array([0.0, 1.0, 2.5, 4.0])
        mean, std = gp.posterior(grid)
        assert np.allclose(mean, [1.0, 0.2, -0.5, 0.9], atol=1e-2)
        assert np.all(std >= 0.0)

    def test_bo_sample_matches_closed_form_arcs(self):
        # identity run, one linear predicate: the surrogate active set must
        # match the analytic arcs at the endpoints within 0.05 rad.
        run = identity_run()
        phi = parse("x1 - 1 >= 0", ("x1", "x2"))
        w0 = np.array([2.0, 0.3])
        w1 = np.array([0.5, -1.2])
        obj = EllipseObjective(run, phi, w0, w1)
        gp = GpModel()
        grid = np.linspace(0.0, TWO_PI, 721)
        for theta in np.linspace(0, TWO_PI, 41):
            gp.register(float(theta), obj(float(theta)))
        mean, _ = gp.posterior(grid)
        est_mask = mean >= 0.0
        ellipse = Ellipse(anchor=w0, auxiliary=w1, mean=np.zeros(2))
        exact = active_segments(
            ellipse, lambda p: p[:, 0] - 1.0, 0.0, np.array([[1.0, 0.0]]),
            np.array([-1.0]), anchor_rho=w0[0] - 1.0,
        )
        true_mask = np.array([exact.contains(t) for t in grid])
        # disagreement only within 0.05 rad of arc boundaries
        disagree = est_mask != true_mask
        spacing = grid[1] - grid[0]
        max_run = 0
        current = 0
        for d in disagree:
            current = current + 1 if d else 0
            max_run = max(max_run, current)
        assert max_run * spacing <= 0.05

    def test_bo_sample_returns_feasible(self):
        run = identity_run()
        phi = parse("x1 - 1 >= 0", ("x1", "x2"))
        rng = substream(11, "bo")
        for seed in range(5):
            w0 = np.array([2.0 + seed * 0.3, 0.1])
            w1 = substream(seed, "w1").standard_normal(2)
            obj = EllipseObjective(run, phi, w0, w1)
            theta, rho = bo_sample(obj, 0.3, BoConfig(), rng)
            assert rho >= 0.3


class TestBlackboxVerify:
    def test_identity_lipschitz_beta2(self):
        phi = corner_spec(-2.0)
        run = identity_run()
        res = blackbox_verify(run, phi, VerifyConfig(n_ess=150, n_skip=2, seed=21))
        analytic = 1.0352e-3
        assert 0.5 * analytic <= res.p_estimate <= 2.0 * analytic
        assert res.simulations_used == run.calls

    def test_nonlinear_run_product_tails(self):
        # y = [w1^2, w2]; failure needs w1^2 >= 4 and w2 >= 2:
        # p = P(|w1| >= 2) P(w2 >= 2) = 2 (1 - Phi(2))^2
        def fn(w):
            return np.array([[w[0] ** 2, w[1]]])

        run = CallableRunFunction(fn, l=2, channels=("y1", "y2"), horizon=1)
        phi = parse("!(y1 - 4 >= 0 & y2 - 2 >= 0)", ("y1", "y2"))
        res = blackbox_verify(run, phi, VerifyConfig(n_ess=150, n_skip=2, seed=22))
        analytic = 1.0352e-3
        assert 0.35 * analytic <= res.p_estimate <= 2.8 * analytic

    def test_identity_bijector_bit_identical(self):
        from stless.warp import identity as identity_bijector

        phi = corner_spec(-1.5)
        res_plain = blackbox_verify(
            identity_run(), phi, VerifyConfig(n_ess=60, n_skip=1, seed=23)
        )
        res_bij = blackbox_verify(
            identity_run(), phi, VerifyConfig(n_ess=60, n_skip=1, seed=23),
            bijector=identity_bijector(),
        )
        assert res_plain.p_estimate == res_bij.p_estimate
        assert np.array_equal(res_plain.failure_samples, res_bij.failure_samples)

    def test_budget_exceeded_raises(self):
        phi = corner_spec(-2.0)
        run = identity_run(budget=500)
        with pytest.raises(SimulationBudgetExceeded):
            blackbox_verify(run, phi, VerifyConfig(n_ess=100, n_skip=2, seed=24))


class TestSamplerInterchangeability:
    def test_ks_against_linear_closed_form(self):
        # Stationary marginals of the blackbox chains match the closed-form
        # linear sampler on the identity run (KS at the 1% level).
        phi = corner_spec(-1.0)
        sys = LtvSystem(n=2, m=0, q=0, N=1, mu0=[0.0, 0.0], Sigma0=np.eye(2))
        linear = LinearStlSampler(unroll(sys), phi)

        def run_chain(sampler, seed, count, threshold=0.0):
            rng = substream(seed, "chain")
            x, rho = sampler.initial(rng)
            while rho < threshold:
                x, rho = sampler.initial(rng)
            out = np.empty((count, 2))
            for i in range(count):
                for _ in range(4):
                    x, rho = sampler.step(x, rho, threshold, rng)
                out[i] = x
            return out

        count = 2000
        ref = run_chain(linear, 31, count)
        lip = run_chain(BlackboxSampler(identity_run(), phi, method="lipschitz"), 32, count)
        bo = run_chain(
            BlackboxSampler(identity_run(), phi, method="bo"), 33, count
        )
        assert ks_2samp(ref[:, 0], lip[:, 0]).pvalue > 0.01
        assert ks_2samp(ref[:, 0], bo[:, 0]).pvalue > 0.01
