import numpy as np
import pytest

from stless_sims.unicycle import UnicycleParams, nominal_arc, trajectory


class TestTrajectory:
    def test_zero_noise_matches_closed_form_arc(self):
        params = UnicycleParams(steps=25, dt=0.05, speed=1.3, omega=0.8, psi0=0.4)
        signal = trajectory(np.zeros(25), params)
        arc = nominal_arc(params)
        assert np.allclose(signal[:, :2], arc, atol=1e-12)

    def test_zero_turn_rate_is_straight_line(self):
        params = UnicycleParams(steps=10, dt=0.1, speed=2.0, omega=0.0, psi0=0.0)
        signal = trajectory(np.zeros(10), params)
        assert np.allclose(signal[:, 1], 0.0)
        assert np.allclose(signal[:, 0], 0.2 * np.arange(1, 11))

    def test_row_count_honors_horizon(self):
        params = UnicycleParams(steps=7)
        assert trajectory(np.zeros(7), params).shape == (7, 4)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(0)
        params = UnicycleParams(steps=12)
        batch = rng.standard_normal((5, 12))
        batched = trajectory(batch, params)
        for i in range(5):
            assert np.allclose(batched[i], trajectory(batch[i], params))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        params = UnicycleParams(steps=12)
        w = rng.standard_normal(12)
        assert np.array_equal(trajectory(w, params), trajectory(w, params))


class TestReachProbability:
    def test_monotone_in_goal_radius(self):
        # P(reach within r) under small turn noise shrinks with the radius;
        # estimated with a common batch of 1e5 noise draws.
        params = UnicycleParams(steps=20, dt=0.1, speed=1.0, omega=0.0, goal=(2.0, 0.0))
        rng = np.random.default_rng(2)
        w = rng.standard_normal((100_000, 20)) * 0.8
        dist_goal = trajectory(w, params)[..., 3].min(axis=-1)
        probs = [(dist_goal <= r).mean() for r in (0.3, 0.2, 0.1)]
        assert probs[0] > probs[1] > probs[2] > 0.0
