"""
Tests for the noise schedule and closed-form transitions.
"""

import math

import numpy as np
import pytest

from madiff.errors import RangeError, ValidationError
from madiff.numerics import sample_gaussian, seeded_rng
from madiff.scheduler import (
    Schedule,
    ddim_timesteps,
    forward_sample,
    inversion_step,
    make_schedule,
    mu_f,
    posterior_mean,
    posterior_sample,
    posterior_variance,
    predict_x0,
    reverse_step,
    sigma,
    skip_step,
)


class TestMakeSchedule:
    """Linear beta schedule and its cumulative products."""

    def test_alpha_bar_starts_at_one(self, full_schedule):
        assert full_schedule.alpha_bar[0] == 1.0
        assert full_schedule.beta[0] == 0.0

    def test_alpha_bar_decreasing(self, full_schedule):
        assert np.all(np.diff(full_schedule.alpha_bar) < 0)

    def test_endpoints(self, full_schedule):
        assert full_schedule.beta[1] == pytest.approx(1e-4)
        assert full_schedule.beta[1000] == pytest.approx(0.02)

    def test_arrays_read_only(self, schedule):
        with pytest.raises(ValueError):
            schedule.beta[1] = 0.5

    @pytest.mark.parametrize("T,start,end", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 0.01), (10, 0.1, 1.0)])
    def test_invalid_parameters(self, T, start, end):
        with pytest.raises(ValidationError):
            make_schedule(T, start, end)

    def test_dict_round_trip(self, schedule):
        copy = Schedule.from_dict(schedule.to_dict())
        np.testing.assert_array_equal(copy.alpha_bar, schedule.alpha_bar)


class TestForwardProcess:
    """Forward marginal and posterior."""

    def test_t_zero_is_identity(self, schedule, image):
        eps = np.ones_like(image)
        np.testing.assert_array_equal(forward_sample(image, 0, eps, schedule), image)

    def test_t_out_of_range(self, schedule, image):
        with pytest.raises(RangeError):
            forward_sample(image, schedule.T + 1, image, schedule)

    def test_marginal_moments(self, schedule):
        """Monte Carlo mean and variance of q(x_t | x_0) within 3 standard errors."""
        t = 20
        x0 = np.full(20000, 0.5)
        eps, _ = sample_gaussian(seeded_rng(4), (20000,))
        samples = forward_sample(x0, t, eps, schedule)
        ab = schedule.alpha_bar[t]
        var = 1.0 - ab
        se_mean = math.sqrt(var / samples.size)
        se_var = var * math.sqrt(2.0 / (samples.size - 1))
        assert abs(samples.mean() - math.sqrt(ab) * 0.5) < 3 * se_mean
        assert abs(samples.var(ddof=1) - var) < 3 * se_var

    def test_posterior_at_one_returns_x0(self, schedule, image):
        rng = seeded_rng(0)
        sample, rng_after = posterior_sample(image, image * 0.3, 1, schedule, rng)
        np.testing.assert_array_equal(sample, image)
        assert rng_after == rng

    def test_posterior_mean_shape_checked(self, schedule, image):
        with pytest.raises(Exception):
            posterior_mean(image, image[:-1], 5, schedule)


class TestReverseParameterisation:
    """sigma, mu_f and the deterministic reverse chain."""

    def test_sigma_gamma_one_matches_posterior_variance(self, full_schedule):
        for t in range(2, full_schedule.T + 1):
            expected = posterior_variance(t, full_schedule)
            assert sigma(t, 1.0, full_schedule) ** 2 == pytest.approx(expected, rel=1e-10)

    def test_sigma_zero_for_gamma_zero(self, schedule):
        assert all(sigma(t, 0.0, schedule) == 0.0 for t in range(1, schedule.T + 1))

    def test_sigma_zero_at_first_step(self, schedule):
        assert sigma(1, 1.0, schedule) == 0.0

    def test_gamma_out_of_range(self, schedule):
        with pytest.raises(RangeError):
            sigma(3, 1.5, schedule)

    def test_predict_x0_inverts_forward(self, schedule, image):
        eps, _ = sample_gaussian(seeded_rng(2), image.shape)
        x_t = forward_sample(image, 30, eps, schedule)
        np.testing.assert_allclose(predict_x0(x_t, eps, 30, schedule), image, atol=1e-10)

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 1.0])
    def test_perfect_eps_chain_recovers_x0(self, schedule, image, gamma):
        """With the true noise fed at every step the chain lands on x0."""
        eps, _ = sample_gaussian(seeded_rng(5), image.shape)
        x = forward_sample(image, schedule.T, eps, schedule)
        noise = np.zeros_like(image)
        for t in range(schedule.T, 0, -1):
            ab = schedule.alpha_bar[t]
            eps_t = (x - math.sqrt(ab) * image) / math.sqrt(1.0 - ab)
            x = reverse_step(x, eps_t, t, gamma, noise, schedule)
        np.testing.assert_allclose(x, image, atol=1e-4)

    def test_mu_f_shape_checked(self, schedule, image):
        with pytest.raises(Exception):
            mu_f(image, image[:, :-1], 4, 1.0, schedule)


class TestSkipSampler:
    """Timestep subsequences and deterministic inversion."""

    def test_timesteps_descending_and_bounded(self):
        steps = ddim_timesteps(20, 180)
        assert steps[0] == 180
        assert steps == sorted(steps, reverse=True)
        assert min(steps) >= 1
        assert len(steps) == 20

    def test_timesteps_capped_by_K(self):
        assert ddim_timesteps(50, 5) == [5, 4, 3, 2, 1]

    def test_timesteps_invalid(self):
        with pytest.raises(ValidationError):
            ddim_timesteps(0, 10)

    def test_inversion_then_skip_is_identity_with_fixed_eps(self, schedule, image):
        eps = np.zeros_like(image) + 0.1
        x_t = inversion_step(image, eps, 0, 25, schedule)
        back = skip_step(x_t, eps, 25, 0, schedule)
        np.testing.assert_allclose(back, image, atol=1e-10)

    def test_skip_step_order_checked(self, schedule, image):
        with pytest.raises(RangeError):
            skip_step(image, image, 5, 5, schedule)

    def test_inversion_order_checked(self, schedule, image):
        with pytest.raises(RangeError):
            inversion_step(image, image, 5, 3, schedule)
