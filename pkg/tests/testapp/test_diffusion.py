from __future__ import annotations

import pytest
import torch
from django.test import SimpleTestCase

from instance_rsr.diffusion import (
    NoiseSchedule,
    inference_timesteps,
    sample,
    sample_timesteps,
)
from instance_rsr.exceptions import ConfigError, ShapeError
from instance_rsr.utils import make_generator


def zero_denoiser(z_t, t, cond):
    return torch.zeros_like(z_t)


class NoiseScheduleTests(SimpleTestCase):
    def test_linear(self):
        schedule = NoiseSchedule.linear(T=1000)
        assert schedule.T == 1000
        assert float(schedule.alpha_bars[0]) == 1.0
        assert abs(float(schedule.betas[1]) - 1e-4) <= 1e-12
        assert abs(float(schedule.betas[1000]) - 2e-2) <= 1e-12

    def test_strictly_decreasing(self):
        for kind in ("linear", "cosine"):
            for T in (10, 100, 1000):
                alpha_bars = NoiseSchedule.build(kind, T).alpha_bars
                assert bool((alpha_bars[1:] < alpha_bars[:-1]).all())
                assert bool((alpha_bars[1:] > 0).all())

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            NoiseSchedule.build("sigmoid", 10)

    def test_invalid_T(self):
        with pytest.raises(ConfigError):
            NoiseSchedule.linear(T=0)

    def test_invalid_betas(self):
        with pytest.raises(ConfigError):
            NoiseSchedule.from_betas(torch.tensor([0.1, 1.0]))


class ForwardProcessTests(SimpleTestCase):
    def test_iterated_steps_match_marginal_moments(self):
        schedule = NoiseSchedule.linear(T=10)
        generator = make_generator(0)
        z_0 = torch.ones(200_000, dtype=torch.float64)
        z = z_0
        for t in range(1, 11):
            z = schedule.forward_step(z, t, generator)
            if t in (1, 5, 10):
                alpha_bar = float(schedule.alpha_bars[t])
                mean, var = alpha_bar**0.5, 1.0 - alpha_bar
                assert abs(float(z.mean()) - mean) <= 0.03 * mean
                assert abs(float(z.var()) - var) <= 0.03 * var

    def test_marginal_at_zero_is_clean(self):
        schedule = NoiseSchedule.linear(T=10)
        z_0 = torch.rand(3, 4, dtype=torch.float64)
        assert torch.equal(schedule.forward_marginal(z_0, 0, torch.randn(3, 4)), z_0)

    def test_marginal_per_sample_timesteps(self):
        schedule = NoiseSchedule.linear(T=10)
        z_0 = torch.ones(2, 3, 3, dtype=torch.float64)
        eps = torch.zeros_like(z_0)
        out = schedule.forward_marginal(z_0, torch.tensor([1, 10]), eps)
        assert abs(float(out[0, 0, 0]) - float(schedule.alpha_bars[1]) ** 0.5) <= 1e-12
        assert abs(float(out[1, 0, 0]) - float(schedule.alpha_bars[10]) ** 0.5) <= 1e-12

    def test_timestep_out_of_range(self):
        schedule = NoiseSchedule.linear(T=10)
        with pytest.raises(ConfigError):
            schedule.forward_step(torch.zeros(2), 11)

    def test_marginal_shape_mismatch(self):
        schedule = NoiseSchedule.linear(T=10)
        with pytest.raises(ShapeError, match="eps shape"):
            schedule.forward_marginal(torch.zeros(2, 3), 1, torch.zeros(3, 2))

    def test_marginal_timesteps_out_of_range(self):
        schedule = NoiseSchedule.linear(T=10)
        with pytest.raises(ConfigError, match="out of range"):
            z_0 = torch.zeros(2, 3)
            schedule.forward_marginal(z_0, torch.tensor([1, 11]), torch.zeros_like(z_0))


class ReverseStepTests(SimpleTestCase):
    def test_ddim_exact_inversion(self):
        schedule = NoiseSchedule.linear(T=10)
        generator = make_generator(1)
        z_0 = torch.randn(4, 4, 6, generator=generator, dtype=torch.float64)
        eps = torch.randn(4, 4, 6, generator=generator, dtype=torch.float64)
        for t in range(1, 11):
            z_t = schedule.forward_marginal(z_0, t, eps)
            output = schedule.ddim_step(z_t, eps, t, 0)
            assert float((output.prev_sample - z_0).abs().max()) <= 1e-5

    def test_ddim_eta_zero_deterministic(self):
        schedule = NoiseSchedule.linear(T=10)
        z_t = torch.randn(2, 3, dtype=torch.float64)
        eps = torch.randn(2, 3, dtype=torch.float64)
        first = schedule.ddim_step(z_t, eps, 7, 3).prev_sample
        second = schedule.ddim_step(z_t, eps, 7, 3).prev_sample
        assert torch.equal(first, second)

    def test_ddim_invalid_order(self):
        schedule = NoiseSchedule.linear(T=10)
        with pytest.raises(ConfigError):
            schedule.ddim_step(torch.zeros(2), torch.zeros(2), 3, 3)

    def test_ddim_negative_eta(self):
        schedule = NoiseSchedule.linear(T=10)
        with pytest.raises(ConfigError):
            schedule.ddim_step(torch.zeros(2), torch.zeros(2), 3, 1, eta=-0.1)

    def test_ancestral_last_step_is_mean(self):
        schedule = NoiseSchedule.linear(T=10)
        z_t = torch.randn(5, dtype=torch.float64)
        eps = torch.randn(5, dtype=torch.float64)
        first = schedule.ancestral_step(z_t, eps, 1, make_generator(0)).prev_sample
        second = schedule.ancestral_step(z_t, eps, 1, make_generator(1)).prev_sample
        assert torch.equal(first, second)


class InferenceTimestepsTests(SimpleTestCase):
    def test_spacing(self):
        timesteps = inference_timesteps(1000, 10)
        assert timesteps[0] == 1000
        assert timesteps[-1] == 0
        assert len(timesteps) == 11
        assert all(a > b for a, b in zip(timesteps, timesteps[1:]))

    def test_more_steps_than_T(self):
        assert inference_timesteps(10, 50) == list(range(10, -1, -1))

    def test_invalid(self):
        with pytest.raises(ConfigError):
            inference_timesteps(10, 0)

    def test_sample_timesteps_range(self):
        t = sample_timesteps(1000, 10, make_generator(0))
        assert int(t.min()) >= 1
        assert int(t.max()) <= 10


class SampleTests(SimpleTestCase):
    def test_deterministic(self):
        schedule = NoiseSchedule.linear(T=10)
        cond = torch.zeros(2, 2, 2, 3, dtype=torch.float64)
        shape = (2, 2, 2, 6)
        first = sample(
            schedule, zero_denoiser, cond, shape, generator=make_generator(4)
        )
        second = sample(
            schedule, zero_denoiser, cond, shape, generator=make_generator(4)
        )
        assert first.shape == (2, 2, 2, 6)
        assert torch.equal(first, second)

    def test_denoiser_receives_batched_timesteps(self):
        seen = []

        def denoiser(z_t, t, cond):
            seen.append(t.tolist())
            return torch.zeros_like(z_t)

        schedule = NoiseSchedule.linear(T=10)
        cond = torch.zeros(3, 1, 1, 3, dtype=torch.float64)
        sample(schedule, denoiser, cond, (3, 1, 1, 3), steps=2)
        assert seen == [[10, 10, 10], [5, 5, 5]]

    def test_ancestral_walks_all_steps(self):
        calls = []

        def denoiser(z_t, t, cond):
            calls.append(int(t[0]))
            return torch.zeros_like(z_t)

        schedule = NoiseSchedule.linear(T=10)
        cond = torch.zeros(1, 1, 1, 3, dtype=torch.float64)
        sample(schedule, denoiser, cond, (1, 1, 1, 3), steps=2, sampler="ancestral")
        assert calls == list(range(10, 0, -1))

    def test_unknown_sampler(self):
        schedule = NoiseSchedule.linear(T=10)
        cond = torch.zeros(1, 1, 1, 3)
        with pytest.raises(ConfigError):
            sample(schedule, zero_denoiser, cond, (1, 1, 1, 3), sampler="euler")
