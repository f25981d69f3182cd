"""Tests for the cosine schedule, the velocity parameterization and the DDIM sampler."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrodiffusion.diffusion import (
    alpha_sigma,
    clean_estimate,
    ddim_integrate,
    ddim_sample,
    forward_noise,
    generate_ensemble,
    schedule_at,
    velocity_loss,
    velocity_target,
)
from hydrodiffusion.errors import ArgumentError, NumericError
from hydrodiffusion.models import DiffusionConfig
from hydrodiffusion.numerics import gaussian_sample
from tests.helpers import random_cond, toy_backbone


class _Oracle:
    """Denoiser that knows the clean trajectory and returns the exact velocity."""

    def __init__(self, x0: torch.Tensor) -> None:
        self.x0 = x0
        self.calls: list[torch.Tensor] = []

    def __call__(self, x, tau, cond):
        self.calls.append(tau.clone())
        alpha, sigma = alpha_sigma(tau)
        alpha = alpha.unsqueeze(-1)
        sigma = sigma.unsqueeze(-1)
        eps = (x - alpha * self.x0) / sigma
        return alpha * eps - sigma * self.x0


class _ConditionedMean:
    """Velocity of a point mass at ``cond.static.sum(-1)``, broadcast over the horizon."""

    def __call__(self, x, tau, cond):
        target = cond.static.sum(-1, keepdim=True).expand_as(x)
        alpha, sigma = alpha_sigma(tau)
        alpha = alpha.unsqueeze(-1)
        sigma = sigma.unsqueeze(-1)
        eps = (x - alpha * target) / sigma
        return alpha * eps - sigma * target


class TestSchedule:
    def test_unit_circle(self):
        taus = torch.linspace(0.0, 1.0, 101)
        alpha, sigma = alpha_sigma(taus)
        torch.testing.assert_close(alpha**2 + sigma**2, torch.ones(101), rtol=0, atol=1e-14)

    def test_exact_endpoints(self):
        start = schedule_at(0.0)
        end = schedule_at(1.0)
        assert (start.alpha, start.sigma) == (1.0, 0.0)
        assert (end.alpha, end.sigma) == (0.0, 1.0)

    def test_midpoint(self):
        point = schedule_at(0.5)
        assert point.alpha == pytest.approx(math.sqrt(0.5))
        assert point.sigma == pytest.approx(math.sqrt(0.5))

    @pytest.mark.parametrize("tau", [-0.01, 1.01])
    def test_out_of_range_raises(self, tau):
        with pytest.raises(ArgumentError):
            alpha_sigma(tau)


class TestParameterization:
    @settings(max_examples=40, deadline=None)
    @given(tau=st.floats(min_value=0.0, max_value=1.0), seed=st.integers(min_value=0, max_value=2**31))
    def test_clean_estimate_recovers_x0(self, tau, seed):
        x0 = gaussian_sample((3, 8), seed, stream=0)
        eps = gaussian_sample((3, 8), seed, stream=1)
        x_tau = forward_noise(x0, eps, tau)
        v = velocity_target(x0, eps, tau)
        torch.testing.assert_close(clean_estimate(x_tau, v, tau), x0, rtol=0, atol=1e-12)

    def test_per_row_tau(self):
        x0 = torch.ones(2, 4)
        eps = torch.zeros(2, 4)
        x_tau = forward_noise(x0, eps, torch.tensor([0.0, 1.0]))
        torch.testing.assert_close(x_tau[0], torch.ones(4))
        torch.testing.assert_close(x_tau[1], torch.zeros(4))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ArgumentError):
            forward_noise(torch.zeros(2, 8), torch.zeros(2, 7), 0.5)


class TestVelocityLoss:
    def test_oracle_has_zero_loss(self):
        x0 = gaussian_sample((5, 8), 3)
        loss = velocity_loss(_Oracle(x0), x0, None, np.random.default_rng(0))
        assert loss.item() < 1e-20

    def test_explicit_draws(self):
        x0 = torch.zeros(2, 3)
        eps = torch.ones(2, 3)
        tau = torch.tensor([0.0, 0.0])
        loss = velocity_loss(lambda x, t, c: torch.zeros_like(x), x0, None, tau=tau, eps=eps)
        # v = alpha*eps - sigma*x0 = 1 at tau=0
        assert loss.item() == pytest.approx(1.0)

    def test_rng_required_without_draws(self):
        with pytest.raises(ArgumentError):
            velocity_loss(lambda x, t, c: x, torch.zeros(2, 3), None)

    def test_non_finite_prediction_raises(self):
        with pytest.raises(NumericError):
            velocity_loss(
                lambda x, t, c: torch.full_like(x, float("nan")), torch.zeros(2, 3), None, np.random.default_rng(0)
            )


class TestDdim:
    @pytest.mark.parametrize("steps", [1, 10, 100])
    def test_oracle_recovers_clean_trajectory(self, steps):
        x0 = gaussian_sample((4, 8), 21)
        out = ddim_integrate(_Oracle(x0), None, gaussian_sample((4, 8), 22), DiffusionConfig(sample_steps=steps))
        torch.testing.assert_close(out, x0, rtol=0, atol=1e-8)

    def test_visits_uniform_grid(self):
        x0 = torch.zeros(1, 8)
        oracle = _Oracle(x0)
        ddim_integrate(oracle, None, torch.ones(1, 8), DiffusionConfig(sample_steps=4))
        assert [c.item() for c in oracle.calls] == [1.0, 0.75, 0.5, 0.25]

    def test_non_finite_raises_with_step(self):
        with pytest.raises(NumericError) as info:
            ddim_integrate(
                lambda x, t, c: torch.full_like(x, float("inf")),
                None,
                torch.zeros(2, 8),
                DiffusionConfig(sample_steps=5),
            )
        assert info.value.step == 5
        assert info.value.member == 0

    @pytest.mark.parametrize(
        "direction, scale",
        [("epsilon_hat", 0.5), ("literal_velocity", 0.0)],
    )
    def test_noise_direction_with_zero_velocity(self, direction, scale):
        x_start = gaussian_sample((3, 8), 5)
        cfg = DiffusionConfig(sample_steps=2, noise_direction=direction)
        out = ddim_integrate(lambda x, t, c: torch.zeros_like(x), None, x_start, cfg)
        torch.testing.assert_close(out, scale * x_start, rtol=0, atol=1e-12)

    def test_single_step_ignores_noise_direction(self):
        x0 = gaussian_sample((2, 8), 8)
        x_start = gaussian_sample((2, 8), 9)
        literal = DiffusionConfig(sample_steps=1, noise_direction="literal_velocity")
        out = ddim_integrate(_Oracle(x0), None, x_start, literal)
        torch.testing.assert_close(out, x0, rtol=0, atol=1e-8)


class TestEnsemble:
    def _setup(self):
        cfg = toy_backbone()
        return _ConditionedMean(), random_cond(cfg, 1, seed=4), DiffusionConfig(sample_steps=3)

    def test_reproducible(self):
        model, cond, cfg = self._setup()
        a = generate_ensemble(model, cond, 6, 99, cfg)
        b = generate_ensemble(model, cond, 6, 99, cfg)
        assert torch.equal(a, b)
        assert a.shape == (6, 8)

    def test_prefix_stable_as_members_grow(self):
        model, cond, cfg = self._setup()
        small = generate_ensemble(model, cond, 3, 99, cfg)
        large = generate_ensemble(model, cond, 7, 99, cfg)
        torch.testing.assert_close(large[:3], small, rtol=0, atol=1e-12)

    def test_single_sample_is_member_zero(self):
        model, cond, cfg = self._setup()
        single = ddim_sample(model, cond, cfg, seed=99)
        torch.testing.assert_close(single, generate_ensemble(model, cond, 2, 99, cfg)[0], rtol=0, atol=1e-12)

    def test_point_mass_is_recovered(self):
        model, cond, cfg = self._setup()
        members = generate_ensemble(model, cond, 4, 5, cfg)
        expected = cond.static.sum().expand(4, 8)
        torch.testing.assert_close(members, expected, rtol=0, atol=1e-10)

    def test_zero_members_raises(self):
        model, cond, cfg = self._setup()
        with pytest.raises(ArgumentError):
            generate_ensemble(model, cond, 0, 1, cfg)
