"""Velocity-parameterized diffusion over whole L_f trajectories.

Forward corruption ``x_tau = alpha*x0 + sigma*eps`` on a cosine schedule,
velocity target ``v = alpha*eps - sigma*x0``, clean estimate
``x0_hat = alpha*x_tau - sigma*v`` and a deterministic DDIM sampler on the
uniform grid ``tau_t = t/T`` ending exactly at ``tau_0 = 0``.

All trajectory arguments are tensors whose last axis is the horizon; ``tau``
is a float or a tensor with one entry per leading batch row.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np
import torch

from hydrodiffusion.errors import ArgumentError, NumericError
from hydrodiffusion.models import DiffusionConfig
from hydrodiffusion.numerics import gaussian_sample

logger = logging.getLogger(__name__)


class Denoiser(Protocol):
    """Anything that maps ``(x_tau, tau, cond)`` to a velocity estimate."""

    def __call__(self, x_tau: torch.Tensor, tau: torch.Tensor, cond: Any) -> torch.Tensor: ...


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedulePoint:
    alpha: float
    sigma: float


def _check_tau(tau: torch.Tensor) -> None:
    if not torch.all((tau >= 0.0) & (tau <= 1.0)):
        raise ArgumentError(f"Diffusion time must lie in [0, 1], got {tau.tolist()}")


def alpha_sigma(tau: torch.Tensor | float) -> tuple[torch.Tensor, torch.Tensor]:
    """Cosine schedule ``(cos(pi*tau/2), sin(pi*tau/2))`` with exact endpoints."""
    tau = torch.as_tensor(tau, dtype=torch.float64)
    _check_tau(tau)
    half_pi = 0.5 * math.pi
    alpha = torch.where(tau == 1.0, torch.zeros_like(tau), torch.cos(half_pi * tau))
    sigma = torch.where(tau == 1.0, torch.ones_like(tau), torch.sin(half_pi * tau))
    return alpha, sigma


def schedule_at(tau: float) -> NoiseSchedulePoint:
    alpha, sigma = alpha_sigma(float(tau))
    return NoiseSchedulePoint(alpha=alpha.item(), sigma=sigma.item())


def _coefficients(tau: torch.Tensor | float, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    alpha, sigma = alpha_sigma(tau)
    alpha = alpha.to(like.dtype)
    sigma = sigma.to(like.dtype)
    if alpha.ndim == 1:
        # one tau per batch row, broadcast over the horizon
        alpha = alpha.unsqueeze(-1)
        sigma = sigma.unsqueeze(-1)
    return alpha, sigma


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ArgumentError(f"Trajectory shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# Forward process and parameterization
# ---------------------------------------------------------------------------


def forward_noise(x0: torch.Tensor, eps: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    _check_same_shape(x0, eps)
    alpha, sigma = _coefficients(tau, x0)
    return alpha * x0 + sigma * eps


def velocity_target(x0: torch.Tensor, eps: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    _check_same_shape(x0, eps)
    alpha, sigma = _coefficients(tau, x0)
    return alpha * eps - sigma * x0


def clean_estimate(x_tau: torch.Tensor, v: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    _check_same_shape(x_tau, v)
    alpha, sigma = _coefficients(tau, x_tau)
    return alpha * x_tau - sigma * v


def velocity_loss(
    model: Denoiser,
    x0: torch.Tensor,
    cond: Any,
    rng: np.random.Generator | None = None,
    *,
    tau: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared velocity error over batch and horizon.

    One ``tau ~ U[0, 1)`` and one ``eps ~ N(0, I)`` are drawn per batch row from
    ``rng`` unless given explicitly.

    Args:
        model: Denoiser called as ``model(x_tau, tau, cond)``.
        x0: Clean normalized trajectories, shape (B, L_f).
        cond: Conditioning batch passed through to the model.
        rng: Source of tau and eps draws.
        tau: Optional fixed diffusion times, shape (B,).
        eps: Optional fixed noise, shape (B, L_f).
    """
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ArgumentError(f"x0 must be a non-empty (B, L_f) batch, got {tuple(x0.shape)}")
    batch = x0.shape[0]
    if tau is None or eps is None:
        if rng is None:
            raise ArgumentError("velocity_loss needs an rng unless tau and eps are both given")
    if tau is None:
        tau = torch.from_numpy(rng.uniform(0.0, 1.0, size=batch))
    if eps is None:
        eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape)))
    tau = torch.as_tensor(tau, dtype=x0.dtype).reshape(batch)
    eps = eps.to(x0.dtype)

    x_tau = forward_noise(x0, eps, tau)
    target = velocity_target(x0, eps, tau)
    prediction = model(x_tau, tau, cond)
    if not torch.isfinite(prediction).all():
        raise NumericError("Denoiser produced non-finite velocity")
    return torch.mean((prediction - target) ** 2)


# ---------------------------------------------------------------------------
# DDIM sampling
# ---------------------------------------------------------------------------


def _raise_if_nonfinite(x: torch.Tensor, what: str, step: int) -> None:
    finite = torch.isfinite(x).reshape(x.shape[0], -1).all(dim=1)
    if not finite.all():
        row = int((~finite).nonzero()[0, 0])
        raise NumericError(f"Non-finite {what} in DDIM sampler", step=step, member=row)


@torch.no_grad()
def ddim_integrate(
    model: Denoiser, cond: Any, x_start: torch.Tensor, cfg: DiffusionConfig
) -> torch.Tensor:
    """Run the deterministic sampler from given start noise (shape (B, L_f)).

    Rows are independent trajectories; a non-finite row raises NumericError
    carrying the step index and the row as ``member``.
    """
    steps = cfg.sample_steps
    if steps < 1:
        raise ArgumentError("sample_steps must be >= 1")
    x = x_start.clone()
    batch = x.shape[0]
    for t in range(steps, 0, -1):
        tau_t = t / steps
        tau_prev = (t - 1) / steps
        a_t, s_t = (c.item() for c in alpha_sigma(tau_t))
        a_prev, s_prev = (c.item() for c in alpha_sigma(tau_prev))

        v = model(x, torch.full((batch,), tau_t, dtype=x.dtype), cond)
        _raise_if_nonfinite(v, "velocity", t)
        x0_hat = a_t * x - s_t * v
        if cfg.noise_direction == "epsilon_hat":
            direction = s_t * x + a_t * v
        else:
            direction = v
        x = a_prev * x0_hat + s_prev * direction
        _raise_if_nonfinite(x, "state", t)
    return x


def ddim_sample(
    model: Denoiser, cond: Any, cfg: DiffusionConfig, seed: int, horizon: int = 8
) -> torch.Tensor:
    """One trajectory of length ``horizon`` from a single-row conditioning batch."""
    x_start = gaussian_sample((1, horizon), seed)
    return ddim_integrate(model, cond, x_start, cfg)[0]


def generate_ensemble(
    model: Denoiser,
    cond: Any,
    members: int,
    root_seed: int,
    cfg: DiffusionConfig,
    horizon: int = 8,
) -> torch.Tensor:
    """``members`` trajectories, member m drawn from stream ``(root_seed, m)``.

    ``cond`` is a single-row conditioning batch; it is repeated per member and
    all members are integrated as one batch. Returns shape (M, horizon) in the
    model's (normalized) space.
    """
    if members < 1:
        raise ArgumentError(f"Ensemble size must be >= 1, got {members}")
    x_start = torch.stack([gaussian_sample(horizon, root_seed, stream=m) for m in range(members)])
    return ddim_integrate(model, cond.repeat(members), x_start, cfg)
