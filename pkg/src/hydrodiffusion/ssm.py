"""S4D-FT: frequency-tuned diagonal state-space layers and the HydroDiffusion backbone.

Each layer owns a diagonal continuous-time state matrix per channel,
``lambda_base = -softplus(theta) + i*omega``, rescaled by two learnable real
scalars (``alpha_r`` on the real part, ``alpha_i`` on the imaginary part),
discretized with a zero-order hold on a learnable step ``dt`` and applied as a
causal convolution whose kernel is computed in closed form.

``n`` stored complex modes stand for ``2n`` real states (conjugate pairs), so
every kernel is ``2*Re(...)`` and stays real.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange, repeat
from torch import nn

from hydrodiffusion.data import ConditioningBatch
from hydrodiffusion.errors import ArgumentError, NumericError
from hydrodiffusion.models import BackboneConfig
from hydrodiffusion.numerics import fft_linear_convolve

logger = logging.getLogger(__name__)

_SMALL_LAMBDA = 1e-12
_MAX_FREQUENCY = 1e4


# ---------------------------------------------------------------------------
# Functional core
# ---------------------------------------------------------------------------


@dataclass
class SsmLayerParams:
    """Complex view of one layer's SSM parameters.

    Attributes:
        lambda_base: (H, n) untuned diagonal state matrix, Re < 0.
        alpha_r: real-part scale, > 0.
        alpha_i: imaginary-part scale.
        B: (n,) input vector shared by all channels.
        C: (H, n) output vectors.
        D: (H,) skip weights.
        log_dt: (H,) log step sizes.
    """

    lambda_base: torch.Tensor
    alpha_r: torch.Tensor
    alpha_i: torch.Tensor
    B: torch.Tensor
    C: torch.Tensor
    D: torch.Tensor
    log_dt: torch.Tensor

    @property
    def tuned(self) -> torch.Tensor:
        return tune_frequencies(self.lambda_base, self.alpha_r, self.alpha_i)


def tune_frequencies(
    lambda_base: torch.Tensor,
    alpha_r: torch.Tensor | float,
    alpha_i: torch.Tensor | float,
) -> torch.Tensor:
    """``alpha_r*Re(lambda) + i*alpha_i*Im(lambda)``, elementwise."""
    if not torch.is_complex(lambda_base):
        raise ArgumentError("lambda_base must be a complex tensor")
    real = lambda_base.real * alpha_r
    imag = lambda_base.imag * alpha_i
    try:
        real, imag = torch.broadcast_tensors(real, imag)
    except RuntimeError as exc:
        raise ArgumentError(f"Tuning scales do not match lambda_base: {exc}") from exc
    return torch.complex(real, imag)


def discretize(
    lam: torch.Tensor, dt: torch.Tensor | float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-order hold: ``abar = exp(lam*dt)``, ``bbar_scale = (abar - 1)/lam``.

    Modes with ``|lam| < 1e-12`` use the series limit ``bbar_scale = dt``.
    ``dt`` broadcasts against ``lam``.
    """
    if not torch.is_complex(lam):
        raise ArgumentError("lambda must be a complex tensor")
    dt = torch.as_tensor(dt, dtype=lam.real.dtype)
    if not torch.all(dt > 0):
        raise ArgumentError("Step size dt must be positive")
    if torch.any(lam.real > 0):
        raise ArgumentError("Re(lambda) must be <= 0 for a stable discretization")
    dt_full = torch.complex(dt, torch.zeros_like(dt)) * torch.ones_like(lam)
    abar = torch.exp(lam * dt_full)
    small = lam.abs() < _SMALL_LAMBDA
    safe = torch.where(small, torch.ones_like(lam), lam)
    bscale = torch.where(small, dt_full, (abar - 1.0) / safe)
    return abar, bscale


def ssm_kernel(params: SsmLayerParams, length: int) -> torch.Tensor:
    """Real convolution kernel per channel, shape (H, length).

    ``K[l] = 2*Re(sum_j C_j * B_j * bbar_scale_j * abar_j**l)``, with the powers
    taken as ``exp(l * lam * dt)``.
    """
    if length < 1:
        raise ArgumentError(f"Kernel length must be >= 1, got {length}")
    lam = params.tuned  # (H, n)
    dt = torch.exp(params.log_dt).unsqueeze(-1)  # (H, 1)
    _, bscale = discretize(lam, dt)
    coeff = params.C * params.B * bscale  # (H, n)
    dt_lam = lam * dt
    steps = torch.arange(length, dtype=dt.dtype)
    vandermonde = torch.exp(dt_lam.unsqueeze(-1) * steps)  # (H, n, L)
    kernel = 2.0 * torch.einsum("hn,hnl->hl", coeff, vandermonde).real
    if not torch.isfinite(kernel).all():
        raise NumericError("SSM kernel is not finite")
    return kernel


def ssm_recurrence(u: torch.Tensor, params: SsmLayerParams) -> torch.Tensor:
    """Step-by-step state recurrence, the reference for kernel convolution.

    ``h_k = abar*h_{k-1} + bbar*u_k`` and ``y_k = 2*Re(C h_k)`` per channel.
    ``u`` has shape (..., H, L); the D skip is not included.
    """
    lam = params.tuned
    dt = torch.exp(params.log_dt).unsqueeze(-1)
    abar, bscale = discretize(lam, dt)
    bbar = params.B * bscale  # (H, n)
    state = torch.zeros(*u.shape[:-1], lam.shape[-1], dtype=lam.dtype)
    outputs = []
    for k in range(u.shape[-1]):
        state = abar * state + bbar * u[..., k].unsqueeze(-1)
        outputs.append(2.0 * (params.C * state).sum(-1).real)
    return torch.stack(outputs, dim=-1)


def diffusion_time_embedding(tau: torch.Tensor | float, dim: int) -> torch.Tensor:
    """Fourier features ``[sin(w_k*tau)..., cos(w_k*tau)...]``.

    Frequencies are geometric from 1 to 1e4: ``w_k = exp(k*ln(1e4)/(dim/2 - 1))``
    for ``k = 0..dim/2-1`` (a single frequency of 1 when ``dim == 2``).
    A scalar tau gives shape (dim,), a (B,) tensor gives (B, dim).
    """
    if dim < 2 or dim % 2:
        raise ArgumentError(f"Embedding dim must be even and >= 2, got {dim}")
    tau = torch.as_tensor(tau, dtype=torch.get_default_dtype())
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=tau.dtype)
    else:
        freqs = torch.exp(torch.arange(half, dtype=tau.dtype) * (math.log(_MAX_FREQUENCY) / (half - 1)))
    angles = tau.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def assemble_input(
    cond: ConditioningBatch, x_tau: torch.Tensor | None, cfg: BackboneConfig
) -> torch.Tensor:
    """Concatenate forcings, repeated statics and the noisy target channel.

    The time axis holds ``l_p`` past days ending at Day-0 followed by ``l_ff``
    future days. The target channel is zero for the first ``l_p - 1`` steps
    and carries ``x_tau`` over the final ``l_f`` steps. With ``x_tau=None``
    the target channel is omitted.

    Returns:
        (B, l_p + l_ff, d_z + d_s [+ 1]) tensor.
    """
    batch = cond.past.shape[0]
    expected = {
        "past": (batch, cfg.l_p, cfg.d_z),
        "future": (batch, cfg.l_ff, cfg.d_z),
        "static": (batch, cfg.d_s),
    }
    for name, shape in expected.items():
        actual = tuple(getattr(cond, name).shape)
        if actual != shape:
            raise ArgumentError(f"Conditioning {name} has shape {actual}, expected {shape}")

    forcings = torch.cat([cond.past, cond.future], dim=1)
    statics = repeat(cond.static, "b s -> b l s", l=cfg.seq_len)
    parts = [forcings, statics]
    if x_tau is not None:
        if tuple(x_tau.shape) != (batch, cfg.l_f):
            raise ArgumentError(
                f"x_tau has shape {tuple(x_tau.shape)}, expected {(batch, cfg.l_f)}"
            )
        target = torch.zeros(batch, cfg.seq_len, 1, dtype=forcings.dtype)
        target[:, -cfg.l_f :, 0] = x_tau.to(forcings.dtype)
        parts.append(target)
    return torch.cat(parts, dim=-1)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


def _register(module: nn.Module, name: str, tensor: torch.Tensor, group: str | None = None) -> None:
    """Register a parameter, tagging it with its optimizer group."""
    module.register_parameter(name, nn.Parameter(tensor))
    if group is not None:
        setattr(getattr(module, name), "_optim", {"group": group})


class S4DFTKernel(nn.Module):
    """Learnable parameters of one S4D-FT layer and its kernel."""

    def __init__(self, cfg: BackboneConfig) -> None:
        super().__init__()
        H, n = cfg.d_model, cfg.d_state
        dtype = torch.get_default_dtype()

        log_dt = torch.rand(H, dtype=dtype) * (math.log(cfg.max_dt) - math.log(cfg.min_dt)) + math.log(cfg.min_dt)
        # S4D-Lin: -1/2 + i*pi*j
        theta = torch.full((H, n), math.log(math.expm1(0.5)), dtype=dtype)
        omega = repeat(math.pi * torch.arange(n, dtype=dtype), "n -> h n", h=H).clone()

        if cfg.tuning_init == "range":
            alpha_r = cfg.cfr * (1.0 - torch.rand((), dtype=dtype))
            alpha_i = cfg.cfi * (1.0 - torch.rand((), dtype=dtype))
        elif cfg.tuning_init == "fixed":
            alpha_r = torch.tensor(cfg.cfr, dtype=dtype)
            alpha_i = torch.tensor(cfg.cfi, dtype=dtype)
        else:
            alpha_r = torch.tensor(1.0, dtype=dtype)
            alpha_i = torch.tensor(1.0, dtype=dtype)

        B = torch.zeros(n, 2, dtype=dtype)
        B[:, 0] = 1.0
        C = torch.randn(H, n, 2, dtype=dtype) * math.sqrt(0.5)

        _register(self, "log_dt", log_dt, "dt")
        _register(self, "lambda_theta", theta, "ssm")
        _register(self, "lambda_omega", omega, "ssm")
        _register(self, "log_alpha_r", torch.log(alpha_r), "ssm")
        _register(self, "alpha_i", alpha_i, "ssm")
        _register(self, "B", B, "ssm")
        _register(self, "C", C, "ssm")
        _register(self, "D", torch.randn(H, dtype=dtype))

    def params(self) -> SsmLayerParams:
        return SsmLayerParams(
            lambda_base=torch.complex(-F.softplus(self.lambda_theta), self.lambda_omega),
            alpha_r=torch.exp(self.log_alpha_r),
            alpha_i=self.alpha_i,
            B=torch.view_as_complex(self.B.contiguous()),
            C=torch.view_as_complex(self.C.contiguous()),
            D=self.D,
            log_dt=self.log_dt,
        )

    def forward(self, length: int) -> torch.Tensor:
        return ssm_kernel(self.params(), length)


class S4DFTLayer(nn.Module):
    """Pre-norm S4D-FT block with a diffusion-time bias over the last ``l_f`` steps.

    norm -> SSM convolution + D skip -> (+ projected tau embedding) -> GELU ->
    dropout -> Linear(H, 2H) + GLU -> dropout -> residual.
    """

    def __init__(self, cfg: BackboneConfig, dropout: float, time_embedding: bool = True) -> None:
        super().__init__()
        self.horizon = cfg.l_f
        self.norm = nn.LayerNorm(cfg.d_model)
        self.kernel = S4DFTKernel(cfg)
        self.time_proj = nn.Linear(cfg.time_embedding_dim, cfg.d_model) if time_embedding else None
        self.activation = nn.GELU()
        self.dropout = nn.Dropout(dropout) if dropout > 0.0 else nn.Identity()
        self.output_linear = nn.Linear(cfg.d_model, 2 * cfg.d_model)
        self.glu = nn.GLU(dim=-1)

    def forward(
        self,
        x: torch.Tensor,
        embedding: torch.Tensor | None = None,
        use_recurrence: bool = False,
    ) -> torch.Tensor:
        """x: (B, L, H); embedding: (B, E) or None. Returns (B, L, H)."""
        length = x.shape[1]
        u = rearrange(self.norm(x), "b l h -> b h l")
        params = self.kernel.params()
        if use_recurrence:
            y = ssm_recurrence(u, params)
        else:
            y = fft_linear_convolve(u, ssm_kernel(params, length))
        y = y + params.D.unsqueeze(-1) * u
        y = rearrange(y, "b h l -> b l h")

        if self.time_proj is not None:
            if embedding is None:
                raise ArgumentError("This layer needs a diffusion-time embedding")
            mask = torch.zeros(length, 1, dtype=y.dtype)
            mask[-self.horizon :] = 1.0
            y = y + self.time_proj(embedding).unsqueeze(1) * mask

        y = self.dropout(self.activation(y))
        y = self.dropout(self.glu(self.output_linear(y)))
        return x + y


class HydroDiffusionBackbone(nn.Module):
    """Stacked S4D-FT denoiser; with ``diffusion=False`` a direct streamflow model.

    The diffusion variant is called as ``model(x_tau, tau, cond)`` and returns
    a velocity estimate; the deterministic variant as ``model(None, None, cond)``
    and returns normalized streamflow. Both return shape (B, l_f).
    """

    def __init__(self, cfg: BackboneConfig, diffusion: bool = True, dropout: float | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.diffusion = diffusion
        self.horizon = cfg.l_f
        self.use_recurrence = False
        p = cfg.dropout if dropout is None else dropout
        in_features = cfg.d_z + cfg.d_s + (1 if diffusion else 0)

        self.encoder = nn.Linear(in_features, cfg.d_model)
        self.layers = nn.ModuleList(
            [S4DFTLayer(cfg, p, time_embedding=diffusion) for _ in range(cfg.n_layers)]
        )
        self.norm = nn.LayerNorm(cfg.d_model)
        self.decoder = nn.Linear(cfg.d_model, 1)

    def forward(
        self,
        x_tau: torch.Tensor | None,
        tau: torch.Tensor | None,
        cond: ConditioningBatch,
    ) -> torch.Tensor:
        if self.diffusion and (x_tau is None or tau is None):
            raise ArgumentError("Diffusion backbone needs x_tau and tau")
        features = assemble_input(cond, x_tau if self.diffusion else None, self.cfg)
        embedding = None
        if self.diffusion:
            tau = torch.as_tensor(tau, dtype=features.dtype).reshape(features.shape[0])
            embedding = diffusion_time_embedding(tau, self.cfg.time_embedding_dim)

        h = self.encoder(features)
        for layer in self.layers:
            h = layer(h, embedding, use_recurrence=self.use_recurrence)
        out = self.decoder(self.norm(h)).squeeze(-1)
        return out[:, -self.horizon :]
