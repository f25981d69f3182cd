"""Recurrent denoisers: encoder-decoder and decoder-only LSTMs.

Both share the diffusion formulation of the SSM backbone: they are called as
``model(x_tau, tau, cond)`` and return a velocity estimate of length ``l_f``.
The diffusion-time embedding enters as an additive bias on the recurrent
state at the past/future boundary. ``DecoderOnlyLSTM(diffusion=False)`` is
the deterministic benchmark, called as ``model(None, None, cond)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from einops import repeat
from torch import nn

from hydrodiffusion.data import ConditioningBatch
from hydrodiffusion.errors import ArgumentError
from hydrodiffusion.models import BackboneConfig, LstmConfig
from hydrodiffusion.ssm import assemble_input, diffusion_time_embedding

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Cell arithmetic
# ---------------------------------------------------------------------------


@dataclass
class LstmParams:
    """Gate weights in torch's (input, forget, cell, output) row order."""

    w_ih: torch.Tensor  # (4H, d_in)
    w_hh: torch.Tensor  # (4H, H)
    b_ih: torch.Tensor  # (4H,)
    b_hh: torch.Tensor  # (4H,)

    @classmethod
    def from_module(cls, lstm: nn.LSTM | nn.LSTMCell) -> LstmParams:
        suffix = "_l0" if isinstance(lstm, nn.LSTM) else ""
        return cls(
            w_ih=getattr(lstm, f"weight_ih{suffix}"),
            w_hh=getattr(lstm, f"weight_hh{suffix}"),
            b_ih=getattr(lstm, f"bias_ih{suffix}"),
            b_hh=getattr(lstm, f"bias_hh{suffix}"),
        )


def lstm_cell(
    x: torch.Tensor, h: torch.Tensor, c: torch.Tensor, params: LstmParams
) -> tuple[torch.Tensor, torch.Tensor]:
    """One LSTM step; returns ``(h_t, c_t)`` with ``h_t = o * tanh(c_t)``."""
    hidden = params.w_hh.shape[1]
    if params.w_ih.shape[0] != 4 * hidden or x.shape[-1] != params.w_ih.shape[1]:
        raise ArgumentError(
            f"Inconsistent LSTM shapes: x {tuple(x.shape)}, w_ih {tuple(params.w_ih.shape)}, "
            f"w_hh {tuple(params.w_hh.shape)}"
        )
    gates = x @ params.w_ih.T + params.b_ih + h @ params.w_hh.T + params.b_hh
    i, f, g, o = gates.chunk(4, dim=-1)
    c_next = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_next = torch.sigmoid(o) * torch.tanh(c_next)
    return h_next, c_next


def lstm_parameter_count(d_in: int, hidden: int) -> int:
    """Weights and both bias vectors of a single-layer LSTM."""
    return 4 * hidden * (d_in + hidden) + 8 * hidden


def init_forget_bias(lstm: nn.LSTM, value: float) -> None:
    """Zero every bias, then set the forget-gate slice of ``bias_hh`` to ``value``."""
    hidden = lstm.hidden_size
    with torch.no_grad():
        for name, param in lstm.named_parameters():
            if name.startswith("bias"):
                param.zero_()
        lstm.bias_hh_l0[hidden : 2 * hidden] = value


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class _TimeBias(nn.Module):
    """Affine maps from the diffusion-time embedding to (h, c) offsets."""

    def __init__(self, embedding_dim: int, hidden: int) -> None:
        super().__init__()
        self.embedding_dim = embedding_dim
        self.to_h = nn.Linear(embedding_dim, hidden)
        self.to_c = nn.Linear(embedding_dim, hidden)

    def forward(
        self, tau: torch.Tensor, h: torch.Tensor, c: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        emb = diffusion_time_embedding(tau, self.embedding_dim).unsqueeze(0)  # (1, B, E)
        return h + self.to_h(emb), c + self.to_c(emb)


class EncoderDecoderLSTM(nn.Module):
    """Encoder reads ``l_p`` past days; decoder unrolls over Day-0..Day-(l_f-1).

    Encoder input per step: forcings + statics. Decoder input per step: the
    day's forcing (Day-0 from the past window, then the future forcings),
    statics, and the noisy target value for that day.
    """

    def __init__(self, cfg: BackboneConfig, lstm_cfg: LstmConfig, dropout: float | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.horizon = cfg.l_f
        hidden = lstm_cfg.hidden_size
        self.encoder = nn.LSTM(cfg.d_z + cfg.d_s, hidden, batch_first=True)
        self.decoder = nn.LSTM(cfg.d_z + cfg.d_s + 1, hidden, batch_first=True)
        self.time_bias = _TimeBias(lstm_cfg.time_embedding_dim, hidden)
        self.dropout = nn.Dropout(lstm_cfg.dropout if dropout is None else dropout)
        self.head = nn.Linear(hidden, 1)
        init_forget_bias(self.encoder, lstm_cfg.initial_forget_bias)
        init_forget_bias(self.decoder, lstm_cfg.initial_forget_bias)

    def forward(
        self, x_tau: torch.Tensor, tau: torch.Tensor, cond: ConditioningBatch
    ) -> torch.Tensor:
        cfg = self.cfg
        batch = cond.past.shape[0]
        if tuple(x_tau.shape) != (batch, cfg.l_f):
            raise ArgumentError(f"x_tau has shape {tuple(x_tau.shape)}, expected {(batch, cfg.l_f)}")
        tau = torch.as_tensor(tau, dtype=cond.past.dtype).reshape(batch)

        past = torch.cat([cond.past, repeat(cond.static, "b s -> b l s", l=cfg.l_p)], dim=-1)
        _, (h, c) = self.encoder(past)
        h, c = self.time_bias(tau, h, c)

        forcings = torch.cat([cond.past[:, -1:], cond.future], dim=1)
        decoder_in = torch.cat(
            [
                forcings,
                repeat(cond.static, "b s -> b l s", l=cfg.l_f),
                x_tau.to(forcings.dtype).unsqueeze(-1),
            ],
            dim=-1,
        )
        out, _ = self.decoder(decoder_in, (h, c))
        return self.head(self.dropout(out)).squeeze(-1)


class DecoderOnlyLSTM(nn.Module):
    """Single recurrent pass over the assembled (l_p + l_ff)-step sequence.

    The diffusion variant adds the time bias to (h, c) after step ``l_p - 1``,
    i.e. right before the first step that carries the noisy target.
    """

    def __init__(
        self,
        cfg: BackboneConfig,
        lstm_cfg: LstmConfig,
        diffusion: bool = True,
        dropout: float | None = None,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.diffusion = diffusion
        self.horizon = cfg.l_f
        hidden = lstm_cfg.hidden_size
        self.lstm = nn.LSTM(cfg.d_z + cfg.d_s + (1 if diffusion else 0), hidden, batch_first=True)
        self.time_bias = _TimeBias(lstm_cfg.time_embedding_dim, hidden) if diffusion else None
        self.dropout = nn.Dropout(lstm_cfg.dropout if dropout is None else dropout)
        self.head = nn.Linear(hidden, 1)
        init_forget_bias(self.lstm, lstm_cfg.initial_forget_bias)

    def forward(
        self,
        x_tau: torch.Tensor | None,
        tau: torch.Tensor | None,
        cond: ConditioningBatch,
    ) -> torch.Tensor:
        if not self.diffusion:
            features = assemble_input(cond, None, self.cfg)
            out, _ = self.lstm(features)
            return self.head(self.dropout(out[:, -self.horizon :])).squeeze(-1)

        if x_tau is None or tau is None:
            raise ArgumentError("Diffusion LSTM needs x_tau and tau")
        features = assemble_input(cond, x_tau, self.cfg)
        tau = torch.as_tensor(tau, dtype=features.dtype).reshape(features.shape[0])
        boundary = features.shape[1] - self.horizon
        _, (h, c) = self.lstm(features[:, :boundary])
        h, c = self.time_bias(tau, h, c)
        out, _ = self.lstm(features[:, boundary:], (h, c))
        return self.head(self.dropout(out)).squeeze(-1)
