"""Model-kind registry: construction, parameter counting and optimizer groups."""

from __future__ import annotations

import logging
from collections.abc import Callable
from typing import Any

import torch
from torch import nn

from hydrodiffusion.lstm import DecoderOnlyLSTM, EncoderDecoderLSTM
from hydrodiffusion.models import ModelConfig, ModelKind, TrainConfig
from hydrodiffusion.numerics import derive_seed
from hydrodiffusion.ssm import HydroDiffusionBackbone

logger = logging.getLogger(__name__)

GROUP_SSM = "ssm"
GROUP_DT = "dt"
GROUP_DEFAULT = "default"


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _hydrodiffusion(cfg: ModelConfig, dropout: float | None) -> nn.Module:
    return HydroDiffusionBackbone(cfg.backbone, diffusion=True, dropout=dropout)


def _deterministic_ssm(cfg: ModelConfig, dropout: float | None) -> nn.Module:
    return HydroDiffusionBackbone(cfg.backbone, diffusion=False, dropout=dropout)


def _lstm_encdec(cfg: ModelConfig, dropout: float | None) -> nn.Module:
    return EncoderDecoderLSTM(cfg.backbone, cfg.lstm, dropout=dropout)


def _lstm_dec(cfg: ModelConfig, dropout: float | None) -> nn.Module:
    return DecoderOnlyLSTM(cfg.backbone, cfg.lstm, diffusion=True, dropout=dropout)


def _deterministic_lstm(cfg: ModelConfig, dropout: float | None) -> nn.Module:
    return DecoderOnlyLSTM(cfg.backbone, cfg.lstm, diffusion=False, dropout=dropout)


_MODEL_BUILDERS: dict[ModelKind, Callable[[ModelConfig, float | None], nn.Module]] = {
    ModelKind.HYDRODIFFUSION: _hydrodiffusion,
    ModelKind.DIFFUSION_LSTM_ENCDEC: _lstm_encdec,
    ModelKind.DIFFUSION_LSTM_DEC: _lstm_dec,
    ModelKind.DETERMINISTIC_SSM: _deterministic_ssm,
    ModelKind.DETERMINISTIC_LSTM: _deterministic_lstm,
}


def build_model(
    kind: ModelKind,
    cfg: ModelConfig,
    seed: int,
    dropout: float | None = None,
    dtype: torch.dtype | None = None,
) -> nn.Module:
    """Instantiate a model of ``kind`` with seed-determined initial weights.

    Args:
        kind: Which architecture to build.
        cfg: Sizes for the backbone and LSTM variants.
        seed: Root seed; the ``"init"`` sub-stream seeds the weights.
        dropout: Overrides the architecture's configured dropout.
        dtype: Parameter dtype; the torch default when None.
    """
    builder = _MODEL_BUILDERS[ModelKind(kind)]
    previous = torch.get_default_dtype()
    if dtype is not None:
        torch.set_default_dtype(dtype)
    try:
        torch.manual_seed(derive_seed(seed, "init"))
        model = builder(cfg, dropout)
    finally:
        torch.set_default_dtype(previous)
    logger.info("[registry] built %s with %d parameters", ModelKind(kind).value, count_parameters(model))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Optimizer groups
# ---------------------------------------------------------------------------


def parameter_group_of(param: torch.Tensor) -> str:
    """Group tag set at registration time (``_optim``), ``"default"`` otherwise."""
    return getattr(param, "_optim", {}).get("group", GROUP_DEFAULT)


def parameter_groups(model: nn.Module, cfg: TrainConfig) -> list[dict[str, Any]]:
    """Optimizer parameter groups: SSM kernel, time step and everything else.

    Each group carries its name under ``"group"``; learning rates are set per
    step by the training loop.
    """
    buckets: dict[str, list[torch.Tensor]] = {GROUP_SSM: [], GROUP_DT: [], GROUP_DEFAULT: []}
    for param in model.parameters():
        buckets[parameter_group_of(param)].append(param)
    decay = {GROUP_SSM: cfg.ssm_weight_decay, GROUP_DT: 0.0, GROUP_DEFAULT: cfg.weight_decay}
    return [
        {"params": params, "group": name, "weight_decay": decay[name], "lr": 0.0}
        for name, params in buckets.items()
        if params
    ]
