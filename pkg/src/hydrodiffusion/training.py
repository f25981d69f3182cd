"""Optimization: Lion, learning-rate schedules, NSE loss and the training loop.

Learning rates per parameter group (see :mod:`hydrodiffusion.registry`):

* ``default``: the global schedule (linear warm-up over the first epoch,
  then linear decay to zero) with ``weight_decay``.
* ``ssm``: ``min(global lr, ssm_lr_cap)`` with ``ssm_weight_decay``.
* ``dt``: ``dt_lr`` scaled by the same warm-up/decay shape, no decay.

With ``lr_schedule = "piecewise"`` the global rate is constant per block of
epochs instead.
"""

from __future__ import annotations

import copy
import logging
import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from hydrodiffusion.data import WindowDataset, batch_conditioning
from hydrodiffusion.diffusion import velocity_loss
from hydrodiffusion.errors import ArgumentError, NumericError, TrainingDivergedError
from hydrodiffusion.models import ModelKind, TrainConfig
from hydrodiffusion.numerics import derive_seed, philox_generator
from hydrodiffusion.registry import GROUP_DT, GROUP_SSM, parameter_groups

logger = logging.getLogger(__name__)

NSE_STD_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Lion
# ---------------------------------------------------------------------------


def lion_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    momentum: torch.Tensor,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.99),
) -> tuple[torch.Tensor, torch.Tensor]:
    """One Lion update; returns ``(new_param, new_momentum)``.

    ``u = sign(b1*m + (1-b1)*g)``, ``p <- p - lr*(u + wd*p)``,
    ``m <- b2*m + (1-b2)*g``.
    """
    if param.shape != grad.shape or param.shape != momentum.shape:
        raise ArgumentError(
            f"Shapes differ: param {tuple(param.shape)}, grad {tuple(grad.shape)}, "
            f"momentum {tuple(momentum.shape)}"
        )
    if not torch.isfinite(grad).all():
        raise NumericError("Non-finite gradient in Lion step")
    beta1, beta2 = betas
    update = torch.sign(beta1 * momentum + (1.0 - beta1) * grad)
    new_param = param - lr * (update + weight_decay * param)
    new_momentum = beta2 * momentum + (1.0 - beta2) * grad
    return new_param, new_momentum


class Lion(torch.optim.Optimizer):
    """Sign-momentum optimizer applying :func:`lion_step` to every parameter."""

    def __init__(
        self,
        params: Iterable[torch.Tensor] | Iterable[dict],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.99),
        weight_decay: float = 0.0,
    ) -> None:
        if lr < 0.0:
            raise ArgumentError(f"Learning rate must be >= 0, got {lr}")
        if not all(0.0 <= b <= 1.0 for b in betas):
            raise ArgumentError(f"Betas must lie in [0, 1], got {betas}")
        super().__init__(params, dict(lr=lr, betas=betas, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure: Callable[[], torch.Tensor] | None = None) -> torch.Tensor | None:
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "exp_avg" not in state:
                    state["exp_avg"] = torch.zeros_like(p)
                new_param, new_momentum = lion_step(
                    p, p.grad, state["exp_avg"], group["lr"], group["weight_decay"], group["betas"]
                )
                p.copy_(new_param)
                state["exp_avg"].copy_(new_momentum)
        return loss


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def lr_schedule(step: int, total_steps: int, steps_per_epoch: int, peak: float) -> float:
    """Linear 0 -> peak over the first epoch, then linear peak -> 0 at ``total_steps``."""
    if total_steps <= steps_per_epoch:
        raise ArgumentError(
            f"Warm-up/decay needs more than one epoch of steps ({total_steps} <= {steps_per_epoch})"
        )
    if step <= steps_per_epoch:
        return peak * step / steps_per_epoch
    return peak * max(0.0, (total_steps - step) / (total_steps - steps_per_epoch))


def piecewise_lr(epoch: int, lrs: list[float], epochs: list[int]) -> float:
    """Constant rate per block of epochs (0-based ``epoch``); the last block extends."""
    boundary = 0
    for lr, length in zip(lrs, epochs):
        boundary += length
        if epoch < boundary:
            return lr
    return lrs[-1]


def apply_learning_rates(
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    step: int,
    epoch: int,
    total_steps: int,
    steps_per_epoch: int,
) -> float:
    """Set every group's lr for this step; returns the global rate."""
    if cfg.lr_schedule == "piecewise":
        lr = piecewise_lr(epoch, cfg.piecewise_lrs, cfg.piecewise_epochs)
        shape = 1.0
    else:
        shape = lr_schedule(step, total_steps, steps_per_epoch, 1.0)
        lr = cfg.base_lr * shape
    for group in optimizer.param_groups:
        name = group.get("group")
        if name == GROUP_SSM:
            group["lr"] = min(lr, cfg.ssm_lr_cap)
        elif name == GROUP_DT:
            group["lr"] = cfg.dt_lr * shape
        else:
            group["lr"] = lr
    return lr


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = parameter_groups(model, cfg)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(groups, lr=0.0, betas=cfg.betas)
    return Lion(groups, lr=0.0, betas=cfg.betas)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def nse_loss(
    prediction: torch.Tensor,
    target: torch.Tensor,
    target_std: torch.Tensor,
    eps: float = 0.0,
) -> torch.Tensor:
    """Batch mean of ``sum_t (sim - obs)**2 / (std_basin + eps)**2``.

    ``target_std`` holds one streamflow std per sample (its basin's), floored
    at 1e-6.
    """
    if prediction.shape != target.shape:
        raise ArgumentError(f"Shapes differ: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    scale = (target_std.clamp_min(NSE_STD_FLOOR) + eps) ** 2
    per_sample = ((prediction - target) ** 2).sum(dim=-1) / scale
    return per_sample.mean()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class ResumeState:
    """Where a previous run stopped.

    ``model_state`` holds the last epoch's weights when the model passed to
    :func:`fit` carries the selected (best validation) weights instead;
    ``best_val`` and ``selected_epoch`` continue the selection.
    """

    epoch: int
    step: int
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    model_state: dict[str, torch.Tensor] = field(default_factory=dict)
    best_val: float = math.inf
    selected_epoch: int = 0


@dataclass
class FitResult:
    model: nn.Module
    trace: pd.DataFrame  # epoch, train_loss, val_loss, lr
    epoch: int  # last epoch trained
    step: int
    selected_epoch: int
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    # last epoch's weights; empty when the model already holds them
    last_state: dict[str, torch.Tensor] = field(default_factory=dict)
    best_val: float = math.inf

    def resume_state(self) -> ResumeState:
        return ResumeState(
            epoch=self.epoch,
            step=self.step,
            optimizer_state=self.optimizer_state,
            model_state=self.last_state,
            best_val=self.best_val,
            selected_epoch=self.selected_epoch,
        )


def checkpoint_policy(kind: ModelKind, cfg: TrainConfig) -> str:
    """``final`` for HydroDiffusion, ``best_val`` for every other kind, unless configured."""
    if cfg.checkpoint_policy != "auto":
        return cfg.checkpoint_policy
    return "final" if kind == ModelKind.HYDRODIFFUSION else "best_val"


def _batch_loss(
    model: nn.Module,
    kind: ModelKind,
    batch: dict[str, torch.Tensor],
    rng: np.random.Generator,
    cfg: TrainConfig,
) -> torch.Tensor:
    cond = batch_conditioning(batch)
    if kind.is_diffusion:
        return velocity_loss(model, batch["target"], cond, rng)
    return nse_loss(model(None, None, cond), batch["target"], batch["target_std"], cfg.nse_eps)


@torch.no_grad()
def evaluate_loss(
    model: nn.Module,
    kind: ModelKind,
    dataset: WindowDataset,
    cfg: TrainConfig,
    seed: int,
) -> float:
    """Mean loss over a dataset in eval mode, with fixed diffusion draws."""
    model.eval()
    rng = philox_generator(derive_seed(seed, "validation"))
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=False)
    total, count = 0.0, 0
    for batch in loader:
        size = batch["target"].shape[0]
        total += _batch_loss(model, kind, batch, rng, cfg).item() * size
        count += size
    return total / count


def optimizer_state_by_name(
    model: nn.Module, optimizer: torch.optim.Optimizer
) -> dict[str, torch.Tensor]:
    """Optimizer tensors keyed ``<state key>/<parameter name>``."""
    out: dict[str, torch.Tensor] = {}
    for name, param in model.named_parameters():
        for key, value in optimizer.state.get(param, {}).items():
            if key != "step" and torch.is_tensor(value) and value.shape == param.shape:
                out[f"{key}/{name}"] = value.detach().clone()
    return out


def _restore_optimizer_state(
    model: nn.Module, optimizer: torch.optim.Optimizer, state: dict[str, torch.Tensor], step: int
) -> None:
    params = dict(model.named_parameters())
    for qualified, value in state.items():
        key, name = qualified.split("/", 1)
        if name not in params:
            raise ArgumentError(f"Optimizer state refers to unknown parameter {name}")
        slot = optimizer.state[params[name]]
        slot[key] = value.clone().to(params[name].dtype)
        if isinstance(optimizer, torch.optim.Adam):
            slot.setdefault("step", torch.tensor(float(step)))


def fit(
    model: nn.Module,
    kind: ModelKind,
    train_set: WindowDataset,
    val_set: WindowDataset | None,
    cfg: TrainConfig,
    seed: int,
    resume: ResumeState | None = None,
) -> FitResult:
    """Train ``model`` and select the checkpoint according to the kind's policy.

    Diffusion kinds minimize the velocity loss with one tau per sample;
    deterministic kinds minimize the NSE loss. Shuffling, dropout and
    diffusion draws use per-epoch sub-streams of ``seed`` so a resumed run
    sees the same batches as an uninterrupted one.

    Raises:
        TrainingDivergedError: a training loss is not finite.
    """
    kind = ModelKind(kind)
    if len(train_set) == 0:
        raise ArgumentError("Training set is empty")
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.lr_schedule == "warmup_linear" and cfg.epochs < 2:
        raise ArgumentError("The warm-up/decay schedule needs at least 2 epochs")

    policy = checkpoint_policy(kind, cfg)
    best_val = math.inf
    best_state: dict[str, torch.Tensor] | None = None
    start_epoch, step, selected_epoch = 0, 0, 0
    if resume is not None:
        start_epoch, step, selected_epoch = resume.epoch, resume.step, resume.epoch
        best_val = resume.best_val
        if policy == "best_val" and math.isfinite(best_val):
            # the incoming model holds the weights selected so far
            best_state = copy.deepcopy(model.state_dict())
            selected_epoch = resume.selected_epoch
        if resume.model_state:
            model.load_state_dict(resume.model_state)

    optimizer = make_optimizer(model, cfg)
    if resume is not None:
        _restore_optimizer_state(model, optimizer, resume.optimizer_state, step)
        logger.info("[fit] resuming after epoch %d (step %d, best_val=%.6f)", start_epoch, step, best_val)
    rows = []
    lr = 0.0

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        model.train()
        torch.manual_seed(derive_seed(seed, f"dropout/{epoch}"))
        shuffle = torch.Generator().manual_seed(derive_seed(seed, f"shuffle/{epoch}"))
        rng = philox_generator(derive_seed(seed, "noise"), stream=epoch)
        loader = DataLoader(train_set, batch_size=cfg.batch_size, shuffle=True, generator=shuffle)

        losses = []
        for batch in tqdm(loader, desc=f"epoch {epoch}/{cfg.epochs}", leave=False, disable=None):
            lr = apply_learning_rates(optimizer, cfg, step, epoch - 1, total_steps, steps_per_epoch)
            try:
                loss = _batch_loss(model, kind, batch, rng, cfg)
            except NumericError as exc:
                raise TrainingDivergedError(str(exc), epoch=epoch, step=step) from exc
            if not torch.isfinite(loss):
                raise TrainingDivergedError("Training loss is not finite", epoch=epoch, step=step)
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            step += 1
            losses.append(loss.item())

        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, kind, val_set, cfg, seed) if val_set is not None and len(val_set) else math.nan
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        logger.info(
            "[fit] epoch %d/%d | train_loss=%.6f | val_loss=%.6f | lr=%.3e",
            epoch,
            cfg.epochs,
            train_loss,
            val_loss,
            lr,
        )
        if policy == "best_val" and math.isfinite(val_loss) and val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
            selected_epoch = epoch

    last_epoch = max(start_epoch, cfg.epochs)
    optimizer_state = optimizer_state_by_name(model, optimizer)
    last_state: dict[str, torch.Tensor] = {}
    if policy == "best_val" and best_state is not None:
        if selected_epoch != last_epoch:
            last_state = copy.deepcopy(model.state_dict())
            model.load_state_dict(best_state)
        logger.info("[fit] keeping epoch %d (val_loss=%.6f)", selected_epoch, best_val)
    else:
        selected_epoch = last_epoch
    model.eval()
    return FitResult(
        model=model,
        trace=pd.DataFrame(rows, columns=["epoch", "train_loss", "val_loss", "lr"]),
        epoch=last_epoch,
        step=step,
        selected_epoch=selected_epoch,
        optimizer_state=optimizer_state,
        last_state=last_state,
        best_val=best_val,
    )
