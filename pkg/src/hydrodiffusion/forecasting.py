"""Ensemble forecasts over basins and initialization dates, and the climatology reference.

Every (basin, init date) pair owns a root seed derived from the run seed and
the pair's label; member ``m`` draws its start noise from stream ``m`` of that
seed. Forecasts therefore do not depend on batching, on which other dates
were requested, or on thread count.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np
import pandas as pd
import torch
from torch import nn

from hydrodiffusion.data import (
    FORECAST_HEADER,
    BasinRecord,
    ConditioningBatch,
    ConditioningTuple,
    DateRange,
    NormStats,
    make_windows,
    normalize_window,
)
from hydrodiffusion.diffusion import ddim_integrate
from hydrodiffusion.errors import ArgumentError, NumericError
from hydrodiffusion.models import BackboneConfig, DiffusionConfig, ForecastConfig, ModelKind
from hydrodiffusion.numerics import derive_seed, gaussian_sample, philox_generator

logger = logging.getLogger(__name__)

CLIMATOLOGY_WINDOW_DAYS = 3


@dataclass
class ForecastOutput:
    """Forecast rows plus what was skipped or flagged along the way."""

    frame: pd.DataFrame
    skipped: list[tuple[str, date]] = field(default_factory=list)
    negative_count: int = 0

    def manifest(self) -> dict[str, object]:
        return {
            "rows": len(self.frame),
            "negative_values": self.negative_count,
            "skipped": [{"basin_id": b, "init_date": d.isoformat()} for b, d in self.skipped],
        }


def sample_seed(seed: int, basin_id: str, init_date: date) -> int:
    return derive_seed(seed, f"forecast/{basin_id}/{init_date.isoformat()}")


def _rows(basin_id: str, init_date: date, trajectories: np.ndarray) -> list[tuple]:
    return [
        (basin_id, init_date, lead, member, float(trajectories[member, lead]))
        for member in range(trajectories.shape[0])
        for lead in range(trajectories.shape[1])
    ]


def _chunks(items: Sequence[ConditioningTuple], size: int) -> Iterable[Sequence[ConditioningTuple]]:
    for start in range(0, len(items), size):
        yield items[start : start + size]


@torch.no_grad()
def _ensemble_chunk(
    model: nn.Module,
    samples: Sequence[ConditioningTuple],
    members: int,
    seed: int,
    diffusion_cfg: DiffusionConfig,
    horizon: int,
    dtype: torch.dtype,
) -> np.ndarray:
    """(len(samples), members, horizon) normalized trajectories."""
    cond = ConditioningBatch.from_tuples(samples, dtype).repeat(members)
    x_start = torch.stack(
        [
            gaussian_sample(horizon, sample_seed(seed, s.basin_id, s.init_date), stream=m, dtype=dtype)
            for s in samples
            for m in range(members)
        ]
    )
    try:
        out = ddim_integrate(model, cond, x_start, diffusion_cfg)
    except NumericError as exc:
        sample = samples[exc.member // members] if exc.member is not None else samples[0]
        member = exc.member % members if exc.member is not None else None
        raise NumericError(
            f"Sampler diverged for basin {sample.basin_id} at {sample.init_date}",
            step=exc.step,
            member=member,
        ) from exc
    return out.reshape(len(samples), members, horizon).cpu().numpy()


def forecast_basins(
    model: nn.Module,
    kind: ModelKind,
    records: Sequence[BasinRecord],
    stats: NormStats,
    backbone_cfg: BackboneConfig,
    diffusion_cfg: DiffusionConfig,
    forecast_cfg: ForecastConfig,
    seed: int,
    dates: Sequence[date] | None = None,
    within: DateRange | None = None,
) -> ForecastOutput:
    """Forecast every requested (basin, date) pair in physical units.

    Diffusion kinds produce ``forecast_cfg.members`` trajectories per pair;
    deterministic kinds produce one (member 0).

    Args:
        model: Trained model in eval mode.
        kind: Model kind, selecting ensemble or direct prediction.
        records: Basins to forecast.
        stats: Normalization statistics stored with the checkpoint.
        backbone_cfg: Window geometry.
        diffusion_cfg: Sampler settings.
        forecast_cfg: Ensemble size, stride, clamping and batch size.
        seed: Root seed of the forecast run.
        dates: Explicit init dates; every valid date of ``within`` when None.
        within: Date range the forecast targets must fall in.
    """
    kind = ModelKind(kind)
    model.eval()
    dtype = next(model.parameters()).dtype
    horizon = backbone_cfg.l_f
    members = forecast_cfg.members if kind.is_diffusion else 1
    per_call = max(1, forecast_cfg.batch_size // members)

    rows: list[tuple] = []
    skipped: list[tuple[str, date]] = []
    for record in records:
        windows = make_windows(record, backbone_cfg, dates, within=within)
        skipped.extend((record.basin_id, d) for d in windows.skipped)
        samples = windows.samples if dates is not None else windows.samples[:: forecast_cfg.date_stride]
        if not samples:
            continue
        normalized = [normalize_window(s, stats) for s in samples]
        flow_mean, flow_std = stats.flow(record.basin_id)

        for chunk in _chunks(normalized, per_call):
            if kind.is_diffusion:
                trajectories = _ensemble_chunk(model, chunk, members, seed, diffusion_cfg, horizon, dtype)
            else:
                with torch.no_grad():
                    cond = ConditioningBatch.from_tuples(chunk, dtype)
                    prediction = model(None, None, cond)
                if not torch.isfinite(prediction).all():
                    raise NumericError(f"Non-finite prediction for basin {record.basin_id}")
                trajectories = prediction.cpu().numpy()[:, None, :]
            physical = trajectories * flow_std + flow_mean
            for sample, values in zip(chunk, physical):
                rows.extend(_rows(sample.basin_id, sample.init_date, values))
        logger.info("[forecast] basin %s: %d init dates, %d members", record.basin_id, len(samples), members)

    frame = pd.DataFrame(rows, columns=list(FORECAST_HEADER))
    if frame.empty:
        raise ArgumentError("No forecastable (basin, date) pairs")
    negative = int((frame["value"] < 0).sum())
    if negative:
        if forecast_cfg.clamp_zero:
            frame["value"] = frame["value"].clip(lower=0.0)
            logger.info("[forecast] clamped %d negative values to zero", negative)
        else:
            logger.warning("[forecast] %d negative streamflow values kept", negative)
    if skipped:
        logger.warning("[forecast] skipped %d (basin, date) pairs without enough history", len(skipped))
    return ForecastOutput(frame=frame, skipped=skipped, negative_count=negative)


# ---------------------------------------------------------------------------
# Climatology
# ---------------------------------------------------------------------------


def _same_day(year: int, day: date) -> date:
    if day.month == 2 and day.day == 29:
        return date(year, 2, 28)
    return date(year, day.month, day.day)


def _climatology_candidates(
    record: BasinRecord, init_date: date, train_range: DateRange, horizon: int
) -> list[np.ndarray]:
    candidates = []
    for year in range(train_range[0].year, train_range[1].year + 1):
        anchor = _same_day(year, init_date)
        for offset in range(-CLIMATOLOGY_WINDOW_DAYS, CLIMATOLOGY_WINDOW_DAYS + 1):
            start = anchor + timedelta(days=offset)
            end = start + timedelta(days=horizon - 1)
            if start < train_range[0] or end > train_range[1]:
                continue
            index = record.index_of(start)
            if index < 0 or index + horizon > record.n_days:
                continue
            trajectory = record.streamflow[index : index + horizon]
            if np.isfinite(trajectory).all():
                candidates.append(trajectory)
    return candidates


def climatology_ensemble(
    records: Sequence[BasinRecord],
    backbone_cfg: BackboneConfig,
    train_range: DateRange,
    members: int,
    seed: int,
    dates: Sequence[date] | None = None,
    within: DateRange | None = None,
    date_stride: int = 1,
) -> ForecastOutput:
    """Reference ensembles of historical same-day-of-year trajectories.

    Candidates are the observed ``l_f``-day streamflow sequences starting
    within +-3 days of the init date's calendar day in each training year.
    Members are drawn without replacement when enough candidates exist.
    """
    if members < 1:
        raise ArgumentError(f"Ensemble size must be >= 1, got {members}")
    horizon = backbone_cfg.l_f
    rows: list[tuple] = []
    skipped: list[tuple[str, date]] = []
    for record in records:
        windows = make_windows(record, backbone_cfg, dates, within=within)
        skipped.extend((record.basin_id, d) for d in windows.skipped)
        samples = windows.samples if dates is not None else windows.samples[::date_stride]
        for sample in samples:
            candidates = _climatology_candidates(record, sample.init_date, train_range, horizon)
            if not candidates:
                skipped.append((record.basin_id, sample.init_date))
                continue
            rng = philox_generator(derive_seed(seed, f"climatology/{record.basin_id}/{sample.init_date}"))
            replace = len(candidates) < members
            chosen = rng.choice(len(candidates), size=members, replace=replace)
            rows.extend(_rows(record.basin_id, sample.init_date, np.stack([candidates[i] for i in chosen])))
        logger.info("[climatology] basin %s: %d init dates", record.basin_id, len(samples))
    frame = pd.DataFrame(rows, columns=list(FORECAST_HEADER))
    if frame.empty:
        raise ArgumentError("No (basin, date) pairs with climatology candidates")
    return ForecastOutput(frame=frame, skipped=skipped)
