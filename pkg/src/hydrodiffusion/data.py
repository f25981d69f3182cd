"""Basin records, conditioning windows, normalization and file formats.

A basin is a contiguous daily record of five forcings (precipitation,
maximum and minimum temperature, shortwave radiation, vapor pressure), an
observed streamflow series that may contain gaps (NaN), and a vector of
static catchment attributes.

On disk a data directory holds::

    basins/<basin_id>.csv     date,prcp,tmax,tmin,srad,vp,qobs
    static_attributes.csv     basin_id + one column per static attribute
    manifest.json             seed and generator settings

Numbers are written with 17 significant digits so a write/read roundtrip is
lossless; missing streamflow is an empty field.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import tempfile
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, model_validator
from torch.utils.data import Dataset

from hydrodiffusion.errors import ArgumentError, EmptyRecordError, ParseError
from hydrodiffusion.models import BackboneConfig, DataConfig, SplitConfig, SyntheticConfig
from hydrodiffusion.numerics import derive_seed, philox_generator

logger = logging.getLogger(__name__)

FORCING_COLUMNS = ("prcp", "tmax", "tmin", "srad", "vp")
TARGET_COLUMN = "qobs"
BASIN_HEADER = ("date", *FORCING_COLUMNS, TARGET_COLUMN)
STATIC_ATTRIBUTES = (
    "p_mean",
    "pet_mean",
    "aridity",
    "p_seasonality",
    "frac_snow",
    "high_prec_freq",
    "high_prec_dur",
    "low_prec_freq",
    "low_prec_dur",
    "elev_mean",
    "slope_mean",
    "area_gages2",
    "frac_forest",
    "lai_max",
    "lai_diff",
    "gvf_max",
    "gvf_diff",
    "soil_depth_pelletier",
    "soil_depth_statsgo",
    "soil_porosity",
    "soil_conductivity",
    "max_water_content",
    "sand_frac",
    "silt_frac",
    "clay_frac",
    "carbonate_rocks_frac",
    "geol_permeability",
)
FORECAST_HEADER = ("basin_id", "init_date", "lead_days", "member", "value")
STATIC_FILE = "static_attributes.csv"
BASIN_DIR = "basins"
MANIFEST_FILE = "manifest.json"
STD_FLOOR = 1e-8
FLOAT_FORMAT = "%.17g"

_DATE_FORMAT = "%Y-%m-%d"


# ---------------------------------------------------------------------------
# Records and windows
# ---------------------------------------------------------------------------


class BasinRecord(BaseModel):
    """One basin's daily record."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    basin_id: str
    dates: np.ndarray  # datetime64[D], (days,)
    forcings: np.ndarray  # (days, 5)
    streamflow: np.ndarray  # (days,), NaN = missing
    static: np.ndarray  # (d_s,)

    @model_validator(mode="after")
    def _check(self) -> BasinRecord:
        days = len(self.dates)
        if days == 0:
            raise ValueError(f"Basin {self.basin_id} has no days")
        if np.any(np.diff(self.dates).astype(np.int64) != 1):
            raise ValueError(f"Basin {self.basin_id}: dates must increase by exactly one day")
        if self.forcings.ndim != 2 or self.forcings.shape[0] != days:
            raise ValueError(f"Basin {self.basin_id}: forcings must have shape (days, d_z)")
        if self.streamflow.shape != (days,):
            raise ValueError(f"Basin {self.basin_id}: streamflow must have one value per day")
        if not np.isfinite(self.forcings).all():
            raise ValueError(f"Basin {self.basin_id}: forcings must be finite")
        if np.any(self.forcings[:, 0] < 0):
            raise ValueError(f"Basin {self.basin_id}: precipitation must be >= 0")
        if self.static.ndim != 1:
            raise ValueError(f"Basin {self.basin_id}: static attributes must be a vector")
        return self

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def start(self) -> date:
        return self.dates[0].astype(object)

    def index_of(self, day: date) -> int:
        return (day - self.start).days

    def date_at(self, index: int) -> date:
        return self.dates[index].astype(object)


@dataclass
class ConditioningTuple:
    """Inputs for one (basin, initialization date) sample.

    ``init_date`` is Day-0: the last day of ``past`` and the first day of
    ``target``.
    """

    basin_id: str
    init_date: date
    past: np.ndarray  # (l_p, d_z)
    future: np.ndarray  # (l_ff, d_z)
    static: np.ndarray  # (d_s,)
    target: np.ndarray | None = None  # (l_f,)


@dataclass
class ConditioningBatch:
    """Batched conditioning tensors: past (B, l_p, d_z), future (B, l_ff, d_z), static (B, d_s)."""

    past: torch.Tensor
    future: torch.Tensor
    static: torch.Tensor

    def __len__(self) -> int:
        return self.past.shape[0]

    @classmethod
    def from_tuples(
        cls, samples: Sequence[ConditioningTuple], dtype: torch.dtype | None = None
    ) -> ConditioningBatch:
        if not samples:
            raise ArgumentError("Cannot batch an empty list of samples")
        dtype = dtype or torch.get_default_dtype()
        return cls(
            past=torch.from_numpy(np.stack([s.past for s in samples])).to(dtype),
            future=torch.from_numpy(np.stack([s.future for s in samples])).to(dtype),
            static=torch.from_numpy(np.stack([s.static for s in samples])).to(dtype),
        )

    def repeat(self, times: int) -> ConditioningBatch:
        """Repeat every row ``times`` times consecutively (row-major members)."""
        return ConditioningBatch(
            past=self.past.repeat_interleave(times, dim=0),
            future=self.future.repeat_interleave(times, dim=0),
            static=self.static.repeat_interleave(times, dim=0),
        )

    def to(self, dtype: torch.dtype) -> ConditioningBatch:
        return ConditioningBatch(self.past.to(dtype), self.future.to(dtype), self.static.to(dtype))


@dataclass
class WindowSet:
    """Windows cut from one record plus the initialization dates that were dropped."""

    samples: list[ConditioningTuple] = field(default_factory=list)
    skipped: list[date] = field(default_factory=list)
    missing_target: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ConditioningTuple]:
        return iter(self.samples)


DateRange = tuple[date, date]


def valid_init_range(n_days: int, cfg: BackboneConfig) -> range:
    """Day-0 indices with a full past window and a full future window."""
    return range(cfg.l_p - 1, n_days - cfg.l_ff)


def make_windows(
    record: BasinRecord,
    cfg: BackboneConfig,
    dates: Iterable[date] | None = None,
    *,
    within: DateRange | None = None,
    require_target: bool = False,
) -> WindowSet:
    """Cut conditioning windows from a record.

    Args:
        record: Source basin.
        cfg: Window geometry (l_p, l_ff, l_f).
        dates: Requested initialization dates; every valid date when None.
        within: Inclusive date range all ``l_f`` target days must fall in.
        require_target: Drop windows whose target contains missing values.

    Returns:
        WindowSet with samples in date order. Requested dates without enough
        history or future forcing are listed in ``skipped``.
    """
    valid = valid_init_range(record.n_days, cfg)
    if dates is None:
        indices = list(valid)
        skipped: list[date] = []
    else:
        indices, skipped = [], []
        for day in dates:
            index = record.index_of(day)
            if index in valid:
                indices.append(index)
            else:
                skipped.append(day)
        if skipped:
            logger.warning(
                "[windows] basin %s: %d dates lack history or future forcing",
                record.basin_id,
                len(skipped),
            )

    result = WindowSet(skipped=skipped)
    for i in indices:
        init_date = record.date_at(i)
        if within is not None:
            last = init_date + timedelta(days=cfg.l_f - 1)
            if init_date < within[0] or last > within[1]:
                continue
        target = record.streamflow[i : i + cfg.l_f]
        if require_target and np.isnan(target).any():
            result.missing_target += 1
            continue
        result.samples.append(
            ConditioningTuple(
                basin_id=record.basin_id,
                init_date=init_date,
                past=record.forcings[i - cfg.l_p + 1 : i + 1],
                future=record.forcings[i + 1 : i + 1 + cfg.l_ff],
                static=record.static,
                target=target.copy(),
            )
        )
    if result.missing_target:
        logger.info(
            "[windows] basin %s: %d windows dropped for missing streamflow",
            record.basin_id,
            result.missing_target,
        )
    return result


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    """Mean and std per variable, ordered forcings, statics, streamflow.

    ``basin_overrides`` holds per-basin (mean, std) vectors of the same layout
    when per-basin normalization is used; statics are always pooled.
    """

    mean: np.ndarray
    std: np.ndarray
    d_z: int
    basin_overrides: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def for_basin(self, basin_id: str) -> tuple[np.ndarray, np.ndarray]:
        return self.basin_overrides.get(basin_id, (self.mean, self.std))

    def flow(self, basin_id: str) -> tuple[float, float]:
        mean, std = self.for_basin(basin_id)
        return float(mean[-1]), float(std[-1])

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "d_z": self.d_z,
            "basin_overrides": {
                k: [m.tolist(), s.tolist()] for k, (m, s) in self.basin_overrides.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> NormStats:
        return cls(
            mean=np.asarray(payload["mean"], dtype=np.float64),
            std=np.asarray(payload["std"], dtype=np.float64),
            d_z=int(payload["d_z"]),
            basin_overrides={
                k: (np.asarray(m, dtype=np.float64), np.asarray(s, dtype=np.float64))
                for k, (m, s) in payload.get("basin_overrides", {}).items()
            },
        )


def normalize(values: np.ndarray, mean: np.ndarray | float, std: np.ndarray | float) -> np.ndarray:
    return (values - mean) / std


def denormalize(values: np.ndarray, mean: np.ndarray | float, std: np.ndarray | float) -> np.ndarray:
    return values * std + mean


def _in_range(record: BasinRecord, date_range: DateRange) -> np.ndarray:
    lo = np.datetime64(date_range[0], "D")
    hi = np.datetime64(date_range[1], "D")
    return (record.dates >= lo) & (record.dates <= hi)


def _floored_std(values: np.ndarray, axis: int = 0) -> np.ndarray:
    return np.maximum(np.nanstd(values, axis=axis), STD_FLOOR)


def compute_norm_stats(
    records: Sequence[BasinRecord],
    date_range: DateRange,
    mode: Literal["pooled", "per_basin"] = "pooled",
) -> NormStats:
    """Population mean/std per variable over the given date range.

    Forcings and streamflow are pooled over every basin-day in range (missing
    streamflow ignored); statics are pooled over basins. Std is floored at 1e-8.

    Raises:
        ArgumentError: no basin has a day inside ``date_range``.
    """
    if date_range[0] > date_range[1]:
        raise ArgumentError(f"Empty date range {date_range[0]}..{date_range[1]}")
    dynamic_parts = []
    per_basin: dict[str, np.ndarray] = {}
    for record in records:
        mask = _in_range(record, date_range)
        if mask.any():
            rows = np.column_stack([record.forcings[mask], record.streamflow[mask]])
            dynamic_parts.append(rows)
            per_basin[record.basin_id] = rows
    if not dynamic_parts:
        raise ArgumentError(f"No days fall inside {date_range[0]}..{date_range[1]}")

    dynamic = np.concatenate(dynamic_parts)
    statics = np.stack([r.static for r in records])
    d_z = records[0].forcings.shape[1]

    def layout(dyn_mean: np.ndarray, dyn_std: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = np.concatenate([dyn_mean[:d_z], statics.mean(axis=0), dyn_mean[d_z:]])
        std = np.concatenate([dyn_std[:d_z], _floored_std(statics), dyn_std[d_z:]])
        return mean, std

    mean, std = layout(np.nanmean(dynamic, axis=0), _floored_std(dynamic))
    stats = NormStats(mean=mean, std=std, d_z=d_z)
    if mode == "per_basin":
        for basin_id, rows in per_basin.items():
            stats.basin_overrides[basin_id] = layout(np.nanmean(rows, axis=0), _floored_std(rows))
    logger.debug("[norm] %s statistics over %d basin-days", mode, len(dynamic))
    return stats


def normalize_window(sample: ConditioningTuple, stats: NormStats) -> ConditioningTuple:
    mean, std = stats.for_basin(sample.basin_id)
    d_z = stats.d_z
    return ConditioningTuple(
        basin_id=sample.basin_id,
        init_date=sample.init_date,
        past=normalize(sample.past, mean[:d_z], std[:d_z]),
        future=normalize(sample.future, mean[:d_z], std[:d_z]),
        static=normalize(sample.static, mean[d_z:-1], std[d_z:-1]),
        target=None if sample.target is None else normalize(sample.target, mean[-1], std[-1]),
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


class WindowDataset(Dataset):
    """Normalized training windows stacked into tensors.

    Items are dicts with ``past``, ``future``, ``static``, ``target`` and
    ``target_std`` (std of the basin's normalized streamflow, used by the
    NSE loss), so the default collate function batches them.
    """

    def __init__(
        self,
        past: torch.Tensor,
        future: torch.Tensor,
        static: torch.Tensor,
        target: torch.Tensor,
        target_std: torch.Tensor,
        basin_ids: list[str],
        init_dates: list[date],
    ) -> None:
        self.past = past
        self.future = future
        self.static = static
        self.target = target
        self.target_std = target_std
        self.basin_ids = basin_ids
        self.init_dates = init_dates

    def __len__(self) -> int:
        return self.target.shape[0]

    def __getitem__(self, index: int) -> dict[str, torch.Tensor]:
        return {
            "past": self.past[index],
            "future": self.future[index],
            "static": self.static[index],
            "target": self.target[index],
            "target_std": self.target_std[index],
        }


def batch_conditioning(batch: dict[str, torch.Tensor]) -> ConditioningBatch:
    return ConditioningBatch(past=batch["past"], future=batch["future"], static=batch["static"])


def build_dataset(
    records: Sequence[BasinRecord],
    stats: NormStats,
    cfg: BackboneConfig,
    date_range: DateRange,
    dtype: torch.dtype | None = None,
) -> WindowDataset:
    """All windows whose targets lie inside ``date_range`` and have no gaps."""
    dtype = dtype or torch.get_default_dtype()
    samples: list[ConditioningTuple] = []
    stds: list[float] = []
    for record in records:
        windows = make_windows(record, cfg, within=date_range, require_target=True)
        _, flow_std = stats.flow(record.basin_id)
        observed = record.streamflow[_in_range(record, date_range)]
        basin_std = float(np.nanstd(observed)) / flow_std if np.isfinite(observed).any() else 1.0
        for sample in windows:
            samples.append(normalize_window(sample, stats))
            stds.append(basin_std)
    if not samples:
        raise ArgumentError(f"No complete windows inside {date_range[0]}..{date_range[1]}")

    def stack(name: str) -> torch.Tensor:
        return torch.from_numpy(np.stack([getattr(s, name) for s in samples])).to(dtype)

    logger.info("[dataset] %d windows from %d basins", len(samples), len(records))
    return WindowDataset(
        past=stack("past"),
        future=stack("future"),
        static=stack("static"),
        target=stack("target"),
        target_std=torch.tensor(stds, dtype=dtype),
        basin_ids=[s.basin_id for s in samples],
        init_dates=[s.init_date for s in samples],
    )


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Splits:
    train: DateRange
    val: DateRange
    test: DateRange

    def get(self, name: str) -> DateRange:
        return getattr(self, name)


def _add_years(day: date, years: int) -> date:
    try:
        return day.replace(year=day.year + years)
    except ValueError:
        # Feb 29 into a non-leap year
        return day.replace(year=day.year + years, day=28)


def default_splits(start: date) -> Splits:
    """Years 1-6 train, year 7 validation, years 8-10 test."""
    one_day = timedelta(days=1)
    return Splits(
        train=(start, _add_years(start, 6) - one_day),
        val=(_add_years(start, 6), _add_years(start, 7) - one_day),
        test=(_add_years(start, 7), _add_years(start, 10) - one_day),
    )


def resolve_splits(cfg: SplitConfig, start: date) -> Splits:
    """Explicit split dates where configured, the default layout elsewhere."""
    base = default_splits(start)
    splits = Splits(
        train=(cfg.train_start or base.train[0], cfg.train_end or base.train[1]),
        val=(cfg.val_start or base.val[0], cfg.val_end or base.val[1]),
        test=(cfg.test_start or base.test[0], cfg.test_end or base.test[1]),
    )
    for name in ("train", "val", "test"):
        lo, hi = splits.get(name)
        if lo > hi:
            raise ArgumentError(f"Split {name} is empty: {lo}..{hi}")
    return splits


# ---------------------------------------------------------------------------
# Synthetic basins
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticBasinParams:
    """Linear-reservoir basin: recession ``k``, rain process and temperature cycle."""

    k: float
    rain_prob: float
    rain_scale: float
    temp_mean: float = 10.0
    temp_amplitude: float = 10.0
    initial_storage: float = 20.0

    def validate(self) -> None:
        if not 0.0 < self.k < 1.0:
            raise ArgumentError(f"k must lie in (0, 1), got {self.k}")
        if not 0.0 <= self.rain_prob <= 1.0:
            raise ArgumentError(f"rain_prob must lie in [0, 1], got {self.rain_prob}")
        if self.rain_scale <= 0.0:
            raise ArgumentError(f"rain_scale must be positive, got {self.rain_scale}")
        if self.temp_amplitude < 0.0:
            raise ArgumentError(f"temp_amplitude must be >= 0, got {self.temp_amplitude}")
        if self.initial_storage < 0.0:
            raise ArgumentError(f"initial_storage must be >= 0, got {self.initial_storage}")


def derive_vapor_pressure(q: np.ndarray | float, p: np.ndarray | float) -> np.ndarray | float:
    """Vapor pressure (Pa) from specific humidity ``q`` (kg/kg) and pressure ``p`` (Pa)."""
    q_arr = np.asarray(q, dtype=np.float64)
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((q_arr < 0.0) | (q_arr >= 1.0)):
        raise ArgumentError("Specific humidity must lie in [0, 1)")
    if np.any(p_arr <= 0.0):
        raise ArgumentError("Pressure must be positive")
    e = q_arr * p_arr / (0.622 + 0.378 * q_arr)
    return float(e) if e.ndim == 0 else e


def linear_reservoir(
    precip: np.ndarray, k: float, initial_storage: float
) -> tuple[np.ndarray, np.ndarray]:
    """``q_t = k*S_t`` and ``S_{t+1} = S_t + P_t - q_t``.

    Returns:
        (streamflow, storage) with ``storage`` one element longer than ``precip``.
    """
    storage = np.empty(len(precip) + 1)
    flow = np.empty(len(precip))
    storage[0] = initial_storage
    for t, p in enumerate(precip):
        flow[t] = k * storage[t]
        storage[t + 1] = storage[t] + p - flow[t]
    return flow, storage


def _mean_run_length(mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return float(np.mean(ends - starts))


def synthetic_basin(
    seed: int,
    n_days: int,
    params: SyntheticBasinParams,
    basin_id: str = "synthetic",
    start: date = date(2000, 1, 1),
) -> BasinRecord:
    """Seeded synthetic basin driven by a linear reservoir.

    Precipitation is Bernoulli(rain_prob) x Exponential(rain_scale); the
    temperature, radiation and humidity series follow an annual sine with
    seeded noise; climate statics are computed from the series and the
    remaining statics are drawn, two of them tied to ``k``.
    """
    if n_days < 400:
        raise ArgumentError(f"n_days must be >= 400, got {n_days}")
    params.validate()
    rng = philox_generator(seed)

    dates = np.arange(np.datetime64(start, "D"), np.datetime64(start, "D") + n_days)
    doy = (dates - dates.astype("datetime64[Y]")).astype(np.int64) + 1
    season = np.sin(2.0 * math.pi * (doy - 110) / 365.25)

    wet = rng.random(n_days) < params.rain_prob
    precip = np.where(wet, rng.exponential(params.rain_scale, n_days), 0.0)

    tmean = params.temp_mean + params.temp_amplitude * season + rng.normal(0.0, 2.0, n_days)
    spread = 4.0 + np.abs(rng.normal(2.0, 1.0, n_days))
    tmax = tmean + 0.5 * spread
    tmin = tmean - 0.5 * spread
    srad = np.maximum(200.0 + 100.0 * season - 60.0 * wet + rng.normal(0.0, 15.0, n_days), 0.0)

    elevation = rng.uniform(100.0, 2500.0)
    surface_pressure = 101325.0 * math.exp(-elevation / 8434.0)
    humidity = np.clip(0.007 + 0.004 * season + 0.002 * wet + rng.normal(0.0, 5e-4, n_days), 1e-4, 0.03)
    vp = derive_vapor_pressure(humidity, surface_pressure)

    flow, _ = linear_reservoir(precip, params.k, params.initial_storage)

    p_mean = float(precip.mean())
    pet = np.maximum(0.0023 * 0.408 * (tmean + 17.8) * np.sqrt(spread) * srad * 0.0864, 0.0)
    pet_mean = float(pet.mean())
    high = precip >= 5.0 * p_mean if p_mean > 0 else np.zeros(n_days, dtype=bool)
    dry = precip < 1.0
    snow = tmean < 0.0
    values = {
        "p_mean": p_mean,
        "pet_mean": pet_mean,
        "aridity": pet_mean / p_mean if p_mean > 0 else 0.0,
        "p_seasonality": rng.uniform(-1.0, 1.0),
        "frac_snow": float(precip[snow].sum() / precip.sum()) if precip.sum() > 0 else 0.0,
        "high_prec_freq": float(high.mean()),
        "high_prec_dur": _mean_run_length(high),
        "low_prec_freq": float(dry.mean()),
        "low_prec_dur": _mean_run_length(dry),
        "elev_mean": elevation,
        "slope_mean": 5.0 + 300.0 * params.k,
        "area_gages2": rng.uniform(50.0, 3000.0),
        "frac_forest": rng.uniform(0.0, 1.0),
        "lai_max": rng.uniform(1.0, 5.5),
        "lai_diff": rng.uniform(0.5, 4.5),
        "gvf_max": rng.uniform(0.3, 0.95),
        "gvf_diff": rng.uniform(0.05, 0.6),
        "soil_depth_pelletier": rng.uniform(0.5, 50.0),
        "soil_depth_statsgo": rng.uniform(0.4, 1.5),
        "soil_porosity": rng.uniform(0.35, 0.55),
        "soil_conductivity": 0.5 + 10.0 * params.k,
        "max_water_content": rng.uniform(0.1, 1.0),
        "sand_frac": rng.uniform(10.0, 80.0),
        "silt_frac": rng.uniform(5.0, 60.0),
        "clay_frac": rng.uniform(5.0, 40.0),
        "carbonate_rocks_frac": rng.uniform(0.0, 0.5),
        "geol_permeability": rng.uniform(-16.0, -12.0),
    }
    static = np.array([values[name] for name in STATIC_ATTRIBUTES])

    return BasinRecord(
        basin_id=basin_id,
        dates=dates,
        forcings=np.column_stack([precip, tmax, tmin, srad, vp]),
        streamflow=flow,
        static=static,
    )


def synthetic_dataset(seed: int, cfg: DataConfig) -> list[BasinRecord]:
    """``cfg.n_basins`` synthetic basins, each with its own derived seed."""
    records = []
    width = max(2, len(str(cfg.n_basins)))
    for i in range(cfg.n_basins):
        basin_id = f"basin_{i:0{width}d}"
        basin_seed = derive_seed(seed, f"synthetic/{basin_id}")
        params = _draw_params(basin_seed, cfg.synthetic)
        records.append(synthetic_basin(basin_seed, cfg.n_days, params, basin_id, cfg.start_date))
        logger.debug("[synthetic] %s k=%.3f rain_prob=%.2f", basin_id, params.k, params.rain_prob)
    return records


def _draw_params(seed: int, cfg: SyntheticConfig) -> SyntheticBasinParams:
    rng = philox_generator(seed, stream=1)
    return SyntheticBasinParams(
        k=float(rng.uniform(*cfg.k_range)),
        rain_prob=float(rng.uniform(*cfg.rain_prob_range)),
        rain_scale=float(rng.uniform(*cfg.rain_scale_range)),
        temp_mean=float(rng.uniform(*cfg.temp_mean_range)),
        temp_amplitude=float(rng.uniform(*cfg.temp_amplitude_range)),
        initial_storage=cfg.initial_storage,
    )


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_frame(frame: pd.DataFrame, path: Path) -> None:
    atomic_write_text(
        path, frame.to_csv(index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")
    )


def write_json(payload: dict[str, Any], path: Path) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------


def _read_strings(path: Path, header: Sequence[str]) -> pd.DataFrame:
    """Read every field as a string and check the header and row widths."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise EmptyRecordError(f"{path}: file is empty", line=1) from exc
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise ParseError(
            f"{path}: wrong number of columns", line=int(match.group(1)) if match else None
        ) from exc
    if tuple(frame.columns) != tuple(header):
        raise ParseError(
            f"{path}: expected header {','.join(header)}, got {','.join(map(str, frame.columns))}",
            line=1,
        )
    if frame.empty:
        raise EmptyRecordError(f"{path}: header but no data rows", line=1)
    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        row = int(np.flatnonzero(short)[0])
        raise ParseError(f"{path}: expected {len(header)} fields", line=row + 2)
    return frame


def _parse_floats(path: Path, column: pd.Series, allow_empty: bool) -> np.ndarray:
    out = np.empty(len(column))
    for row, text in enumerate(column.to_numpy()):
        if text == "":
            if not allow_empty:
                raise ParseError(f"{path}: empty {column.name} value", line=row + 2)
            out[row] = np.nan
            continue
        try:
            out[row] = float(text)
        except ValueError as exc:
            raise ParseError(f"{path}: bad {column.name} value {text!r}", line=row + 2) from exc
    return out


def _parse_dates(path: Path, column: pd.Series) -> np.ndarray:
    parsed = pd.to_datetime(column, format=_DATE_FORMAT, errors="coerce")
    bad = parsed.isna().to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(f"{path}: malformed date {column.iloc[row]!r}", line=row + 2)
    return parsed.to_numpy().astype("datetime64[D]")


def load_basin_csv(
    path: str | Path, static: np.ndarray | None = None, basin_id: str | None = None
) -> BasinRecord:
    """Parse ``date,prcp,tmax,tmin,srad,vp,qobs``; the basin id defaults to the file stem.

    Raises:
        EmptyRecordError: header only.
        ParseError: malformed dates or numbers, wrong column counts, duplicate
            or non-contiguous dates, negative precipitation.
    """
    path = Path(path)
    frame = _read_strings(path, BASIN_HEADER)
    dates = _parse_dates(path, frame["date"])

    seen: dict[np.datetime64, int] = {}
    for row, day in enumerate(dates):
        if day in seen:
            raise ParseError(f"{path}: duplicate date {day}", line=row + 2)
        seen[day] = row
    gaps = np.flatnonzero(np.diff(dates).astype(np.int64) != 1)
    if gaps.size:
        row = int(gaps[0]) + 1
        raise ParseError(f"{path}: dates not contiguous at {dates[row]}", line=row + 2)

    forcings = np.column_stack([_parse_floats(path, frame[c], allow_empty=False) for c in FORCING_COLUMNS])
    negative = np.flatnonzero(forcings[:, 0] < 0)
    if negative.size:
        raise ParseError(f"{path}: negative precipitation", line=int(negative[0]) + 2)
    if not np.isfinite(forcings).all():
        row = int(np.flatnonzero(~np.isfinite(forcings).all(axis=1))[0])
        raise ParseError(f"{path}: non-finite forcing", line=row + 2)
    streamflow = _parse_floats(path, frame[TARGET_COLUMN], allow_empty=True)

    return BasinRecord(
        basin_id=basin_id or path.stem,
        dates=dates,
        forcings=forcings,
        streamflow=streamflow,
        static=np.zeros(0) if static is None else np.asarray(static, dtype=np.float64),
    )


def write_basin_csv(record: BasinRecord, path: str | Path) -> None:
    frame = pd.DataFrame(record.forcings, columns=list(FORCING_COLUMNS))
    frame.insert(0, "date", pd.to_datetime(record.dates).strftime(_DATE_FORMAT))
    frame[TARGET_COLUMN] = record.streamflow
    write_frame(frame, Path(path))


def write_static_csv(records: Sequence[BasinRecord], path: str | Path) -> None:
    frame = pd.DataFrame([r.static for r in records], columns=list(STATIC_ATTRIBUTES))
    frame.insert(0, "basin_id", [r.basin_id for r in records])
    write_frame(frame, Path(path))


def load_static_csv(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    frame = _read_strings(path, ("basin_id", *STATIC_ATTRIBUTES))
    values = np.column_stack(
        [_parse_floats(path, frame[c], allow_empty=False) for c in STATIC_ATTRIBUTES]
    )
    duplicated = frame["basin_id"].duplicated().to_numpy()
    if duplicated.any():
        row = int(np.flatnonzero(duplicated)[0])
        raise ParseError(f"{path}: duplicate basin {frame['basin_id'].iloc[row]}", line=row + 2)
    return {basin_id: values[i] for i, basin_id in enumerate(frame["basin_id"])}


def write_dataset(records: Sequence[BasinRecord], data_dir: str | Path, manifest: dict[str, Any]) -> None:
    data_dir = Path(data_dir)
    for record in records:
        write_basin_csv(record, data_dir / BASIN_DIR / f"{record.basin_id}.csv")
    write_static_csv(records, data_dir / STATIC_FILE)
    write_json(manifest, data_dir / MANIFEST_FILE)


def load_dataset(data_dir: str | Path) -> list[BasinRecord]:
    """Every basin listed in the static table, in table order."""
    data_dir = Path(data_dir)
    static_path = data_dir / STATIC_FILE
    if not static_path.exists():
        raise FileNotFoundError(f"No {STATIC_FILE} in {data_dir}")
    statics = load_static_csv(static_path)
    records = []
    for basin_id, static in statics.items():
        records.append(load_basin_csv(data_dir / BASIN_DIR / f"{basin_id}.csv", static, basin_id))
    logger.info("[data] loaded %d basins from %s", len(records), data_dir)
    return records


def write_forecast_csv(forecasts: pd.DataFrame, path: str | Path) -> None:
    """Write rows of ``basin_id,init_date,lead_days,member,value``."""
    missing = [c for c in FORECAST_HEADER if c not in forecasts.columns]
    if missing:
        raise ArgumentError(f"Forecast table lacks columns {missing}")
    frame = forecasts.loc[:, list(FORECAST_HEADER)].copy()
    frame["init_date"] = pd.to_datetime(frame["init_date"]).dt.strftime(_DATE_FORMAT)
    write_frame(frame, Path(path))


def read_forecast_csv(path: str | Path) -> pd.DataFrame:
    """Parse a forecast CSV; ``init_date`` becomes ``datetime.date`` objects."""
    path = Path(path)
    frame = _read_strings(path, FORECAST_HEADER)
    dates = _parse_dates(path, frame["init_date"])
    ints = {}
    for name in ("lead_days", "member"):
        parsed = pd.to_numeric(frame[name], errors="coerce")
        bad = parsed.isna().to_numpy() | (parsed.to_numpy() % 1 != 0)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ParseError(f"{path}: bad {name} value {frame[name].iloc[row]!r}", line=row + 2)
        ints[name] = parsed.to_numpy().astype(np.int64)
    return pd.DataFrame(
        {
            "basin_id": frame["basin_id"].to_numpy(),
            "init_date": [d.astype(object) for d in dates],
            "lead_days": ints["lead_days"],
            "member": ints["member"],
            "value": _parse_floats(path, frame["value"], allow_empty=False),
        }
    )
