"""Small builders shared by the test modules."""

from __future__ import annotations

from datetime import date
from pathlib import Path

import numpy as np
import torch

from hydrodiffusion.config import CONFIG_DIR, load_run_config
from hydrodiffusion.data import STATIC_ATTRIBUTES, BasinRecord, ConditioningBatch
from hydrodiffusion.models import BackboneConfig, RunConfig


def toy_backbone(**overrides) -> BackboneConfig:
    """l_p=9, l_f=8, l_ff=7, d_z=2, d_s=3, H=n=4, one layer, no dropout."""
    values = dict(
        d_model=4,
        d_state=4,
        n_layers=1,
        tuning_init="identity",
        dropout=0.0,
        time_embedding_dim=4,
        l_p=9,
        l_f=8,
        l_ff=7,
        d_z=2,
        d_s=3,
    )
    values.update(overrides)
    return BackboneConfig(**values)


def random_cond(cfg: BackboneConfig, batch: int, seed: int = 0) -> ConditioningBatch:
    gen = torch.Generator().manual_seed(seed)
    return ConditioningBatch(
        past=torch.randn(batch, cfg.l_p, cfg.d_z, generator=gen),
        future=torch.randn(batch, cfg.l_ff, cfg.d_z, generator=gen),
        static=torch.randn(batch, cfg.d_s, generator=gen),
    )


def make_record(
    basin_id: str = "b0",
    n_days: int = 60,
    d_z: int = 5,
    d_s: int = len(STATIC_ATTRIBUTES),
    seed: int = 0,
    start: date = date(2000, 1, 1),
) -> BasinRecord:
    """Record whose forcing column j on day t equals ``100*j + t`` (precipitation >= 0)."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_days, dtype=np.float64)
    forcings = np.column_stack([100.0 * j + t for j in range(d_z)])
    dates = np.arange(np.datetime64(start, "D"), np.datetime64(start, "D") + n_days)
    return BasinRecord(
        basin_id=basin_id,
        dates=dates,
        forcings=forcings,
        streamflow=1.0 + rng.random(n_days),
        static=rng.random(d_s),
    )


def toy_run_config(tmp_path: Path, **overrides) -> RunConfig:
    """config/toy.yaml with its data and output directories moved under ``tmp_path``."""
    base = {"output_dir": str(tmp_path / "runs"), "data": {"data_dir": str(tmp_path / "data")}}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return load_run_config(CONFIG_DIR / "toy.yaml", base)
