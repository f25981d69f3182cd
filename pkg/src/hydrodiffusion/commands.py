"""Batch commands shared by the CLI and the experiment pipeline.

Each command reads its inputs from disk, runs one stage and writes its
outputs atomically into a directory:

    generate-data  basins/<id>.csv, static_attributes.csv, manifest.json
    train          model.ckpt, loss_trace.csv
    forecast       forecasts.csv, manifest.json
    climatology    forecasts.csv, manifest.json
    evaluate       metrics.csv and the diagnostic tables
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

from hydrodiffusion.checkpoint import load_checkpoint, save_checkpoint
from hydrodiffusion.config import resolve_kind_config, torch_dtype
from hydrodiffusion.data import (
    BasinRecord,
    build_dataset,
    compute_norm_stats,
    load_dataset,
    read_forecast_csv,
    resolve_splits,
    synthetic_dataset,
    write_dataset,
    write_forecast_csv,
    write_frame,
    write_json,
)
from hydrodiffusion.errors import ArgumentError
from hydrodiffusion.evaluation import EvaluationReport, evaluate_forecasts
from hydrodiffusion.forecasting import ForecastOutput, climatology_ensemble, forecast_basins
from hydrodiffusion.models import ModelKind, RunConfig
from hydrodiffusion.registry import build_model, count_parameters
from hydrodiffusion.training import FitResult, ResumeState, fit

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.ckpt"
LOSS_TRACE_FILE = "loss_trace.csv"
FORECAST_FILE = "forecasts.csv"
FORECAST_MANIFEST = "manifest.json"


def config_hash(config: RunConfig) -> str:
    """Stable digest of the validated configuration."""
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    return hashlib.blake2b(payload, digest_size=16).hexdigest()


def parse_dates(text: str) -> list[date]:
    """``"2008-01-01..2008-01-10"`` (inclusive) or a comma list of ISO dates."""
    try:
        if ".." in text:
            lo, hi = (date.fromisoformat(part.strip()) for part in text.split("..", 1))
            if lo > hi:
                raise ArgumentError(f"Empty date range {text!r}")
            return [lo + timedelta(days=i) for i in range((hi - lo).days + 1)]
        dates = [date.fromisoformat(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ArgumentError(f"Bad date specification {text!r}: {exc}") from exc
    if not dates:
        raise ArgumentError("No dates given")
    return dates


def _load_records(data_dir: Path) -> list[BasinRecord]:
    if not data_dir.exists():
        raise ArgumentError(f"Data directory not found: {data_dir}")
    return load_dataset(data_dir)


# ---------------------------------------------------------------------------
# generate-data
# ---------------------------------------------------------------------------


def cmd_generate_data(config: RunConfig, out_dir: Path) -> list[BasinRecord]:
    """Write ``config.data.n_basins`` synthetic basins into ``out_dir``."""
    records = synthetic_dataset(config.seed, config.data)
    manifest = {
        "seed": config.seed,
        "config_hash": config_hash(config),
        "n_basins": len(records),
        "n_days": config.data.n_days,
        "start_date": config.data.start_date.isoformat(),
        "basins": [r.basin_id for r in records],
        "synthetic": config.data.synthetic.model_dump(mode="json"),
    }
    write_dataset(records, out_dir, manifest)
    logger.info("[generate-data] wrote %d basins to %s", len(records), out_dir)
    return records


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@dataclass
class TrainOutcome:
    checkpoint: Path
    loss_trace: Path
    fit: FitResult


def cmd_train(
    config: RunConfig,
    data_dir: Path,
    out_dir: Path,
    kind: ModelKind | None = None,
    resume_from: Path | None = None,
) -> TrainOutcome:
    """Train one model kind and write its checkpoint and loss trace.

    Args:
        config: Run configuration; the kind's preset fills keys it leaves unset.
        data_dir: Directory written by ``cmd_generate_data``.
        out_dir: Where ``model.ckpt`` and ``loss_trace.csv`` go.
        kind: Model kind; ``config.model.kind`` when None.
        resume_from: Checkpoint to continue from. Its kind must match.

    Raises:
        CheckpointError: ``resume_from`` holds another kind.
        TrainingDivergedError: the training loss stops being finite.
    """
    kind = ModelKind(kind or config.model.kind)
    config = resolve_kind_config(config, kind)
    records = _load_records(data_dir)
    splits = resolve_splits(config.splits, records[0].start)
    dtype = torch_dtype(config)
    seed = config.train.seed if config.train.seed is not None else config.seed

    stored = config.model_copy(deep=True)
    resume = None
    if resume_from is not None:
        loaded = load_checkpoint(resume_from, expected_kind=kind)
        model, stats = loaded.model, loaded.norm_stats
        stored.model = loaded.config.model
        resume = ResumeState(
            epoch=loaded.epoch,
            step=loaded.step,
            optimizer_state=loaded.optimizer_state,
            model_state=loaded.last_state,
            best_val=loaded.best_val,
            selected_epoch=loaded.selected_epoch,
        )
    else:
        stats = compute_norm_stats(records, splits.train, config.data.normalization)
        model = build_model(kind, config.model, seed, dropout=config.train.dropout, dtype=dtype)

    backbone = stored.model.backbone
    train_set = build_dataset(records, stats, backbone, splits.train, dtype)
    try:
        val_set = build_dataset(records, stats, backbone, splits.val, dtype)
    except ArgumentError as exc:
        logger.warning("[train] no validation windows: %s", exc)
        val_set = None

    logger.info(
        "[train] %s: %d parameters, %d training windows", kind.value, count_parameters(model), len(train_set)
    )
    result = fit(model, kind, train_set, val_set, config.train, seed, resume=resume)

    checkpoint = out_dir / CHECKPOINT_FILE
    trace = out_dir / LOSS_TRACE_FILE
    save_checkpoint(
        checkpoint,
        result.model,
        kind,
        stored,
        stats,
        step=result.step,
        epoch=result.epoch,
        optimizer_state=result.optimizer_state,
        last_state=result.last_state,
        best_val=result.best_val,
        selected_epoch=result.selected_epoch,
    )
    write_frame(result.trace, trace)
    return TrainOutcome(checkpoint=checkpoint, loss_trace=trace, fit=result)


# ---------------------------------------------------------------------------
# forecast / climatology
# ---------------------------------------------------------------------------


def _write_forecasts(output: ForecastOutput, out_dir: Path, manifest: dict[str, object]) -> Path:
    path = out_dir / FORECAST_FILE
    write_forecast_csv(output.frame, path)
    write_json({**manifest, **output.manifest()}, out_dir / FORECAST_MANIFEST)
    return path


def cmd_forecast(
    config: RunConfig,
    checkpoint: Path,
    data_dir: Path,
    out_dir: Path,
    dates: Sequence[date] | None = None,
) -> ForecastOutput:
    """Sample ensembles (or direct predictions) for the configured split or explicit dates."""
    loaded = load_checkpoint(checkpoint)
    records = _load_records(data_dir)
    within = None
    if dates is None:
        within = resolve_splits(config.splits, records[0].start).get(config.forecast.split)
    output = forecast_basins(
        loaded.model,
        loaded.kind,
        records,
        loaded.norm_stats,
        loaded.config.model.backbone,
        config.diffusion,
        config.forecast,
        config.seed,
        dates=dates,
        within=within,
    )
    _write_forecasts(
        output,
        out_dir,
        {
            "kind": loaded.kind.value,
            "seed": config.seed,
            "config_hash": config_hash(config),
            "members": config.forecast.members if loaded.kind.is_diffusion else 1,
            "sample_steps": config.diffusion.sample_steps,
            "split": None if dates is not None else config.forecast.split,
        },
    )
    logger.info("[forecast] %d rows written to %s", len(output.frame), out_dir)
    return output


def cmd_climatology(
    config: RunConfig,
    data_dir: Path,
    out_dir: Path,
    dates: Sequence[date] | None = None,
) -> ForecastOutput:
    """Historical same-day-of-year reference ensembles in the forecast CSV schema."""
    records = _load_records(data_dir)
    splits = resolve_splits(config.splits, records[0].start)
    output = climatology_ensemble(
        records,
        config.model.backbone,
        splits.train,
        config.forecast.members,
        config.seed,
        dates=dates,
        within=None if dates is not None else splits.get(config.forecast.split),
        date_stride=config.forecast.date_stride,
    )
    _write_forecasts(
        output,
        out_dir,
        {
            "kind": "climatology",
            "seed": config.seed,
            "config_hash": config_hash(config),
            "members": config.forecast.members,
        },
    )
    return output


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(
    config: RunConfig,
    forecasts: Path,
    data_dir: Path,
    out_dir: Path,
    reference: Path | None = None,
    leads: Sequence[int] | None = None,
) -> EvaluationReport:
    """Score a forecast CSV against the observations and write the report tables."""
    records = _load_records(data_dir)
    report = evaluate_forecasts(
        read_forecast_csv(forecasts),
        records,
        config.evaluation,
        reference=read_forecast_csv(reference) if reference is not None else None,
        leads=leads,
    )
    report.write(out_dir)
    return report
