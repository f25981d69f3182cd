"""LangGraph node implementations for the desk-scale experiment pipeline.

Nodes:
    1. generate_data         synthetic basins into <output>/data
    2. train_models          one checkpoint per configured model kind
    3. forecast_models       test-split forecasts per kind
    4. climatology_reference same-day-of-year reference ensembles
    5. evaluate_models       metric reports with skill against the reference
    6. summarize             acceptance summary (summary.json)

Any input or numerical failure marks the state as failed; the routers then
send the graph to its end node and the CLI maps ``exit_code`` to the process
exit status.
"""

from __future__ import annotations

import functools
import logging
from collections.abc import Callable
from pathlib import Path
from typing import Any

from hydrodiffusion.commands import (
    cmd_climatology,
    cmd_evaluate,
    cmd_forecast,
    cmd_generate_data,
    cmd_train,
)
from hydrodiffusion.data import write_json
from hydrodiffusion.errors import EXIT_OK, HydroDiffusionError, exit_code_for
from hydrodiffusion.evaluation import EvaluationReport, load_report
from hydrodiffusion.models import ExperimentState, ModelKind

logger = logging.getLogger(__name__)

CLIMATOLOGY = "climatology"
SUMMARY_FILE = "summary.json"

# Acceptance thresholds of the desk-scale experiment
MIN_DETERMINISTIC_NSE = 0.70
MIN_ENSEMBLE_NSE = 0.50
MAX_NSE_DRIFT = 0.10
MAX_P_VALUE = 0.05


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _log_node_io(node_name: str, direction: str, data: dict[str, Any]) -> None:
    """Log node input or output, summarizing the config object."""
    summary = {k: ("<RunConfig>" if k == "config" else v) for k, v in data.items()}
    logger.info("[%s] %s: %s", node_name, direction, summary)


def _guarded(node: Callable[[ExperimentState], dict[str, Any]]) -> Callable[[ExperimentState], dict[str, Any]]:
    """Turn package, file and value errors into a failed state instead of raising."""

    @functools.wraps(node)
    def wrapper(state: ExperimentState) -> dict[str, Any]:
        try:
            return node(state)
        except (HydroDiffusionError, OSError, ValueError) as exc:
            code = exit_code_for(exc)
            logger.error("[%s] failed (exit %d): %s", node.__name__, code, exc)
            return {"failed": True, "error": f"{node.__name__}: {exc}", "exit_code": code}

    return wrapper


def _output_dir(state: ExperimentState) -> Path:
    return Path(state["output_dir"])


# ---------------------------------------------------------------------------
# Node 1: Generate data
# ---------------------------------------------------------------------------


@_guarded
def generate_data(state: ExperimentState) -> dict[str, Any]:
    config = state["config"]
    logger.info(
        "[generate_data] Node Input: basins: %d | days: %d | seed: %d",
        config.data.n_basins,
        config.data.n_days,
        config.seed,
    )
    data_dir = _output_dir(state) / "data"
    cmd_generate_data(config, data_dir)
    output = {"data_dir": str(data_dir)}
    _log_node_io("generate_data", "Node Output", output)
    return output


# ---------------------------------------------------------------------------
# Node 2: Train
# ---------------------------------------------------------------------------


@_guarded
def train_models(state: ExperimentState) -> dict[str, Any]:
    config = state["config"]
    kinds = config.experiment.kinds
    logger.info("[train_models] Node Input: kinds: %s", [k.value for k in kinds])
    checkpoints = dict(state.get("checkpoints", {}))
    for kind in kinds:
        outcome = cmd_train(config, Path(state["data_dir"]), _output_dir(state) / "models" / kind.value, kind)
        checkpoints[kind.value] = str(outcome.checkpoint)
        logger.info(
            "[train_models] %s selected epoch %d of %d", kind.value, outcome.fit.selected_epoch, outcome.fit.epoch
        )
    output = {"checkpoints": checkpoints}
    _log_node_io("train_models", "Node Output", output)
    return output


# ---------------------------------------------------------------------------
# Node 3: Forecast
# ---------------------------------------------------------------------------


@_guarded
def forecast_models(state: ExperimentState) -> dict[str, Any]:
    config = state["config"]
    logger.info(
        "[forecast_models] Node Input: checkpoints: %d | members: %d | split: %s",
        len(state["checkpoints"]),
        config.forecast.members,
        config.forecast.split,
    )
    forecasts = dict(state.get("forecasts", {}))
    for kind, checkpoint in state["checkpoints"].items():
        out_dir = _output_dir(state) / "forecasts" / kind
        cmd_forecast(config, Path(checkpoint), Path(state["data_dir"]), out_dir)
        forecasts[kind] = str(out_dir / "forecasts.csv")
    output = {"forecasts": forecasts}
    _log_node_io("forecast_models", "Node Output", output)
    return output


# ---------------------------------------------------------------------------
# Node 4: Climatology reference
# ---------------------------------------------------------------------------


@_guarded
def climatology_reference(state: ExperimentState) -> dict[str, Any]:
    config = state["config"]
    logger.info("[climatology_reference] Node Input: reference: %s", config.experiment.reference)
    out_dir = _output_dir(state) / "forecasts" / CLIMATOLOGY
    cmd_climatology(config, Path(state["data_dir"]), out_dir)
    forecasts = {**state["forecasts"], CLIMATOLOGY: str(out_dir / "forecasts.csv")}
    output = {"forecasts": forecasts}
    _log_node_io("climatology_reference", "Node Output", output)
    return output


# ---------------------------------------------------------------------------
# Node 5: Evaluate
# ---------------------------------------------------------------------------


@_guarded
def evaluate_models(state: ExperimentState) -> dict[str, Any]:
    config = state["config"]
    logger.info("[evaluate_models] Node Input: forecasts: %s", sorted(state["forecasts"]))
    reference = Path(state["forecasts"][CLIMATOLOGY])
    reports = dict(state.get("reports", {}))
    for kind, path in state["forecasts"].items():
        if kind == CLIMATOLOGY:
            continue
        out_dir = _output_dir(state) / "reports" / kind
        cmd_evaluate(config, Path(path), Path(state["data_dir"]), out_dir, reference=reference)
        reports[kind] = str(out_dir)
    output = {"reports": reports}
    _log_node_io("evaluate_models", "Node Output", output)
    return output


# ---------------------------------------------------------------------------
# Node 6: Summarize
# ---------------------------------------------------------------------------


def acceptance_summary(reports: dict[str, EvaluationReport], last_lead: int) -> dict[str, float]:
    """Median NSE at Day-0 and the last lead, CRPSS per lead and its p-value.

    Checks are stored as 1.0 (met) or 0.0 (not met); a check whose model kind
    was not run is left out.
    """
    summary: dict[str, float] = {}
    for kind, report in reports.items():
        summary[f"{kind}/nse_day0"] = report.median("nse", 0)
        summary[f"{kind}/nse_day{last_lead}"] = report.median("nse", last_lead)
        for lead in sorted(report.metrics["lead_days"].unique()):
            summary[f"{kind}/crpss_day{lead}"] = report.median("crpss", int(lead))
            summary[f"{kind}/crpss_p_day{lead}"] = report.p_value("crpss", int(lead))

    deterministic = ModelKind.DETERMINISTIC_SSM.value
    if deterministic in reports:
        summary["check/deterministic_nse"] = float(summary[f"{deterministic}/nse_day0"] >= MIN_DETERMINISTIC_NSE)

    diffusion = ModelKind.HYDRODIFFUSION.value
    if diffusion in reports:
        day0 = summary[f"{diffusion}/nse_day0"]
        last = summary[f"{diffusion}/nse_day{last_lead}"]
        summary["check/ensemble_nse"] = float(day0 >= MIN_ENSEMBLE_NSE)
        summary["check/ensemble_coherence"] = float(abs(day0 - last) <= MAX_NSE_DRIFT)
        leads = sorted(reports[diffusion].metrics["lead_days"].unique())
        skillful = all(summary[f"{diffusion}/crpss_day{lead}"] > 0 for lead in leads)
        significant = all(summary[f"{diffusion}/crpss_p_day{lead}"] < MAX_P_VALUE for lead in leads)
        summary["check/crpss_positive"] = float(skillful)
        summary["check/crpss_significant"] = float(significant)
    return summary


@_guarded
def summarize(state: ExperimentState) -> dict[str, Any]:
    config = state["config"]
    logger.info("[summarize] Node Input: reports: %s", sorted(state["reports"]))
    reports = {kind: load_report(Path(path)) for kind, path in state["reports"].items()}
    summary = acceptance_summary(reports, config.model.backbone.l_f - 1)
    write_json(summary, _output_dir(state) / SUMMARY_FILE)
    for key, value in summary.items():
        if key.startswith("check/"):
            logger.info("[summarize] %s: %s", key, "met" if value == 1.0 else "NOT met")
    output = {"summary": summary, "exit_code": EXIT_OK}
    _log_node_io("summarize", "Node Output", {"summary": f"[{len(summary)} values]"})
    return output


# ---------------------------------------------------------------------------
# Routers
# ---------------------------------------------------------------------------


def route_on_failure(state: ExperimentState) -> str:
    """Continue to the next stage unless the previous node failed."""
    if state.get("failed"):
        logger.warning("[route_on_failure] failed → end (%s)", state.get("error", ""))
        return "end"
    return "continue"
