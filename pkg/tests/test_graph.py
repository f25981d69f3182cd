"""Tests for the experiment pipeline nodes and graph."""

import json

import pandas as pd
import pytest

from hydrodiffusion.errors import EXIT_INPUT, EXIT_OK
from hydrodiffusion.evaluation import EvaluationReport
from hydrodiffusion.graph import build_experiment_graph
from hydrodiffusion.nodes import (
    SUMMARY_FILE,
    acceptance_summary,
    generate_data,
    route_on_failure,
    train_models,
)

from tests.helpers import toy_run_config


def _initial_state(config):
    return {
        "config": config,
        "output_dir": str(config.output_dir),
        "data_dir": "",
        "checkpoints": {},
        "forecasts": {},
        "reports": {},
        "failed": False,
        "error": "",
        "exit_code": EXIT_OK,
        "summary": {},
    }


def _report(nse_by_lead, crpss=None, p_value=None, leads=range(8)):
    metrics = pd.DataFrame(
        [
            {"basin_id": basin, "lead_days": lead, "metric": "nse", "value": nse_by_lead(lead)}
            for basin in ("b0", "b1")
            for lead in leads
        ]
    )
    skill = significance = None
    if crpss is not None:
        skill = pd.DataFrame(
            [
                {"basin_id": basin, "lead_days": lead, "metric": "crpss", "value": crpss}
                for basin in ("b0", "b1")
                for lead in leads
            ]
        )
        significance = pd.DataFrame(
            [
                {"lead_days": lead, "metric": "crpss", "median": crpss, "n_basins": 2, "p_value": p_value}
                for lead in leads
            ]
        )
    empty = pd.DataFrame()
    return EvaluationReport(
        metrics=metrics,
        reliability_bins=empty,
        pr_curve=empty,
        metric_cdf=empty,
        lead_summary=empty,
        skill=skill,
        significance=significance,
    )


class TestRouting:
    def test_failed_state_ends(self):
        assert route_on_failure({"failed": True, "error": "boom"}) == "end"

    def test_healthy_state_continues(self):
        assert route_on_failure({"failed": False}) == "continue"
        assert route_on_failure({}) == "continue"

    def test_graph_compiles(self):
        graph = build_experiment_graph()
        assert hasattr(graph, "invoke")


class TestGuardedNodes:
    def test_missing_data_marks_state_failed(self, tmp_path):
        config = toy_run_config(tmp_path)
        state = {**_initial_state(config), "data_dir": str(tmp_path / "absent")}
        out = train_models(state)
        assert out["failed"] is True
        assert out["exit_code"] == EXIT_INPUT
        assert "train_models" in out["error"]

    def test_generate_data_writes_under_output(self, tmp_path):
        config = toy_run_config(tmp_path)
        out = generate_data(_initial_state(config))
        assert out["data_dir"] == str(tmp_path / "runs" / "data")
        assert (tmp_path / "runs" / "data" / "manifest.json").exists()

    def test_unwritable_output_stops_the_graph(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("not a directory")
        config = toy_run_config(tmp_path, output_dir=str(blocker / "runs"))
        result = build_experiment_graph().invoke(_initial_state(config))
        assert result["failed"] is True
        assert result["exit_code"] == EXIT_INPUT
        assert result["error"].startswith("generate_data")
        assert result["checkpoints"] == {}


class TestAcceptanceSummary:
    def test_all_checks_met(self):
        reports = {
            "deterministic_ssm": _report(lambda lead: 0.8),
            "hydrodiffusion": _report(lambda lead: 0.6 - 0.01 * lead, crpss=0.2, p_value=0.01),
        }
        summary = acceptance_summary(reports, last_lead=7)
        assert summary["deterministic_ssm/nse_day0"] == pytest.approx(0.8)
        assert summary["hydrodiffusion/nse_day7"] == pytest.approx(0.53)
        assert summary["hydrodiffusion/crpss_day3"] == pytest.approx(0.2)
        assert summary["hydrodiffusion/crpss_p_day3"] == pytest.approx(0.01)
        for check in (
            "deterministic_nse",
            "ensemble_nse",
            "ensemble_coherence",
            "crpss_positive",
            "crpss_significant",
        ):
            assert summary[f"check/{check}"] == 1.0

    def test_checks_not_met(self):
        reports = {
            "deterministic_ssm": _report(lambda lead: 0.5),
            "hydrodiffusion": _report(lambda lead: 0.6 - 0.05 * lead, crpss=-0.1, p_value=0.4),
        }
        summary = acceptance_summary(reports, last_lead=7)
        assert summary["check/deterministic_nse"] == 0.0
        assert summary["check/ensemble_nse"] == 1.0
        assert summary["check/ensemble_coherence"] == 0.0
        assert summary["check/crpss_positive"] == 0.0
        assert summary["check/crpss_significant"] == 0.0

    def test_missing_kinds_are_left_out(self):
        summary = acceptance_summary({"deterministic_ssm": _report(lambda lead: 0.9)}, last_lead=7)
        assert "check/deterministic_nse" in summary
        assert not any(key.startswith("check/ensemble") for key in summary)


@pytest.mark.slow
class TestExperimentGraph:
    def test_toy_experiment(self, tmp_path):
        config = toy_run_config(tmp_path)
        result = build_experiment_graph().invoke(_initial_state(config))
        assert result["failed"] is False
        assert set(result["checkpoints"]) == {"deterministic_ssm", "hydrodiffusion"}
        assert set(result["forecasts"]) == {"deterministic_ssm", "hydrodiffusion", "climatology"}
        summary = json.loads((tmp_path / "runs" / SUMMARY_FILE).read_text())
        assert summary == pytest.approx(result["summary"], nan_ok=True)
        assert "check/crpss_positive" in summary
