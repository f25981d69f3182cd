"""End-to-end tests of the ``hydrodiff`` command line on the toy configuration."""

import json

import pandas as pd
import pytest

from hydrodiffusion.checkpoint import load_checkpoint
from hydrodiffusion.config import CONFIG_DIR
from hydrodiffusion.data import BASIN_DIR, MANIFEST_FILE, STATIC_FILE, read_forecast_csv
from hydrodiffusion.errors import EXIT_INPUT, EXIT_OK
from hydrodiffusion.main import build_parser, main

TOY = str(CONFIG_DIR / "toy.yaml")


def _generate(tmp_path):
    data = tmp_path / "data"
    assert main(["generate-data", "--config", TOY, "--out", str(data)]) == EXIT_OK
    return data


def _train(tmp_path, data, kind="hydrodiffusion", name="model", extra=()):
    out = tmp_path / name
    code = main(["train", "--config", TOY, "--data", str(data), "--out", str(out), "--kind", kind, *extra])
    return code, out / "model.ckpt"


class TestParser:
    def test_subcommands(self):
        args = build_parser().parse_args(["evaluate", "--forecasts", "f.csv", "--leads", "1..7"])
        assert args.command == "evaluate"
        assert args.leads == "1..7"

    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["forecast", "--config", TOY])
        assert excinfo.value.code == 2

    def test_unknown_kind(self):
        with pytest.raises(SystemExit):
            main(["train", "--kind", "transformer"])


class TestInputErrors:
    def test_bad_config(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model:\n  backbone:\n    d_modle: 8\n")
        assert main(["generate-data", "--config", str(path), "--out", str(tmp_path / "d")]) == EXIT_INPUT

    def test_missing_data_directory(self, tmp_path):
        code, _ = _train(tmp_path, tmp_path / "absent")
        assert code == EXIT_INPUT

    def test_missing_checkpoint(self, tmp_path):
        data = _generate(tmp_path)
        code = main(
            ["forecast", "--config", TOY, "--data", str(data), "--checkpoint", str(tmp_path / "none.ckpt")]
        )
        assert code == EXIT_INPUT

    def test_bad_dates(self, tmp_path):
        data = _generate(tmp_path)
        code = main(["climatology", "--config", TOY, "--data", str(data), "--dates", "2001-13-01"])
        assert code == EXIT_INPUT


class TestCommands:
    def test_generate_data(self, tmp_path):
        data = _generate(tmp_path)
        assert len(list((data / BASIN_DIR).glob("*.csv"))) == 2
        assert (data / STATIC_FILE).exists()
        manifest = json.loads((data / MANIFEST_FILE).read_text())
        assert manifest["seed"] == 7
        assert manifest["n_days"] == 730

    def test_generate_data_is_reproducible(self, tmp_path):
        first = _generate(tmp_path / "a")
        second = _generate(tmp_path / "b")
        for path in sorted((first / BASIN_DIR).glob("*.csv")):
            assert path.read_bytes() == (second / BASIN_DIR / path.name).read_bytes()

    def test_train_forecast_evaluate(self, tmp_path):
        data = _generate(tmp_path)
        code, checkpoint = _train(tmp_path, data)
        assert code == EXIT_OK
        trace = pd.read_csv(checkpoint.parent / "loss_trace.csv")
        assert list(trace["epoch"]) == [1, 2]

        forecasts = tmp_path / "forecasts"
        args = ["forecast", "--config", TOY, "--data", str(data), "--checkpoint", str(checkpoint)]
        assert main([*args, "--out", str(forecasts)]) == EXIT_OK
        frame = read_forecast_csv(forecasts / "forecasts.csv")
        assert set(frame["member"]) == {0, 1, 2, 3}
        assert set(frame["lead_days"]) == set(range(8))

        again = tmp_path / "again"
        assert main([*args, "--out", str(again)]) == EXIT_OK
        assert (forecasts / "forecasts.csv").read_bytes() == (again / "forecasts.csv").read_bytes()

        climatology = tmp_path / "climatology"
        assert main(["climatology", "--config", TOY, "--data", str(data), "--out", str(climatology)]) == EXIT_OK

        report = tmp_path / "report"
        code = main(
            [
                "evaluate",
                "--config",
                TOY,
                "--data",
                str(data),
                "--forecasts",
                str(forecasts / "forecasts.csv"),
                "--reference",
                str(climatology / "forecasts.csv"),
                "--leads",
                "0..7",
                "--out",
                str(report),
            ]
        )
        assert code == EXIT_OK
        metrics = pd.read_csv(report / "metrics.csv")
        assert set(metrics["lead_days"]) == set(range(8))
        assert (report / "skill.csv").exists()
        assert (report / "significance.csv").exists()

    def test_deterministic_lstm_trains_with_its_preset(self, tmp_path):
        data = _generate(tmp_path)
        code, checkpoint = _train(tmp_path, data, kind="deterministic_lstm")
        assert code == EXIT_OK
        stored = load_checkpoint(checkpoint).config
        assert stored.model.kind.value == "deterministic_lstm"
        assert (stored.train.optimizer, stored.train.lr_schedule) == ("adam", "piecewise")
        assert stored.train.epochs == 2
        assert stored.model.lstm.dropout == 0.0
        trace = pd.read_csv(checkpoint.parent / "loss_trace.csv")
        assert trace["lr"].tolist() == pytest.approx([1e-3, 1e-3])

    def test_explicit_forecast_dates(self, tmp_path):
        data = _generate(tmp_path)
        _, checkpoint = _train(tmp_path, data, kind="deterministic_ssm")
        out = tmp_path / "forecasts"
        code = main(
            [
                "forecast",
                "--config",
                TOY,
                "--data",
                str(data),
                "--checkpoint",
                str(checkpoint),
                "--dates",
                "2001-08-01..2001-08-03",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        frame = read_forecast_csv(out / "forecasts.csv")
        assert len(frame) == 2 * 3 * 8
        assert set(frame["member"]) == {0}

    def test_resume_with_other_kind_is_rejected(self, tmp_path):
        data = _generate(tmp_path)
        code, checkpoint = _train(tmp_path, data)
        assert code == EXIT_OK
        code, _ = _train(
            tmp_path, data, kind="deterministic_ssm", name="resumed", extra=("--checkpoint", str(checkpoint))
        )
        assert code == EXIT_INPUT


@pytest.mark.slow
class TestExperimentCommand:
    def test_toy_experiment(self, tmp_path):
        out = tmp_path / "experiment"
        assert main(["experiment", "--config", TOY, "--out", str(out)]) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert "hydrodiffusion/nse_day0" in summary
        for kind in ("deterministic_ssm", "hydrodiffusion"):
            assert (out / "models" / kind / "model.ckpt").exists()
            assert (out / "reports" / kind / "metrics.csv").exists()
        assert (out / "forecasts" / "climatology" / "forecasts.csv").exists()
