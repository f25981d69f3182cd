"""Tests for windows, normalization, splits, synthetic basins and the CSV formats."""

from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest
import torch

from hydrodiffusion.data import (
    BASIN_HEADER,
    STATIC_ATTRIBUTES,
    ConditioningBatch,
    SyntheticBasinParams,
    build_dataset,
    compute_norm_stats,
    default_splits,
    derive_vapor_pressure,
    linear_reservoir,
    load_basin_csv,
    load_dataset,
    make_windows,
    normalize_window,
    read_forecast_csv,
    resolve_splits,
    synthetic_basin,
    synthetic_dataset,
    write_basin_csv,
    write_dataset,
    write_forecast_csv,
)
from hydrodiffusion.errors import ArgumentError, EmptyRecordError, ParseError
from hydrodiffusion.models import DataConfig, SplitConfig
from tests.helpers import make_record, toy_backbone


def _params(**overrides) -> SyntheticBasinParams:
    values = dict(k=0.1, rain_prob=0.3, rain_scale=8.0)
    values.update(overrides)
    return SyntheticBasinParams(**values)


class TestWindows:
    def test_layout(self):
        cfg = toy_backbone()
        record = make_record(n_days=60, d_z=2, d_s=3)
        windows = make_windows(record, cfg, [date(2000, 1, 21)])
        assert len(windows) == 1
        sample = windows.samples[0]
        # column 0 of the forcings holds the day index
        np.testing.assert_array_equal(sample.past[:, 0], np.arange(12, 21))
        np.testing.assert_array_equal(sample.future[:, 0], np.arange(21, 28))
        np.testing.assert_array_equal(sample.target, record.streamflow[20:28])
        assert sample.init_date == date(2000, 1, 21)

    def test_every_valid_date(self):
        cfg = toy_backbone()
        record = make_record(n_days=60, d_z=2, d_s=3)
        windows = make_windows(record, cfg)
        assert len(windows) == 60 - cfg.l_p + 1 - cfg.l_ff
        assert windows.samples[0].init_date == date(2000, 1, 9)
        assert windows.samples[-1].init_date == date(2000, 1, 1) + timedelta(days=59 - cfg.l_ff)

    def test_dates_without_history_or_future_are_skipped(self):
        cfg = toy_backbone()
        record = make_record(n_days=60, d_z=2, d_s=3)
        requested = [date(2000, 1, 1), date(2000, 1, 9), date(2000, 2, 29)]
        windows = make_windows(record, cfg, requested)
        assert [s.init_date for s in windows] == [date(2000, 1, 9)]
        assert windows.skipped == [date(2000, 1, 1), date(2000, 2, 29)]

    def test_missing_targets_are_dropped_when_required(self):
        cfg = toy_backbone()
        record = make_record(n_days=60, d_z=2, d_s=3)
        flow = record.streamflow.copy()
        flow[30] = np.nan
        gappy = record.model_copy(update={"streamflow": flow})
        kept = make_windows(gappy, cfg, require_target=True)
        assert kept.missing_target == cfg.l_f
        assert len(kept) == len(make_windows(record, cfg)) - cfg.l_f

    def test_within_keeps_whole_targets_inside(self):
        cfg = toy_backbone()
        record = make_record(n_days=60, d_z=2, d_s=3)
        windows = make_windows(record, cfg, within=(date(2000, 1, 20), date(2000, 1, 31)))
        assert [s.init_date for s in windows] == [date(2000, 1, 20) + timedelta(days=i) for i in range(5)]


class TestConditioningBatch:
    def test_repeat_keeps_members_consecutive(self):
        cfg = toy_backbone()
        samples = make_windows(make_record(n_days=60, d_z=2, d_s=3), cfg).samples[:2]
        batch = ConditioningBatch.from_tuples(samples).repeat(3)
        assert len(batch) == 6
        torch.testing.assert_close(batch.past[0], batch.past[2])
        torch.testing.assert_close(batch.past[3], torch.from_numpy(samples[1].past))

    def test_empty_raises(self):
        with pytest.raises(ArgumentError):
            ConditioningBatch.from_tuples([])


class TestNormalization:
    def test_pooled_statistics_and_roundtrip(self):
        cfg = toy_backbone()
        records = [make_record("a", d_z=2, d_s=3, seed=1), make_record("b", d_z=2, d_s=3, seed=2)]
        stats = compute_norm_stats(records, (date(2000, 1, 1), date(2000, 2, 29)))
        assert stats.mean.shape == (2 + 3 + 1,)
        assert stats.mean[0] == pytest.approx(29.5)
        flow = np.concatenate([r.streamflow for r in records])
        assert stats.flow("a") == pytest.approx((flow.mean(), flow.std()))

        sample = make_windows(records[0], cfg, [date(2000, 1, 20)]).samples[0]
        normalized = normalize_window(sample, stats)
        mean, std = stats.for_basin("a")
        np.testing.assert_allclose(normalized.past * std[:2] + mean[:2], sample.past, rtol=0, atol=1e-12)
        np.testing.assert_allclose(normalized.target * std[-1] + mean[-1], sample.target, rtol=0, atol=1e-12)

    def test_constant_variable_std_is_floored(self):
        records = [make_record("a", d_z=2, d_s=3), make_record("b", d_z=2, d_s=3)]
        records = [r.model_copy(update={"static": np.ones(3)}) for r in records]
        stats = compute_norm_stats(records, (date(2000, 1, 1), date(2000, 2, 29)))
        np.testing.assert_array_equal(stats.std[2:5], np.full(3, 1e-8))

    def test_per_basin_overrides(self):
        records = [make_record("a", d_z=2, d_s=3, seed=1), make_record("b", d_z=2, d_s=3, seed=2)]
        stats = compute_norm_stats(records, (date(2000, 1, 1), date(2000, 2, 29)), mode="per_basin")
        assert stats.flow("a")[0] == pytest.approx(records[0].streamflow.mean())
        assert stats.flow("b")[0] == pytest.approx(records[1].streamflow.mean())
        restored = type(stats).from_dict(stats.to_dict())
        assert restored.flow("b") == stats.flow("b")

    def test_range_without_days_raises(self):
        with pytest.raises(ArgumentError):
            compute_norm_stats([make_record(d_z=2, d_s=3)], (date(2010, 1, 1), date(2010, 12, 31)))


class TestDataset:
    def test_shapes_and_target_std(self):
        cfg = toy_backbone()
        records = [make_record("a", d_z=2, d_s=3, seed=1), make_record("b", d_z=2, d_s=3, seed=2)]
        window = (date(2000, 1, 1), date(2000, 2, 29))
        stats = compute_norm_stats(records, window)
        dataset = build_dataset(records, stats, cfg, window)
        per_basin = 60 - cfg.l_p + 1 - cfg.l_ff
        assert len(dataset) == 2 * per_basin
        item = dataset[0]
        assert item["past"].shape == (cfg.l_p, 2)
        assert item["future"].shape == (cfg.l_ff, 2)
        assert item["target"].shape == (cfg.l_f,)
        assert dataset.target_std[0].item() == pytest.approx(records[0].streamflow.std() / stats.flow("a")[1])

    def test_no_windows_raises(self):
        cfg = toy_backbone()
        records = [make_record(d_z=2, d_s=3)]
        stats = compute_norm_stats(records, (date(2000, 1, 1), date(2000, 2, 29)))
        with pytest.raises(ArgumentError):
            build_dataset(records, stats, cfg, (date(2000, 1, 1), date(2000, 1, 5)))


class TestSplits:
    def test_default_layout(self):
        splits = default_splits(date(2000, 1, 1))
        assert splits.train == (date(2000, 1, 1), date(2005, 12, 31))
        assert splits.val == (date(2006, 1, 1), date(2006, 12, 31))
        assert splits.test == (date(2007, 1, 1), date(2009, 12, 31))

    def test_explicit_dates_win(self):
        splits = resolve_splits(SplitConfig(test_start=date(2008, 6, 1)), date(2000, 1, 1))
        assert splits.test == (date(2008, 6, 1), date(2009, 12, 31))

    def test_empty_split_raises(self):
        with pytest.raises(ArgumentError):
            resolve_splits(SplitConfig(val_start=date(2007, 6, 1)), date(2000, 1, 1))


class TestSyntheticBasins:
    def test_linear_reservoir_by_hand(self):
        flow, storage = linear_reservoir(np.array([10.0, 0.0, 0.0]), 0.5, 0.0)
        np.testing.assert_allclose(flow, [0.0, 5.0, 2.5])
        np.testing.assert_allclose(storage, [0.0, 10.0, 5.0, 2.5])

    def test_reservoir_conserves_mass(self):
        precip = np.random.default_rng(0).exponential(5.0, 500)
        flow, storage = linear_reservoir(precip, 0.2, 20.0)
        assert storage[-1] == pytest.approx(20.0 + precip.sum() - flow.sum())

    def test_deterministic_per_seed(self):
        a = synthetic_basin(11, 400, _params())
        b = synthetic_basin(11, 400, _params())
        c = synthetic_basin(12, 400, _params())
        np.testing.assert_array_equal(a.forcings, b.forcings)
        np.testing.assert_array_equal(a.streamflow, b.streamflow)
        assert not np.array_equal(a.forcings, c.forcings)

    def test_record_shape(self):
        record = synthetic_basin(3, 400, _params(), basin_id="x", start=date(2001, 1, 1))
        assert record.forcings.shape == (400, 5)
        assert record.static.shape == (len(STATIC_ATTRIBUTES),)
        assert record.start == date(2001, 1, 1)
        assert np.all(record.forcings[:, 0] >= 0)
        assert np.all(record.streamflow >= 0)

    def test_invalid_recession_raises(self):
        with pytest.raises(ArgumentError, match=r"k must lie in \(0, 1\)"):
            synthetic_basin(1, 400, _params(k=1.0))

    def test_short_record_raises(self):
        with pytest.raises(ArgumentError):
            synthetic_basin(1, 399, _params())

    def test_dataset_ids_and_independence(self):
        records = synthetic_dataset(5, DataConfig(n_basins=3, n_days=400))
        assert [r.basin_id for r in records] == ["basin_00", "basin_01", "basin_02"]
        assert not np.array_equal(records[0].streamflow, records[1].streamflow)

    def test_vapor_pressure(self):
        assert derive_vapor_pressure(0.0, 101325.0) == 0.0
        assert derive_vapor_pressure(0.01, 100000.0) == pytest.approx(1000.0 / (0.622 + 0.00378))
        with pytest.raises(ArgumentError):
            derive_vapor_pressure(0.01, 0.0)


class TestCsvFormats:
    def test_basin_roundtrip_is_exact(self, tmp_path):
        record = synthetic_basin(4, 400, _params(), basin_id="gauge")
        flow = record.streamflow.copy()
        flow[[3, 50]] = np.nan
        record = record.model_copy(update={"streamflow": flow})
        write_basin_csv(record, tmp_path / "gauge.csv")
        loaded = load_basin_csv(tmp_path / "gauge.csv")
        assert loaded.basin_id == "gauge"
        np.testing.assert_array_equal(loaded.dates, record.dates)
        np.testing.assert_array_equal(loaded.forcings, record.forcings)
        np.testing.assert_array_equal(loaded.streamflow, record.streamflow)

    def test_bad_number_reports_line(self, tmp_path):
        path = tmp_path / "b.csv"
        path.write_text(
            ",".join(BASIN_HEADER) + "\n"
            "2000-01-01,1,2,3,4,5,6\n"
            "2000-01-02,1,2,x,4,5,6\n"
        )
        with pytest.raises(ParseError) as info:
            load_basin_csv(path)
        assert info.value.line == 3

    def test_gap_in_dates_reports_line(self, tmp_path):
        path = tmp_path / "b.csv"
        path.write_text(
            ",".join(BASIN_HEADER) + "\n"
            "2000-01-01,1,2,3,4,5,6\n"
            "2000-01-03,1,2,3,4,5,6\n"
        )
        with pytest.raises(ParseError) as info:
            load_basin_csv(path)
        assert info.value.line == 3

    def test_negative_precipitation_raises(self, tmp_path):
        path = tmp_path / "b.csv"
        path.write_text(",".join(BASIN_HEADER) + "\n2000-01-01,-1,2,3,4,5,6\n")
        with pytest.raises(ParseError):
            load_basin_csv(path)

    def test_header_only_is_empty(self, tmp_path):
        path = tmp_path / "b.csv"
        path.write_text(",".join(BASIN_HEADER) + "\n")
        with pytest.raises(EmptyRecordError):
            load_basin_csv(path)

    def test_dataset_roundtrip(self, tmp_path):
        records = synthetic_dataset(2, DataConfig(n_basins=2, n_days=400))
        write_dataset(records, tmp_path, {"seed": 2})
        loaded = load_dataset(tmp_path)
        assert [r.basin_id for r in loaded] == ["basin_00", "basin_01"]
        np.testing.assert_array_equal(loaded[1].static, records[1].static)
        assert (tmp_path / "manifest.json").exists()

    def test_missing_static_table_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_forecast_roundtrip(self, tmp_path):
        frame = pd.DataFrame(
            {
                "basin_id": ["a", "a"],
                "init_date": [date(2001, 5, 1), date(2001, 5, 1)],
                "lead_days": [0, 1],
                "member": [0, 0],
                "value": [0.1, 1.0 / 3.0],
            }
        )
        write_forecast_csv(frame, tmp_path / "f.csv")
        loaded = read_forecast_csv(tmp_path / "f.csv")
        assert loaded["init_date"].tolist() == frame["init_date"].tolist()
        assert loaded["value"].tolist() == frame["value"].tolist()
        assert loaded["lead_days"].tolist() == [0, 1]
