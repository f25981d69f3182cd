"""Forecast verification reports.

Forecast rows are matched to observed streamflow on ``init_date + lead_days``
and grouped per (basin, lead). Deterministic metrics score the ensemble mean,
CRPS scores the full ensemble, and the exceedance diagnostics use the basin's
90th-percentile observed flow (configurable) as the high-flow event. Metrics
whose denominators vanish are reported as NaN.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from datetime import date
from functools import partial
from pathlib import Path

import numpy as np
import pandas as pd

from hydrodiffusion.data import BasinRecord, write_frame, write_json
from hydrodiffusion.errors import ArgumentError, UndefinedMetricError, UndefinedTestError
from hydrodiffusion.metrics import (
    cor,
    crps_ensemble,
    event_threshold,
    exceedance_probability,
    fhv,
    flv,
    kge,
    nse,
    pbias,
    precision_recall_ap,
    reliability_and_sharpness,
    skill_score,
    wilcoxon_one_sided,
)
from hydrodiffusion.models import EvaluationConfig

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
RELIABILITY_FILE = "reliability_bins.csv"
PR_FILE = "pr_curve.csv"
CDF_FILE = "metric_cdf.csv"
LEAD_SUMMARY_FILE = "lead_summary.csv"
SKILL_FILE = "skill.csv"
SIGNIFICANCE_FILE = "significance.csv"
EVALUATION_MANIFEST = "evaluation.json"

# skill name -> (base metric, skill kind)
SKILL_METRICS = {"nsess": ("nse", "nse"), "kgess": ("kge", "kge"), "crpss": ("crps", "crps")}


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


@dataclass
class EnsembleTable:
    """Ensemble forecasts and observations for one (basin, lead)."""

    basin_id: str
    lead_days: int
    init_dates: list[date]
    members: np.ndarray  # (n, M)
    obs: np.ndarray  # (n,)

    def restrict(self, dates: Sequence[date]) -> EnsembleTable:
        keep = np.isin(np.array(self.init_dates, dtype=object), np.array(list(dates), dtype=object))
        return EnsembleTable(
            basin_id=self.basin_id,
            lead_days=self.lead_days,
            init_dates=[d for d, k in zip(self.init_dates, keep) if k],
            members=self.members[keep],
            obs=self.obs[keep],
        )

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=1)


def parse_leads(text: str) -> list[int]:
    """``"1..7"`` -> [1, ..., 7]; ``"0,3,5"`` -> [0, 3, 5]."""
    try:
        if ".." in text:
            lo, hi = (int(part) for part in text.split("..", 1))
            leads = list(range(lo, hi + 1))
        else:
            leads = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ArgumentError(f"Bad lead specification {text!r} (expected A..B or a comma list)") from exc
    if not leads or min(leads) < 0:
        raise ArgumentError(f"Bad lead specification {text!r}")
    return leads


def ensemble_tables(
    forecasts: pd.DataFrame,
    records: Sequence[BasinRecord],
    leads: Sequence[int] | None = None,
) -> dict[tuple[str, int], EnsembleTable]:
    """Group forecast rows per (basin, lead) and attach the observations.

    Rows without an observation, or with fewer members than the rest of the
    group, are dropped.

    Raises:
        ArgumentError: no forecast row falls on a known basin and lead.
    """
    by_id = {r.basin_id: r for r in records}
    frame = forecasts[forecasts["basin_id"].isin(list(by_id))]
    if leads is not None:
        frame = frame[frame["lead_days"].isin(list(leads))]
    if frame.empty:
        raise ArgumentError("Forecasts and observations share no basin and lead")

    tables: dict[tuple[str, int], EnsembleTable] = {}
    dropped = 0
    for (basin_id, lead), group in frame.groupby(["basin_id", "lead_days"], sort=True):
        wide = group.pivot(index="init_date", columns="member", values="value").sort_index()
        record = by_id[basin_id]
        obs = np.full(len(wide), np.nan)
        for row, init_date in enumerate(wide.index):
            index = record.index_of(init_date) + int(lead)
            if 0 <= index < record.n_days:
                obs[row] = record.streamflow[index]
        members = wide.to_numpy(dtype=np.float64)
        keep = np.isfinite(obs) & np.isfinite(members).all(axis=1)
        dropped += int((~keep).sum())
        if not keep.any():
            continue
        tables[(str(basin_id), int(lead))] = EnsembleTable(
            basin_id=str(basin_id),
            lead_days=int(lead),
            init_dates=[d for d, k in zip(wide.index, keep) if k],
            members=members[keep],
            obs=obs[keep],
        )
    if dropped:
        logger.warning("[evaluate] dropped %d forecast dates without observation or full ensemble", dropped)
    if not tables:
        raise ArgumentError("No forecast date has a matching observation")
    return tables


# ---------------------------------------------------------------------------
# Per-table metrics
# ---------------------------------------------------------------------------


def _safe(fn: Callable[[], float]) -> float:
    try:
        return float(fn())
    except UndefinedMetricError as exc:
        logger.debug("[evaluate] undefined metric: %s", exc)
        return float("nan")


def deterministic_metrics(table: EnsembleTable, cfg: EvaluationConfig) -> dict[str, float]:
    sim = table.mean
    scores: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
        "nse": nse,
        "kge": kge,
        "cor": cor,
        "pbias": pbias,
        "fhv": partial(fhv, fraction=cfg.fhv_fraction),
        "flv": partial(flv, fraction=cfg.flv_fraction),
    }
    return {name: _safe(lambda fn=fn: fn(table.obs, sim)) for name, fn in scores.items()}


@dataclass
class TableReport:
    metrics: dict[str, float]
    reliability_bins: pd.DataFrame | None = None
    pr_curve: pd.DataFrame | None = None


def score_table(table: EnsembleTable, cfg: EvaluationConfig) -> TableReport:
    """Deterministic, ensemble and high-flow exceedance scores for one table."""
    metrics = deterministic_metrics(table, cfg)
    metrics["crps"] = _safe(lambda: crps_ensemble(table.obs, table.members))

    threshold = event_threshold(table.obs, cfg.event_quantile)
    probs = exceedance_probability(table.members, threshold)
    events = table.obs > threshold
    metrics["event_threshold"] = threshold

    report = TableReport(metrics=metrics)
    reliability = reliability_and_sharpness(probs, events, cfg.reliability_bins)
    metrics["reliability"] = reliability.reliability
    metrics["sharpness"] = reliability.sharpness
    report.reliability_bins = reliability.bins
    try:
        pr = precision_recall_ap(probs, events)
        metrics["average_precision"] = pr.average_precision
        report.pr_curve = pr.curve
    except UndefinedMetricError as exc:
        logger.debug("[evaluate] basin %s lead %d: %s", table.basin_id, table.lead_days, exc)
        metrics["average_precision"] = float("nan")
    return report


# ---------------------------------------------------------------------------
# Aggregates
# ---------------------------------------------------------------------------


def metric_cdf(metrics: pd.DataFrame) -> pd.DataFrame:
    """Empirical CDF of per-basin values for every (lead, metric)."""
    frames = []
    for (lead, metric), group in metrics.groupby(["lead_days", "metric"], sort=True):
        values = np.sort(group["value"].dropna().to_numpy())
        if values.size == 0:
            continue
        frames.append(
            pd.DataFrame(
                {
                    "lead_days": lead,
                    "metric": metric,
                    "value": values,
                    "cdf": np.arange(1, values.size + 1) / values.size,
                }
            )
        )
    if not frames:
        return pd.DataFrame(columns=["lead_days", "metric", "value", "cdf"])
    return pd.concat(frames, ignore_index=True)


def lead_summary(metrics: pd.DataFrame) -> pd.DataFrame:
    """Median and quartiles across basins per (lead, metric)."""
    finite = metrics.dropna(subset=["value"])
    grouped = finite.groupby(["lead_days", "metric"], sort=True)["value"]
    summary = pd.DataFrame(
        {
            "median": grouped.median(),
            "q25": grouped.quantile(0.25),
            "q75": grouped.quantile(0.75),
            "n_basins": grouped.count(),
        }
    )
    return summary.reset_index()


def skill_table(
    model: dict[tuple[str, int], EnsembleTable],
    reference: dict[tuple[str, int], EnsembleTable],
    cfg: EvaluationConfig,
) -> pd.DataFrame:
    """NSESS, KGESS and CRPSS per (basin, lead) on the init dates both forecasts share."""
    rows = []
    for key in sorted(set(model) & set(reference)):
        common = sorted(set(model[key].init_dates) & set(reference[key].init_dates))
        if not common:
            continue
        ours = model[key].restrict(common)
        theirs = reference[key].restrict(common)
        ours_scores = deterministic_metrics(ours, cfg)
        theirs_scores = deterministic_metrics(theirs, cfg)
        ours_scores["crps"] = _safe(lambda t=ours: crps_ensemble(t.obs, t.members))
        theirs_scores["crps"] = _safe(lambda t=theirs: crps_ensemble(t.obs, t.members))
        for name, (base, kind) in SKILL_METRICS.items():
            m, r = ours_scores[base], theirs_scores[base]
            value = float("nan") if np.isnan(m) or np.isnan(r) else _safe(lambda: skill_score(m, r, kind))
            rows.append({"basin_id": key[0], "lead_days": key[1], "metric": name, "value": value})
    if not rows:
        raise ArgumentError("Model and reference forecasts share no (basin, lead, init date)")
    return pd.DataFrame(rows, columns=["basin_id", "lead_days", "metric", "value"])


def significance_table(skill: pd.DataFrame) -> pd.DataFrame:
    """One-sided signed-rank p-value of "skill > 0" across basins, per (lead, metric)."""
    rows = []
    for (lead, metric), group in skill.groupby(["lead_days", "metric"], sort=True):
        values = group["value"].dropna().to_numpy()
        if values.size == 0:
            continue
        try:
            p_value = wilcoxon_one_sided(values)
        except UndefinedTestError:
            p_value = 1.0
        rows.append(
            {
                "lead_days": lead,
                "metric": metric,
                "median": float(np.median(values)),
                "n_basins": int(values.size),
                "p_value": p_value,
            }
        )
    return pd.DataFrame(rows, columns=["lead_days", "metric", "median", "n_basins", "p_value"])


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class EvaluationReport:
    metrics: pd.DataFrame
    reliability_bins: pd.DataFrame
    pr_curve: pd.DataFrame
    metric_cdf: pd.DataFrame
    lead_summary: pd.DataFrame
    skill: pd.DataFrame | None = None
    significance: pd.DataFrame | None = None
    settings: dict[str, object] = field(default_factory=dict)

    def median(self, metric: str, lead: int) -> float:
        """Median across basins, from the skill table for skill names."""
        source = self.skill if metric in SKILL_METRICS and self.skill is not None else self.metrics
        values = source[(source["metric"] == metric) & (source["lead_days"] == lead)]["value"].dropna()
        return float(values.median()) if len(values) else float("nan")

    def p_value(self, metric: str, lead: int) -> float:
        if self.significance is None:
            return float("nan")
        row = self.significance[(self.significance["metric"] == metric) & (self.significance["lead_days"] == lead)]
        return float(row["p_value"].iloc[0]) if len(row) else float("nan")

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        write_frame(self.metrics, out_dir / METRICS_FILE)
        write_frame(self.reliability_bins, out_dir / RELIABILITY_FILE)
        write_frame(self.pr_curve, out_dir / PR_FILE)
        write_frame(self.metric_cdf, out_dir / CDF_FILE)
        write_frame(self.lead_summary, out_dir / LEAD_SUMMARY_FILE)
        if self.skill is not None and self.significance is not None:
            write_frame(self.skill, out_dir / SKILL_FILE)
            write_frame(self.significance, out_dir / SIGNIFICANCE_FILE)
        write_json(self.settings, out_dir / EVALUATION_MANIFEST)
        logger.info("[evaluate] report written to %s", out_dir)


def evaluate_forecasts(
    forecasts: pd.DataFrame,
    records: Sequence[BasinRecord],
    cfg: EvaluationConfig,
    reference: pd.DataFrame | None = None,
    leads: Sequence[int] | None = None,
) -> EvaluationReport:
    """Build the full verification report for a forecast table.

    Args:
        forecasts: Rows of ``basin_id,init_date,lead_days,member,value``.
        records: Observed basins.
        cfg: Bins, event quantile and flow-duration fractions.
        reference: Optional reference forecasts for skill scores and the
            signed-rank test.
        leads: Lead days to report; ``cfg.leads`` or every lead when None.

    Raises:
        ArgumentError: forecasts and observations do not intersect.
    """
    leads = leads if leads is not None else cfg.leads
    tables = ensemble_tables(forecasts, records, leads)

    metric_rows, bin_frames, pr_frames = [], [], []
    for (basin_id, lead), table in tables.items():
        report = score_table(table, cfg)
        metric_rows.extend(
            {"basin_id": basin_id, "lead_days": lead, "metric": name, "value": value}
            for name, value in report.metrics.items()
        )
        if report.reliability_bins is not None:
            bin_frames.append(report.reliability_bins.assign(basin_id=basin_id, lead_days=lead))
        if report.pr_curve is not None:
            pr_frames.append(report.pr_curve.assign(basin_id=basin_id, lead_days=lead))

    metrics = pd.DataFrame(metric_rows, columns=["basin_id", "lead_days", "metric", "value"])
    bins = _concat(bin_frames, ["basin_id", "lead_days", "bin_lower", "bin_upper", "count", "mean_prob", "obs_freq"])
    pr = _concat(pr_frames, ["basin_id", "lead_days", "threshold", "precision", "recall"])

    skill = significance = None
    if reference is not None:
        reference_tables = ensemble_tables(reference, records, sorted({k[1] for k in tables}))
        skill = skill_table(tables, reference_tables, cfg)
        significance = significance_table(skill)

    n_basins = len({k[0] for k in tables})
    logger.info("[evaluate] %d basins, %d leads, %d tables", n_basins, len({k[1] for k in tables}), len(tables))
    return EvaluationReport(
        metrics=metrics,
        reliability_bins=bins,
        pr_curve=pr,
        metric_cdf=metric_cdf(metrics),
        lead_summary=lead_summary(metrics),
        skill=skill,
        significance=significance,
        settings={
            "leads": sorted({k[1] for k in tables}),
            "basins": n_basins,
            "event_quantile": cfg.event_quantile,
            "quantile_method": "linear",
            "reliability_bins": cfg.reliability_bins,
            "fhv_fraction": cfg.fhv_fraction,
            "flv_fraction": cfg.flv_fraction,
            "crps_form": "ensemble (1/(2 M^2) spread term)",
            "reference": reference is not None,
        },
    )


def _concat(frames: list[pd.DataFrame], columns: list[str]) -> pd.DataFrame:
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True).loc[:, columns]


def load_report(out_dir: str | Path) -> EvaluationReport:
    """Read back the tables written by :meth:`EvaluationReport.write`."""
    out_dir = Path(out_dir)

    def read(name: str) -> pd.DataFrame:
        return pd.read_csv(out_dir / name, dtype={"basin_id": str})

    def optional(name: str) -> pd.DataFrame | None:
        return read(name) if (out_dir / name).exists() else None

    settings_path = out_dir / EVALUATION_MANIFEST
    return EvaluationReport(
        metrics=read(METRICS_FILE),
        reliability_bins=read(RELIABILITY_FILE),
        pr_curve=read(PR_FILE),
        metric_cdf=read(CDF_FILE),
        lead_summary=read(LEAD_SUMMARY_FILE),
        skill=optional(SKILL_FILE),
        significance=optional(SIGNIFICANCE_FILE),
        settings=json.loads(settings_path.read_text(encoding="utf-8")) if settings_path.exists() else {},
    )
