"""Verification metrics for deterministic and ensemble streamflow forecasts.

Deterministic scores take paired ``(obs, sim)`` arrays; pairs with a missing
value on either side are dropped first. Ensemble scores take ``obs`` of
shape (n,) and ``members`` of shape (n, M). A zero denominator raises
UndefinedMetricError instead of returning inf or NaN.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata
from sklearn.metrics import average_precision_score, precision_recall_curve

from hydrodiffusion.errors import ArgumentError, UndefinedMetricError, UndefinedTestError

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25


# ---------------------------------------------------------------------------
# Pairing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairedSeries:
    obs: np.ndarray
    sim: np.ndarray

    @classmethod
    def from_arrays(cls, obs: np.ndarray, sim: np.ndarray) -> PairedSeries:
        obs = np.asarray(obs, dtype=np.float64)
        sim = np.asarray(sim, dtype=np.float64)
        if obs.shape != sim.shape or obs.ndim != 1:
            raise ArgumentError(f"obs and sim must be equal-length vectors: {obs.shape} vs {sim.shape}")
        keep = np.isfinite(obs) & np.isfinite(sim)
        return cls(obs=obs[keep], sim=sim[keep])


def _paired(obs: np.ndarray, sim: np.ndarray, minimum: int = 1) -> PairedSeries:
    pair = PairedSeries.from_arrays(obs, sim)
    if len(pair.obs) < minimum:
        raise UndefinedMetricError(f"Need at least {minimum} complete pairs, got {len(pair.obs)}")
    return pair


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Deterministic metrics
# ---------------------------------------------------------------------------


def nse(obs: np.ndarray, sim: np.ndarray) -> float:
    """Nash-Sutcliffe efficiency ``1 - SSE / sum((obs - mean(obs))**2)``."""
    p = _paired(obs, sim, minimum=2)
    denominator = np.sum((p.obs - p.obs.mean()) ** 2)
    if denominator == 0.0:
        raise UndefinedMetricError("NSE undefined for constant observations")
    return float(1.0 - np.sum((p.obs - p.sim) ** 2) / denominator)


def cor(obs: np.ndarray, sim: np.ndarray) -> float:
    """Pearson correlation."""
    p = _paired(obs, sim, minimum=2)
    do = p.obs - p.obs.mean()
    ds = p.sim - p.sim.mean()
    scale = math.sqrt(np.sum(do**2) * np.sum(ds**2))
    if scale == 0.0:
        raise UndefinedMetricError("Correlation undefined for a constant series")
    return float(np.clip(np.sum(do * ds) / scale, -1.0, 1.0))


def kge(obs: np.ndarray, sim: np.ndarray) -> float:
    """Kling-Gupta efficiency from correlation, variability ratio and bias ratio."""
    p = _paired(obs, sim, minimum=2)
    mean_obs = p.obs.mean()
    if mean_obs == 0.0:
        raise UndefinedMetricError("KGE undefined for zero mean observations")
    r = cor(p.obs, p.sim)
    alpha = p.sim.std() / p.obs.std()
    beta = p.sim.mean() / mean_obs
    return float(1.0 - math.sqrt((r - 1.0) ** 2 + (alpha - 1.0) ** 2 + (beta - 1.0) ** 2))


def pbias(obs: np.ndarray, sim: np.ndarray) -> float:
    """Percent bias ``100 * sum(sim - obs) / sum(obs)``."""
    p = _paired(obs, sim)
    total = p.obs.sum()
    if total == 0.0:
        raise UndefinedMetricError("PBias undefined for zero total observations")
    return float(100.0 * np.sum(p.sim - p.obs) / total)


def _fdc_bias(p: PairedSeries, count: int, top: bool) -> float:
    order = np.argsort(-p.obs, kind="stable")
    segment = order[:count] if top else order[len(order) - count :]
    total = p.obs[segment].sum()
    if total == 0.0:
        raise UndefinedMetricError("Flow-duration segment has zero observed volume")
    return float(100.0 * np.sum(p.sim[segment] - p.obs[segment]) / total)


def high_segment_size(n: int, fraction: float = 0.001) -> int:
    return max(1, _round_half_up(fraction * n))


def low_segment_size(n: int, fraction: float = 0.3) -> int:
    return max(1, _round_half_up(fraction * n))


def fhv(obs: np.ndarray, sim: np.ndarray, fraction: float = 0.001) -> float:
    """Percent bias over the highest ``fraction`` of observed flows (pairs kept)."""
    p = _paired(obs, sim)
    return _fdc_bias(p, high_segment_size(len(p.obs), fraction), top=True)


def flv(obs: np.ndarray, sim: np.ndarray, fraction: float = 0.3) -> float:
    """Percent bias over the lowest ``fraction`` of observed flows (pairs kept)."""
    p = _paired(obs, sim)
    return _fdc_bias(p, low_segment_size(len(p.obs), fraction), top=False)


# ---------------------------------------------------------------------------
# Ensemble metrics
# ---------------------------------------------------------------------------


def _ensemble(obs: np.ndarray, members: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    obs = np.asarray(obs, dtype=np.float64)
    members = np.asarray(members, dtype=np.float64)
    if members.ndim == 1:
        members = members[:, None]
    if members.ndim != 2 or members.shape[0] != obs.shape[0] or members.shape[1] < 1:
        raise ArgumentError(f"members must have shape (n, M>=1) matching obs, got {members.shape}")
    keep = np.isfinite(obs)
    return obs[keep], members[keep]


def crps_per_time(obs: np.ndarray, members: np.ndarray) -> np.ndarray:
    """``mean|m_i - obs| - sum|m_i - m_j| / (2 M**2)`` per time step."""
    obs, members = _ensemble(obs, members)
    m = members.shape[1]
    spread = np.abs(members[:, :, None] - members[:, None, :]).sum(axis=(1, 2))
    return np.abs(members - obs[:, None]).mean(axis=1) - spread / (2.0 * m * m)


def crps_ensemble(obs: np.ndarray, members: np.ndarray) -> float:
    scores = crps_per_time(obs, members)
    if scores.size == 0:
        raise UndefinedMetricError("CRPS needs at least one observed time step")
    return float(scores.mean())


def event_threshold(obs: np.ndarray, quantile: float = 0.9) -> float:
    """Empirical quantile of the observations (linear interpolation)."""
    obs = np.asarray(obs, dtype=np.float64)
    obs = obs[np.isfinite(obs)]
    if obs.size == 0:
        raise UndefinedMetricError("No observations to take a quantile of")
    return float(np.quantile(obs, quantile, method="linear"))


def exceedance_probability(members: np.ndarray, threshold: float) -> np.ndarray:
    """Fraction of members strictly above ``threshold`` at each time step."""
    members = np.asarray(members, dtype=np.float64)
    if members.ndim == 1:
        members = members[:, None]
    return (members > threshold).mean(axis=1)


@dataclass
class ReliabilityResult:
    reliability: float
    sharpness: float
    bins: pd.DataFrame  # bin_lower, bin_upper, count, mean_prob, obs_freq


def reliability_and_sharpness(
    probs: np.ndarray, events: np.ndarray, n_bins: int = 10
) -> ReliabilityResult:
    """Binned calibration error and the variance of forecast probabilities.

    Probabilities fall into ``n_bins`` equal-width bins on [0, 1] (1.0 goes
    to the last bin). Reliability averages ``(mean_prob - obs_freq)**2`` over
    the non-empty bins only; empty bins appear in the table with count 0.
    """
    if n_bins < 2:
        raise ArgumentError(f"Need at least 2 bins, got {n_bins}")
    probs = np.asarray(probs, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if probs.shape != events.shape:
        raise ArgumentError("probs and events must have the same shape")
    if probs.size == 0:
        raise UndefinedMetricError("Reliability needs at least one forecast")

    index = np.minimum(np.floor(probs * n_bins).astype(np.int64), n_bins - 1)
    rows = []
    errors = []
    for b in range(n_bins):
        in_bin = index == b
        count = int(in_bin.sum())
        mean_prob = float(probs[in_bin].mean()) if count else float("nan")
        obs_freq = float(events[in_bin].mean()) if count else float("nan")
        if count:
            errors.append((mean_prob - obs_freq) ** 2)
        rows.append(
            {
                "bin_lower": b / n_bins,
                "bin_upper": (b + 1) / n_bins,
                "count": count,
                "mean_prob": mean_prob,
                "obs_freq": obs_freq,
            }
        )
    empty = n_bins - len(errors)
    if empty:
        logger.debug("[reliability] %d of %d bins empty", empty, n_bins)
    return ReliabilityResult(
        reliability=float(np.mean(errors)),
        sharpness=float(np.var(probs)),
        bins=pd.DataFrame(rows),
    )


@dataclass
class PrecisionRecall:
    average_precision: float
    curve: pd.DataFrame  # threshold, precision, recall (descending thresholds)


def precision_recall_ap(probs: np.ndarray, events: np.ndarray) -> PrecisionRecall:
    """PR curve over the distinct forecast probabilities and average precision.

    ``AP = sum_k (R_k - R_{k-1}) * P_k`` with thresholds swept from high to low.
    """
    probs = np.asarray(probs, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if probs.shape != events.shape:
        raise ArgumentError("probs and events must have the same shape")
    if not events.any():
        raise UndefinedMetricError("Precision-recall undefined without observed events")
    precision, recall, thresholds = precision_recall_curve(events, probs)
    # sklearn orders by increasing threshold and appends the (1, 0) end point
    curve = pd.DataFrame(
        {
            "threshold": thresholds[::-1],
            "precision": precision[:-1][::-1],
            "recall": recall[:-1][::-1],
        }
    )
    return PrecisionRecall(
        average_precision=float(average_precision_score(events, probs)),
        curve=curve.reset_index(drop=True),
    )


# ---------------------------------------------------------------------------
# Skill and significance
# ---------------------------------------------------------------------------


SkillKind = Literal["nse", "kge", "crps"]


def skill_score(model: float, reference: float, kind: SkillKind) -> float:
    """NSESS/KGESS ``(m - r)/(1 - r)``; CRPSS ``1 - m/r``."""
    if kind in ("nse", "kge"):
        if reference == 1.0:
            raise UndefinedMetricError(f"{kind.upper()} skill undefined for a perfect reference")
        return (model - reference) / (1.0 - reference)
    if kind == "crps":
        if reference == 0.0:
            raise UndefinedMetricError("CRPS skill undefined for a zero reference CRPS")
        return 1.0 - model / reference
    raise ArgumentError(f"Unknown skill kind {kind!r}")


def _exact_upper_tail(doubled_ranks: np.ndarray, observed: int) -> float:
    """P(W+ >= observed) over all 2**n sign patterns, in doubled-rank units."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return float(counts[observed:].sum() / 2.0 ** len(doubled_ranks))


def wilcoxon_one_sided(diffs: np.ndarray) -> float:
    """p-value of the signed-rank test against the alternative "differences > 0".

    Zero differences are dropped and tied magnitudes get average ranks. Up to
    25 non-zero differences the null distribution is enumerated exactly;
    beyond that a tie-corrected normal approximation with a 0.5 continuity
    correction is used.

    Raises:
        UndefinedTestError: no non-zero differences remain.
    """
    diffs = np.asarray(diffs, dtype=np.float64)
    diffs = diffs[np.isfinite(diffs) & (diffs != 0.0)]
    n = diffs.size
    if n == 0:
        raise UndefinedTestError("All differences are zero")
    ranks = rankdata(np.abs(diffs), method="average")
    w_plus = float(ranks[diffs > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        return _exact_upper_tail(doubled, int(round(2.0 * w_plus)))

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = (w_plus - mean - 0.5) / math.sqrt(variance)
    return float(norm.sf(z))
