"""Error metrics, chronological splitting and the cluster-sum vs. overall comparison."""

from __future__ import annotations

import calendar
import datetime as _dt
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import DataError, HouseholdDataset


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def relative_delta(proposed: float, baseline: float) -> float:
    """Percentage change of ``proposed`` relative to ``baseline``."""
    if baseline == 0:
        return 0.0 if proposed == 0 else float("inf")
    return (proposed - baseline) / baseline * 100.0


@dataclass
class EvalReport:
    metrics: dict[str, dict[str, float]]
    deltas: dict[str, float]
    per_day: dict[str, dict[str, list[float]]]
    per_slot: dict[str, dict[str, list[float]]]
    period: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "deltas_percent": self.deltas,
            "per_day": self.per_day,
            "per_slot": self.per_slot,
            "period": self.period,
        }


def _breakdown(pred: np.ndarray, truth: np.ndarray) -> tuple[dict, dict]:
    err = pred - truth
    per_day = {"rmse": np.sqrt(np.mean(err ** 2, axis=1)).tolist(), "mae": np.mean(np.abs(err), axis=1).tolist()}
    per_slot = {"rmse": np.sqrt(np.mean(err ** 2, axis=0)).tolist(), "mae": np.mean(np.abs(err), axis=0).tolist()}
    return per_day, per_slot


def sum_clusters(cluster_forecasts: Mapping[str, np.ndarray] | Sequence[np.ndarray]) -> np.ndarray:
    """Slotwise sum that does not depend on the order the clusters are given in."""
    items = cluster_forecasts.values() if isinstance(cluster_forecasts, Mapping) else cluster_forecasts
    stack = np.stack([np.asarray(v, dtype=np.float64) for v in items])
    return np.sort(stack, axis=0).sum(axis=0)


def compare_methods(cluster_forecasts: Mapping[str, np.ndarray] | Sequence[np.ndarray], overall_forecast,
                    truth_total, *, cluster_truths: Mapping[str, np.ndarray] | Sequence[np.ndarray] | None = None,
                    members: Mapping[str, Sequence[str]] | None = None, appliance_ids: Sequence[str] | None = None,
                    period: dict | None = None, rtol: float = 1e-9) -> EvalReport:
    """Score the summed cluster forecasts and the overall forecast against the metered total.

    Arrays are (days, slots). ``members``/``appliance_ids`` enable the
    coverage check; ``cluster_truths`` enables the conservation check.
    """
    if members is not None and appliance_ids is not None:
        covered = {c for chans in members.values() for c in chans}
        gap = sorted(set(appliance_ids) - covered)
        if gap:
            raise DataError(f"appliances in no cluster: {gap}")
    truth = np.asarray(truth_total, dtype=np.float64)
    proposed = sum_clusters(cluster_forecasts)
    overall = np.asarray(overall_forecast, dtype=np.float64)
    if proposed.shape != truth.shape or overall.shape != truth.shape:
        raise ValueError(f"forecast shapes {proposed.shape}/{overall.shape} do not match truth {truth.shape}")
    if cluster_truths is not None:
        summed = sum_clusters(cluster_truths)
        scale = max(float(np.abs(truth).sum()), 1e-300)
        err = float(np.abs(summed - truth).sum()) / scale
        if err > rtol:
            raise DataError(f"cluster ground truths do not sum to the total (relative error {err:.3e})")
    truth2 = np.atleast_2d(truth)
    metrics, per_day, per_slot = {}, {}, {}
    for name, pred in (("overall", overall), ("cluster_sum", proposed)):
        r, m = rmse(pred, truth), mae(pred, truth)
        if r < m - 1e-9 * max(r, 1.0):
            raise AssertionError(f"RMSE {r} < MAE {m}")
        metrics[name] = {"rmse": r, "mae": m}
        per_day[name], per_slot[name] = _breakdown(np.atleast_2d(pred), truth2)
    deltas = {
        "rmse": relative_delta(metrics["cluster_sum"]["rmse"], metrics["overall"]["rmse"]),
        "mae": relative_delta(metrics["cluster_sum"]["mae"], metrics["overall"]["mae"]),
    }
    return EvalReport(metrics, deltas, per_day, per_slot, dict(period or {}))


# -------------------------------------------------------------------- split

def add_months(date: _dt.date, months: int) -> _dt.date:
    idx = date.month - 1 + months
    year, month = date.year + idx // 12, idx % 12 + 1
    return _dt.date(year, month, min(date.day, calendar.monthrange(year, month)[1]))


def split_day(dataset: HouseholdDataset, train_months: int = 23) -> int:
    """Index of the first test day: ``train_months`` calendar months after the first day."""
    first = dataset.date_of_day(0)
    cut = (add_months(first, train_months) - first).days
    if not 0 < cut < dataset.days:
        raise DataError(f"{dataset.days} days do not exceed a {train_months}-month training period")
    return cut


def split_dataset(dataset: HouseholdDataset, train_months: int = 23) -> tuple[HouseholdDataset, HouseholdDataset]:
    """Contiguous chronological split at a month boundary; no shuffling."""
    cut = split_day(dataset, train_months)
    return dataset.slice_days(0, cut), dataset.slice_days(cut, dataset.days)
