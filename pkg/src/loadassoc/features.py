"""Distance correlation screening of candidate forecast inputs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ApplianceSeries, HouseholdDataset, WeatherSeries, forecast_grid, resample_array

DEFAULT_LAGS = (7, 2, 1)
DEFAULT_THRESHOLD = 0.2
CLAMP_TOL = 1e-12
_CHUNK = 1024


def _centered_moments(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Return (dCov^2(x,y), dVar^2(x), dVar^2(y)) of the biased estimator.

    Uses sum(A*B)/n^2 = mean(a*b) - 2/n * sum(a_row*b_row) + a_mean*b_mean
    for double-centred A, B, so memory stays O(n * chunk).
    """
    n = x.shape[0]
    row_a = np.empty(n)
    row_b = np.empty(n)
    s_ab = s_aa = s_bb = 0.0
    for lo in range(0, n, _CHUNK):
        a = np.abs(x[lo:lo + _CHUNK, None] - x[None, :])
        b = np.abs(y[lo:lo + _CHUNK, None] - y[None, :])
        row_a[lo:lo + _CHUNK] = a.mean(axis=1)
        row_b[lo:lo + _CHUNK] = b.mean(axis=1)
        s_ab += float((a * b).sum())
        s_aa += float((a * a).sum())
        s_bb += float((b * b).sum())
    ga, gb = row_a.mean(), row_b.mean()
    n2 = float(n) * n
    cov = s_ab / n2 - 2.0 / n * float(row_a @ row_b) + ga * gb
    var_x = s_aa / n2 - 2.0 / n * float(row_a @ row_a) + ga * ga
    var_y = s_bb / n2 - 2.0 / n * float(row_b @ row_b) + gb * gb
    return cov, var_x, var_y


def distance_correlation(x, y) -> float:
    """Biased (V-statistic) distance correlation of two real samples, in [0, 1].

    Returns 0 when either sample is constant.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("distance correlation needs n >= 2")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("inputs must be finite")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    cov, var_x, var_y = _centered_moments(x, y)
    if var_x <= 0 or var_y <= 0:
        return 0.0
    denom = np.sqrt(var_x) * np.sqrt(var_y)
    if denom == 0:
        return 0.0
    r2 = cov / denom
    if r2 < 0:
        if r2 < -CLAMP_TOL:
            raise FloatingPointError(f"negative squared distance correlation {r2}")
        return 0.0
    return float(min(np.sqrt(r2), 1.0))


def lag_name(days: int) -> str:
    return f"lag_{days}d"


@dataclass
class FeatureTable:
    rows: list[str]
    columns: list[str]
    values: np.ndarray

    def get(self, feature: str, target: str) -> float:
        return float(self.values[self.rows.index(feature), self.columns.index(target)])

    def column(self, target: str) -> dict[str, float]:
        j = self.columns.index(target)
        return {r: float(self.values[i, j]) for i, r in enumerate(self.rows)}

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature"] + self.columns)
            for i, r in enumerate(self.rows):
                w.writerow([r] + [repr(float(v)) for v in self.values[i]])

    @classmethod
    def read(cls, path: str | Path) -> "FeatureTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls([r[0] for r in rows[1:]], rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]]))


def daily_matrix(values: np.ndarray, dataset: HouseholdDataset, slots_per_day: int = 12) -> np.ndarray:
    """Resample a source-grid array to the forecast grid, shaped (days, slots_per_day)."""
    target = forecast_grid(dataset.grid, slots_per_day)
    return resample_array(values, dataset.grid, target).reshape(dataset.days, slots_per_day)


def daily_weather(dataset: HouseholdDataset, slots_per_day: int = 12) -> np.ndarray:
    """(days, slots, 3) weather in ``WeatherSeries.FIELDS`` order."""
    w = dataset.weather
    return np.stack([daily_matrix(getattr(w, f), dataset, slots_per_day) for f in WeatherSeries.FIELDS], axis=2)


def build_feature_table(dataset: HouseholdDataset, cluster_loads: Sequence[ApplianceSeries],
                        lags: Sequence[int] = DEFAULT_LAGS, train_days: int | None = None,
                        total: np.ndarray | None = None, slots_per_day: int = 12) -> FeatureTable:
    """DCC of each candidate input against the total and every cluster load.

    Lagged load pairs use the same slot index ``lag`` days earlier; the first
    ``max(lags)`` days are dropped so every pair is defined. Only days before
    ``train_days`` are used.
    """
    last = dataset.days if train_days is None else train_days
    first = max(lags)
    if last - first < 1:
        raise ValueError(f"need more than {first} days of history, have {last}")
    if total is None:
        total = dataset.submetered_sum()
    targets = {"total": total}
    for s in cluster_loads:
        targets[s.id] = s.power
    weather = daily_weather(dataset, slots_per_day)[first:last]
    rows = [lag_name(L) for L in lags] + list(WeatherSeries.FIELDS)
    values = np.zeros((len(rows), len(targets)))
    for j, power in enumerate(targets.values()):
        y = daily_matrix(power, dataset, slots_per_day)
        target = y[first:last].ravel()
        for i, L in enumerate(lags):
            values[i, j] = distance_correlation(target, y[first - L:last - L].ravel())
        for k in range(len(WeatherSeries.FIELDS)):
            values[len(lags) + k, j] = distance_correlation(target, weather[:, :, k].ravel())
    return FeatureTable(rows, list(targets), values)


def select_features(table: FeatureTable, threshold: float = DEFAULT_THRESHOLD) -> dict[str, list[str]]:
    """Per target, features with DCC >= threshold; the best lag feature is always kept."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    out = {}
    for target in table.columns:
        col = table.column(target)
        keep = [f for f in table.rows if col[f] >= threshold]
        lag_rows = [f for f in table.rows if f.startswith("lag_")]
        if lag_rows and not any(f in keep for f in lag_rows):
            best = max(lag_rows, key=lambda f: (col[f], -lag_rows.index(f)))
            keep = [f for f in table.rows if f in keep or f == best]
        out[target] = keep
    return out
