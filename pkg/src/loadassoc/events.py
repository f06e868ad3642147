"""ON/OFF state extraction, start-up events and low-power channel exclusion."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import ApplianceSeries, DataError, HouseholdDataset, TimeGrid

DEFAULT_ON_THRESHOLD = 15.0
DEFAULT_MIN_DURATION = 2
DEFAULT_EXCLUDE_BELOW = 50.0
PEAK_PERCENTILE = 99.0


@dataclass
class EventStream:
    appliance_id: str
    startups: np.ndarray
    shutdowns: np.ndarray
    on_mask: np.ndarray
    grid: TimeGrid

    @property
    def startup_slots(self) -> np.ndarray:
        return (self.startups - self.grid.start) // self.grid.step

    def reconstructed_power(self, level: float = 1.0) -> np.ndarray:
        return np.where(self.on_mask, level, 0.0)


@dataclass
class ExclusionReport:
    excluded: list[str]
    rule_threshold: float
    retained_count: int
    peaks: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "excluded": list(self.excluded),
            "rule_threshold": self.rule_threshold,
            "retained_count": self.retained_count,
            "peaks": self.peaks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExclusionReport":
        return cls(list(d["excluded"]), float(d["rule_threshold"]), int(d["retained_count"]), dict(d.get("peaks", {})))


def _runs(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run-length encode a boolean mask: (starts, lengths, values)."""
    n = mask.shape[0]
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0, dtype=bool)
    change = np.flatnonzero(mask[1:] != mask[:-1]) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [n]]))
    return starts, lengths, mask[starts]


def debounce(mask: np.ndarray, min_duration: int) -> np.ndarray:
    """Absorb runs shorter than ``min_duration`` into the neighbouring stable state.

    Short runs take the state of the preceding stable run; short runs before
    the first stable run take that run's state. If no run is long enough the
    whole trace is OFF. Every output run is then at least ``min_duration``
    long (unless the trace is all OFF), which makes the operation idempotent.
    """
    mask = np.asarray(mask, dtype=bool)
    if min_duration <= 1 or mask.size == 0:
        return mask.copy()
    starts, lengths, values = _runs(mask)
    stable = np.flatnonzero(lengths >= min_duration)
    if stable.size == 0:
        return np.zeros_like(mask)
    out_values = values.copy()
    state = values[stable[0]]
    for r in range(len(values)):
        if lengths[r] >= min_duration:
            state = values[r]
        out_values[r] = state
    return np.repeat(out_values, lengths)


def extract_events(series: ApplianceSeries, on_threshold: float = DEFAULT_ON_THRESHOLD,
                   min_duration: int = DEFAULT_MIN_DURATION) -> EventStream:
    """Threshold ``series`` into ON/OFF, debounce, and list start-ups and shut-downs.

    A slot is ON iff its power exceeds ``on_threshold``. A start-up is the
    first slot of an ON run; a shut-down is the first OFF slot after one. A
    trace that begins ON has no start-up for that first run.
    """
    if on_threshold <= 0:
        raise ValueError("on_threshold must be positive")
    if min_duration < 1:
        raise ValueError("min_duration must be >= 1")
    mask = debounce(series.power > on_threshold, min_duration)
    edges = np.diff(mask.astype(np.int8))
    up = np.flatnonzero(edges == 1) + 1
    down = np.flatnonzero(edges == -1) + 1
    g = series.grid
    return EventStream(series.id, g.start + g.step * up.astype(np.int64),
                       g.start + g.step * down.astype(np.int64), mask, g)


def extract_all(dataset: HouseholdDataset, on_threshold: float = DEFAULT_ON_THRESHOLD,
                min_duration: int = DEFAULT_MIN_DURATION) -> list[EventStream]:
    return [extract_events(s, on_threshold, min_duration) for s in dataset.appliances]


def peak_power(series: ApplianceSeries) -> float:
    return float(np.percentile(series.power, PEAK_PERCENTILE))


def exclude_low_power(dataset: HouseholdDataset, peak_threshold: float = DEFAULT_EXCLUDE_BELOW
                      ) -> tuple[HouseholdDataset, ExclusionReport]:
    """Drop channels whose 99th-percentile power is below ``peak_threshold``.

    The returned dataset holds only the retained channels; the caller keeps
    the original dataset so excluded channels can be re-attached to a cluster.
    """
    if peak_threshold <= 0:
        raise ValueError("peak_threshold must be positive")
    peaks = {s.id: peak_power(s) for s in dataset.appliances}
    kept = [s for s in dataset.appliances if peaks[s.id] >= peak_threshold]
    excluded = [s.id for s in dataset.appliances if peaks[s.id] < peak_threshold]
    if not kept:
        raise DataError(f"every appliance peaks below {peak_threshold} W; nothing to mine")
    report = ExclusionReport(excluded, float(peak_threshold), len(kept), peaks)
    return dataset.with_appliances(kept), report


# ------------------------------------------------------------------- file IO

def write_events(streams: Iterable[EventStream], path: str | Path) -> None:
    rows = []
    for es in streams:
        rows += [(es.appliance_id, "startup", int(t)) for t in es.startups]
        rows += [(es.appliance_id, "shutdown", int(t)) for t in es.shutdowns]
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["appliance_id", "kind", "timestamp"])
        w.writerows(rows)


def read_events(path: str | Path, grid: TimeGrid, ids: list[str]) -> list[EventStream]:
    """Rebuild event streams (with ON masks) for ``ids`` from an events CSV."""
    ups: dict[str, list[int]] = {i: [] for i in ids}
    downs: dict[str, list[int]] = {i: [] for i in ids}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["appliance_id"] not in ups:
                continue
            (ups if row["kind"] == "startup" else downs)[row["appliance_id"]].append(int(row["timestamp"]))
    streams = []
    for i in ids:
        up = np.array(sorted(ups[i]), dtype=np.int64)
        down = np.array(sorted(downs[i]), dtype=np.int64)
        mask = np.zeros(grid.count, dtype=bool)
        # starts ON when the first boundary is a shutdown
        state = bool(down.size and (not up.size or down[0] < up[0]))
        bounds = sorted([(t, True) for t in up] + [(t, False) for t in down])
        pos = 0
        for t, on in bounds:
            k = (t - grid.start) // grid.step
            mask[pos:k] = state
            pos, state = k, on
        mask[pos:] = state
        streams.append(EventStream(i, up, down, mask, grid))
    return streams
