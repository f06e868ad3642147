"""
Pairwise behaviour-association matrix over appliance start-up events.

For appliances i and j, start-ups are paired one-to-one, nearest first, among
pairs no further apart than the candidate window. ``n_s`` counts the matched
pairs, ``n_e`` the subset that also fall inside the target window, and
``n_d`` the days on which both appliances started at least once. The entry is

    q[i, j] = (n_e / n_s) * (n_d / n_days)

with 0/0 taken as 0 and a zero diagonal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .data import SECONDS_PER_DAY
from .events import EventStream

DEFAULT_TARGET_WINDOW = 1800
DEFAULT_CANDIDATE_WINDOW = 86400


@dataclass(frozen=True)
class AssociationConfig:
    target_window: int = DEFAULT_TARGET_WINDOW
    candidate_window: int = DEFAULT_CANDIDATE_WINDOW

    def __post_init__(self):
        if not 0 < self.target_window < self.candidate_window:
            raise ValueError(
                f"need 0 < target_window < candidate_window, got {self.target_window}, {self.candidate_window}"
            )


@dataclass
class AssociationMatrix:
    q: np.ndarray
    ids: list[str]
    n_e: np.ndarray
    n_s: np.ndarray
    n_d: np.ndarray
    n_days: int

    def __len__(self):
        return len(self.ids)

    def counters(self, i: int, j: int) -> tuple[int, int, int]:
        return int(self.n_e[i, j]), int(self.n_s[i, j]), int(self.n_d[i, j])


@numba.njit(cache=True)
def _greedy_match(order, a, b, n_a, n_b):
    used_a = np.zeros(n_a, dtype=np.bool_)
    used_b = np.zeros(n_b, dtype=np.bool_)
    keep = np.zeros(order.shape[0], dtype=np.bool_)
    budget = min(n_a, n_b)
    matched = 0
    for k in order:
        if matched == budget:
            break
        ia = a[k]
        ib = b[k]
        if used_a[ia] or used_b[ib]:
            continue
        used_a[ia] = True
        used_b[ib] = True
        keep[k] = True
        matched += 1
    return keep


def match_startups(t_i: np.ndarray, t_j: np.ndarray, candidate_window: int) -> np.ndarray:
    """Greedy one-to-one nearest matching; returns |dt| of every matched pair.

    Candidate pairs (|dt| <= candidate_window) are taken in order of |dt|,
    then earlier midpoint, then earlier t_j. The ordering is the same
    physical edge order whichever appliance is called i, so the matching is
    symmetric.
    """
    t_i = np.sort(np.asarray(t_i, dtype=np.int64))
    t_j = np.sort(np.asarray(t_j, dtype=np.int64))
    if t_i.size == 0 or t_j.size == 0:
        return np.zeros(0, dtype=np.int64)
    lo = np.searchsorted(t_j, t_i - candidate_window, side="left")
    hi = np.searchsorted(t_j, t_i + candidate_window, side="right")
    counts = hi - lo
    if counts.sum() == 0:
        return np.zeros(0, dtype=np.int64)
    a = np.repeat(np.arange(t_i.size), counts)
    first = np.repeat(lo - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    b = np.arange(a.size) + first
    dt = np.abs(t_i[a] - t_j[b])
    order = np.lexsort((t_j[b], t_i[a] + t_j[b], dt))
    keep = _greedy_match(order, a, b, t_i.size, t_j.size)
    return dt[keep]


def startup_days(stream: EventStream) -> np.ndarray:
    return np.unique((stream.startups - stream.grid.start) // SECONDS_PER_DAY)


def count_pair(events_i: EventStream, events_j: EventStream, cfg: AssociationConfig) -> tuple[int, int, int]:
    """Return ``(n_e, n_s, n_d)`` for one appliance pair."""
    if events_i.grid != events_j.grid:
        raise ValueError(f"event streams {events_i.appliance_id!r} and {events_j.appliance_id!r} are on different grids")
    dts = match_startups(events_i.startups, events_j.startups, cfg.candidate_window)
    n_s = int(dts.size)
    n_e = int(np.count_nonzero(dts <= cfg.target_window))
    n_d = int(np.intersect1d(startup_days(events_i), startup_days(events_j)).size)
    return n_e, n_s, n_d


def association_entry(n_e: int, n_s: int, n_d: int, n_days: int) -> float:
    if n_s == 0:
        return 0.0
    return (n_e / n_s) * (n_d / n_days)


def association_matrix(streams: list[EventStream], cfg: AssociationConfig, n_days: int) -> AssociationMatrix:
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    if len(streams) < 2:
        raise ValueError("need at least two event streams")
    n = len(streams)
    n_e = np.zeros((n, n), dtype=np.int64)
    n_s = np.zeros((n, n), dtype=np.int64)
    n_d = np.zeros((n, n), dtype=np.int64)
    q = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            e, s, d = count_pair(streams[i], streams[j], cfg)
            n_e[i, j] = n_e[j, i] = e
            n_s[i, j] = n_s[j, i] = s
            n_d[i, j] = n_d[j, i] = d
            q[i, j] = q[j, i] = association_entry(e, s, d, n_days)
    return AssociationMatrix(q, [s.appliance_id for s in streams], n_e, n_s, n_d, n_days)


# ------------------------------------------------------------------- file IO

def write_matrix(am: AssociationMatrix, path: str | Path) -> Path:
    """Square CSV with channel-code header row/column, plus a ``*_counters.csv`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + am.ids)
        for i, code in enumerate(am.ids):
            w.writerow([code] + [repr(float(v)) for v in am.q[i]])
    side = path.with_name(path.stem + "_counters.csv")
    with open(side, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a_i", "a_j", "n_e", "n_s", "n_d_pair", "n_days"])
        for i in range(len(am.ids)):
            for j in range(len(am.ids)):
                if i != j:
                    w.writerow([am.ids[i], am.ids[j], *am.counters(i, j), am.n_days])
    return side


def read_matrix(path: str | Path) -> AssociationMatrix:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = rows[0][1:]
    q = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    if q.shape != (len(ids), len(ids)):
        raise ValueError(f"{path}: matrix is not square over its header")
    n = len(ids)
    n_e = np.zeros((n, n), dtype=np.int64)
    n_s = np.zeros_like(n_e)
    n_d = np.zeros_like(n_e)
    n_days = 0
    side = path.with_name(path.stem + "_counters.csv")
    if side.exists():
        index = {c: k for k, c in enumerate(ids)}
        with open(side, newline="") as fh:
            for r in csv.DictReader(fh):
                i, j = index[r["a_i"]], index[r["a_j"]]
                n_e[i, j], n_s[i, j], n_d[i, j] = int(r["n_e"]), int(r["n_s"]), int(r["n_d_pair"])
                n_days = int(r["n_days"])
    return AssociationMatrix(q, ids, n_e, n_s, n_d, n_days)
