"""
Synthetic households with planted appliance-behaviour structure.

Each cluster emits "activity" events per day (Poisson, shaped by an hourly
template, a weekday factor and optionally cold weather). Every member of the
cluster starts within ``max_offset`` seconds of an activity event with
probability ``coactivation``; appliances outside the cluster join with
probability ``cross_coactivation``. Appliances also start on their own at
``solo_per_day``. Power is a rectangular pulse per run plus Gaussian noise.

The returned event log is the exact ON/OFF structure of the noise-free trace.
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    SECONDS_PER_DAY,
    ApplianceSeries,
    CalendarFeatures,
    HouseholdDataset,
    TimeGrid,
    WeatherSeries,
)
from .events import EventStream


@dataclass
class ApplianceSpec:
    id: str
    power: float
    cluster: int
    solo_per_day: float = 0.5
    duration_min: tuple[float, float] = (10.0, 40.0)


@dataclass
class ClusterSpec:
    activity_per_day: float = 2.0
    hourly_template: list[float] = field(default_factory=lambda: [1.0] * 24)
    weekday_factor: list[float] = field(default_factory=lambda: [1.0] * 7)
    cold_sensitivity: float = 0.0


@dataclass
class SynthSpec:
    appliances: list[ApplianceSpec]
    clusters: list[ClusterSpec]
    coactivation: float = 0.8
    cross_coactivation: float = 0.0
    days: int = 60
    noise: float = 2.0
    seed: int = 0
    step: int = 60
    start: str = "2012-04-01"
    max_offset: int = 600
    min_gap_slots: int = 3
    base_load: float = 60.0

    def __post_init__(self):
        for p in (self.coactivation, self.cross_coactivation):
            if not 0.0 <= p <= 1.0:
                raise ValueError("co-activation probabilities must lie in [0, 1]")
        for a in self.appliances:
            if a.power <= 0:
                raise ValueError(f"appliance {a.id!r} needs positive power")
            if not 0 <= a.cluster < len(self.clusters):
                raise ValueError(f"appliance {a.id!r} references unknown cluster {a.cluster}")
        if self.days < 1 or SECONDS_PER_DAY % self.step:
            raise ValueError("invalid day count or step")

    @property
    def labels(self) -> np.ndarray:
        return np.array([a.cluster for a in self.appliances], dtype=np.int64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["appliances"] = [ApplianceSpec(**{**a, "duration_min": tuple(a.get("duration_min", (10.0, 40.0)))})
                           for a in d["appliances"]]
        d["clusters"] = [ClusterSpec(**c) for c in d["clusters"]]
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _start_epoch(spec: SynthSpec) -> int:
    d = _dt.date.fromisoformat(spec.start)
    return int(_dt.datetime(d.year, d.month, d.day, tzinfo=_dt.timezone.utc).timestamp())


def synth_weather(grid: TimeGrid, rng: np.random.Generator) -> WeatherSeries:
    """Seasonal + diurnal sinusoids with day-level fronts; dew point from the Magnus formula."""
    ts = grid.timestamps()
    day = (ts - ts[0]) / SECONDS_PER_DAY
    doy = np.array([_dt.datetime.fromtimestamp(int(t), tz=_dt.timezone.utc).timetuple().tm_yday
                    for t in ts[:: SECONDS_PER_DAY // grid.step]])
    n_days = len(doy)
    fronts = np.cumsum(rng.normal(0.0, 1.5, n_days)) * 0.5
    fronts -= np.linspace(fronts[0], fronts[-1], n_days) if n_days > 1 else 0.0
    per_day = 8.0 - 12.0 * np.cos(2 * np.pi * (doy - 15) / 365.25) + fronts
    hour = ((ts % SECONDS_PER_DAY) / 3600.0)
    idx = np.minimum(day.astype(np.int64), n_days - 1)
    temp = per_day[idx] + 4.0 * np.sin(2 * np.pi * (hour - 9.0) / 24.0) + rng.normal(0.0, 0.3, grid.count)
    hum = np.clip(65.0 - 15.0 * np.sin(2 * np.pi * (hour - 9.0) / 24.0)
                  + 5.0 * np.sin(2 * np.pi * doy[idx] / 365.25) + rng.normal(0.0, 2.0, grid.count), 5.0, 100.0)
    a, b = 17.62, 243.12
    gamma = np.log(hum / 100.0) + a * temp / (b + temp)
    dew = b * gamma / (a - gamma)
    return WeatherSeries(temp, hum, dew, grid)


def _pulses(starts_s: np.ndarray, durations_s: np.ndarray, step: int, count: int, min_gap: int
            ) -> list[tuple[int, int]]:
    """Merge start times into non-overlapping [on, off) slot runs separated by >= min_gap OFF slots."""
    order = np.argsort(starts_s, kind="stable")
    runs: list[list[int]] = []
    for i in order:
        on = max(int(starts_s[i] // step), 1)
        off = on + max(int(round(durations_s[i] / step)), min_gap)
        if on >= count:
            continue
        if runs and on < runs[-1][1] + min_gap:
            runs[-1][1] = max(runs[-1][1], off)
        else:
            runs.append([on, off])
    return [(a, min(b, count)) for a, b in runs]


def generate(spec: SynthSpec) -> tuple[HouseholdDataset, np.ndarray, list[EventStream]]:
    """Return (dataset, planted labels, planted event streams); deterministic under ``spec.seed``."""
    root = np.random.SeedSequence(spec.seed)
    weather_ss, activity_ss, *appl_ss = root.spawn(2 + len(spec.appliances))
    spd = SECONDS_PER_DAY // spec.step
    grid = TimeGrid(_start_epoch(spec), spec.step, spec.days * spd)
    weather = synth_weather(grid, np.random.default_rng(weather_ss))
    calendar = CalendarFeatures.for_days(grid.start, spec.days)
    daily_temp = weather.temperature.reshape(spec.days, spd).mean(axis=1)

    rng = np.random.default_rng(activity_ss)
    activity: list[np.ndarray] = []
    for c in spec.clusters:
        tmpl = np.asarray(c.hourly_template, dtype=np.float64)
        tmpl = tmpl / tmpl.sum()
        times = []
        for d in range(spec.days):
            rate = c.activity_per_day * c.weekday_factor[calendar.day_of_week[d]]
            rate *= 1.0 + c.cold_sensitivity * max(0.0, 15.0 - daily_temp[d]) / 10.0
            n = rng.poisson(rate)
            hours = rng.choice(24, size=n, p=tmpl)
            times.append(d * SECONDS_PER_DAY + hours * 3600 + rng.uniform(0, 3600, n))
        activity.append(np.concatenate(times) if times else np.zeros(0))

    span = spec.days * SECONDS_PER_DAY
    appliances, streams = [], []
    for a, ss in zip(spec.appliances, appl_ss):
        r = np.random.default_rng(ss)
        starts = []
        for c, ev in enumerate(activity):
            p = spec.coactivation if c == a.cluster else spec.cross_coactivation
            fire = ev[r.random(ev.size) < p]
            starts.append(fire + r.uniform(0, spec.max_offset, fire.size))
        n_solo = r.poisson(a.solo_per_day * spec.days)
        starts.append(r.uniform(0, span, n_solo))
        s = np.concatenate(starts)
        s = s[s < span]
        dur = r.uniform(a.duration_min[0] * 60, a.duration_min[1] * 60, s.size)
        runs = _pulses(s, dur, spec.step, grid.count, spec.min_gap_slots)
        mask = np.zeros(grid.count, dtype=bool)
        for on, off in runs:
            mask[on:off] = True
        clean = np.where(mask, a.power, 0.0)
        power = np.clip(clean + r.normal(0.0, spec.noise, grid.count), 0.0, None) if spec.noise > 0 else clean
        appliances.append(ApplianceSeries(a.id, power, grid, f"synthetic cluster {a.cluster}"))
        up = np.array([on for on, _ in runs], dtype=np.int64)
        down = np.array([off for _, off in runs if off < grid.count], dtype=np.int64)
        streams.append(EventStream(a.id, grid.start + up * spec.step, grid.start + down * spec.step, mask, grid))

    rb = np.random.default_rng(root.spawn(1)[0])
    base = spec.base_load + (rb.normal(0.0, spec.noise, grid.count) if spec.noise > 0 else 0.0)
    total_power = np.sum([s.power for s in appliances], axis=0) + np.clip(base, 0.0, None)
    total = ApplianceSeries("TOTAL", total_power, grid, "main meter")
    ds = HouseholdDataset(appliances, total, weather, calendar)
    return ds, spec.labels, streams


# ------------------------------------------------------------ ready-made specs

_MORNING_EVENING = [0.2] * 6 + [2, 3, 2, 1, 0.5, 0.5, 0.8, 0.8, 0.5, 0.5, 0.8, 2, 3, 3, 2, 1, 0.5, 0.3]
_MIDDAY = [0.1] * 8 + [1, 2, 3, 3, 3, 3, 2, 2, 1, 0.5, 0.3, 0.2, 0.1, 0.1, 0.1, 0.1]
_NIGHT = [2, 2, 2, 1.5, 1, 0.5] + [0.2] * 14 + [0.5, 1, 1.5, 2]


def planted_spec(n_clusters: int = 3, per_cluster: int = 3, days: int = 60, seed: int = 0,
                 coactivation: float = 0.8, noise: float = 2.0, low_power: int = 0) -> SynthSpec:
    """A household with ``n_clusters`` distinct behaviour groups (plus optional low-power channels)."""
    templates = [_MORNING_EVENING, _MIDDAY, _NIGHT]
    weekday = [[1, 1, 1, 1, 1, 1.8, 1.8], [0.4, 0.4, 0.4, 0.4, 0.6, 2.2, 2.2], [1.0] * 7]
    clusters = [
        ClusterSpec(activity_per_day=2.5 + 0.5 * (c % 3), hourly_template=list(templates[c % 3]),
                    weekday_factor=list(weekday[c % 3]), cold_sensitivity=1.5 if c % 3 == 2 else 0.0)
        for c in range(n_clusters)
    ]
    appliances = []
    for c in range(n_clusters):
        for m in range(per_cluster):
            appliances.append(ApplianceSpec(f"C{c}A{m}", power=300.0 + 400.0 * ((c + m) % 4), cluster=c,
                                            solo_per_day=0.3, duration_min=(15.0, 60.0)))
    for m in range(low_power):
        appliances.append(ApplianceSpec(f"LP{m}", power=10.0, cluster=m % n_clusters, solo_per_day=3.0,
                                        duration_min=(30.0, 120.0)))
    return SynthSpec(appliances, clusters, coactivation=coactivation, days=days, noise=noise, seed=seed)


def daily_pattern(days: int, slots: int = 12, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free (days, slots) load = fixed daily shape x weekday factor; returns (load, day_of_week)."""
    rng = np.random.default_rng(seed)
    shape = 200.0 + 800.0 * (0.5 + 0.5 * np.sin(2 * np.pi * (np.arange(slots) - 2) / slots)) ** 2
    factor = np.array([1.0, 0.95, 1.0, 1.05, 1.1, 1.6, 1.5])
    start_dow = int(rng.integers(7))
    dow = (start_dow + np.arange(days)) % 7
    return shape[None, :] * factor[dow][:, None], dow


def forecast_spec(seed: int = 0, days: int = 214) -> SynthSpec:
    """Three behaviour groups with different load drivers: a weekday routine, a
    weekend group and a cold-driven night group, plus two low-power channels."""
    clusters = [
        ClusterSpec(4.0, list(_MORNING_EVENING), [1.2, 1.2, 1.2, 1.2, 1.2, 0.3, 0.3]),
        ClusterSpec(3.0, list(_MIDDAY), [0.1, 0.1, 0.1, 0.1, 0.2, 3.0, 3.0]),
        ClusterSpec(1.0, list(_NIGHT), [1.0] * 7, cold_sensitivity=4.0),
    ]
    appliances = [ApplianceSpec(f"C{c}A{m}", power=300.0 + 400.0 * ((c + m) % 4), cluster=c,
                                solo_per_day=0.1, duration_min=(15.0, 60.0))
                  for c in range(3) for m in range(3)]
    appliances += [ApplianceSpec(f"LP{m}", power=10.0, cluster=m, solo_per_day=3.0, duration_min=(30.0, 120.0))
                   for m in range(2)]
    return SynthSpec(appliances, clusters, coactivation=0.9, days=days, noise=2.0, seed=seed)


def _block_template(first_hour: int) -> list[float]:
    t = [0.01] * 24
    for offset, v in enumerate((1.0, 3.0, 3.0, 1.0)):
        t[(first_hour + offset) % 24] = v
    return t


def separated_spec(n_clusters: int = 3, per_cluster: int = 3, days: int = 60, seed: int = 0,
                   coactivation: float = 0.95, solo_per_day: float = 0.1) -> SynthSpec:
    """Up to four groups active in disjoint four-hour blocks, so cross-group start-ups rarely coincide."""
    if not 1 <= n_clusters <= 4:
        raise ValueError("separated_spec supports 1 to 4 clusters")
    clusters = [ClusterSpec(activity_per_day=2.5 + 0.5 * c, hourly_template=_block_template(h))
                for c, h in enumerate((6, 12, 18, 0)[:n_clusters])]
    appliances = [ApplianceSpec(f"C{c}A{m}", power=300.0 + 400.0 * ((c + m) % 4), cluster=c,
                                solo_per_day=solo_per_day, duration_min=(15.0, 60.0))
                  for c in range(n_clusters) for m in range(per_cluster)]
    return SynthSpec(appliances, clusters, coactivation=coactivation, days=days, noise=2.0, seed=seed)
