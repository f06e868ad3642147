"""
Domain types, CSV ingestion, grid resampling and min-max normalization.

Every series in a household lives on a uniform ``TimeGrid``. Power is kept as
mean watts per slot at every resolution, so energy in a slot is
``power * step``.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
MAX_FILL_GAP = 5
DUMP_VERSION = 1


class DataError(ValueError):
    """Raised for malformed input data or inconsistent grids."""


@dataclass(frozen=True)
class TimeGrid:
    start: int
    step: int
    count: int

    def __post_init__(self):
        if self.step <= 0:
            raise DataError(f"grid step must be positive, got {self.step}")
        if self.count < 1:
            raise DataError(f"grid count must be >= 1, got {self.count}")

    @property
    def end(self) -> int:
        """Exclusive end timestamp."""
        return self.start + self.step * self.count

    def timestamps(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.count, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"start": int(self.start), "step": int(self.step), "count": int(self.count)}


@dataclass
class ApplianceSeries:
    id: str
    power: np.ndarray
    grid: TimeGrid
    name: str = ""

    def __post_init__(self):
        self.power = np.asarray(self.power, dtype=np.float64)
        if self.power.ndim != 1 or self.power.shape[0] != self.grid.count:
            raise DataError(
                f"series {self.id!r}: length {self.power.shape} does not match grid count {self.grid.count}"
            )
        if not np.all(np.isfinite(self.power)):
            raise DataError(f"series {self.id!r} contains non-finite power values")
        if np.any(self.power < 0):
            raise DataError(f"series {self.id!r} contains negative power values")


@dataclass
class WeatherSeries:
    temperature: np.ndarray
    humidity: np.ndarray
    dew_point: np.ndarray
    grid: TimeGrid

    FIELDS = ("temperature", "humidity", "dew_point")

    def __post_init__(self):
        for name in self.FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.grid.count,):
                raise DataError(f"weather field {name!r} has shape {arr.shape}, expected ({self.grid.count},)")
            setattr(self, name, arr)
        if np.any((self.humidity < 0) | (self.humidity > 100)):
            raise DataError("humidity must lie in [0, 100]")

    def as_matrix(self) -> np.ndarray:
        """(count, 3) array in ``FIELDS`` order."""
        return np.column_stack([getattr(self, f) for f in self.FIELDS])


@dataclass
class CalendarFeatures:
    day_of_week: np.ndarray
    is_holiday: np.ndarray
    slots_per_day: int = 12

    def __post_init__(self):
        self.day_of_week = np.asarray(self.day_of_week, dtype=np.int64)
        self.is_holiday = np.asarray(self.is_holiday, dtype=bool)
        if self.day_of_week.shape != self.is_holiday.shape:
            raise DataError("calendar arrays must have one entry per day")
        if np.any((self.day_of_week < 0) | (self.day_of_week > 6)):
            raise DataError("day_of_week must lie in [0, 6]")

    @property
    def slot_of_day(self) -> np.ndarray:
        return np.arange(self.slots_per_day, dtype=np.int64)

    @classmethod
    def for_days(cls, day_start: int, days: int, utc_offset: int = 0,
                 holidays: Iterable[str] = (), slots_per_day: int = 12) -> "CalendarFeatures":
        """Build the calendar for ``days`` consecutive days from local midnight ``day_start``."""
        holiday_set = {str(h) for h in holidays}
        dow = np.empty(days, dtype=np.int64)
        hol = np.zeros(days, dtype=bool)
        for d in range(days):
            date = local_date(day_start + d * SECONDS_PER_DAY, utc_offset)
            dow[d] = date.weekday()
            hol[d] = date.isoformat() in holiday_set
        return cls(dow, hol, slots_per_day)


@dataclass
class HouseholdDataset:
    appliances: list[ApplianceSeries]
    total: ApplianceSeries
    weather: WeatherSeries
    calendar: CalendarFeatures
    utc_offset: int = 0
    holidays: tuple[str, ...] = ()
    gap_report: list[dict] = field(default_factory=list)

    def __post_init__(self):
        grid = self.total.grid
        for s in self.appliances:
            if s.grid != grid:
                raise DataError(f"appliance {s.id!r} is on grid {s.grid}, expected {grid}")
        if self.weather.grid != grid:
            raise DataError("weather grid does not match appliance grid")
        if len(self.calendar.day_of_week) != self.days:
            raise DataError("calendar length does not match day count")
        ids = [s.id for s in self.appliances]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate appliance ids")

    @property
    def grid(self) -> TimeGrid:
        return self.total.grid

    @property
    def days(self) -> int:
        return self.grid.step * self.grid.count // SECONDS_PER_DAY

    @property
    def slots_per_day(self) -> int:
        return SECONDS_PER_DAY // self.grid.step

    @property
    def day_aligned(self) -> bool:
        g = self.grid
        return (g.start + self.utc_offset) % SECONDS_PER_DAY == 0 and (g.step * g.count) % SECONDS_PER_DAY == 0

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.appliances]

    def appliance(self, channel: str) -> ApplianceSeries:
        for s in self.appliances:
            if s.id == channel:
                return s
        raise KeyError(channel)

    def submetered_sum(self) -> np.ndarray:
        return np.sum([s.power for s in self.appliances], axis=0)

    def date_of_day(self, day: int) -> _dt.date:
        return local_date(self.grid.start + day * SECONDS_PER_DAY, self.utc_offset)

    def day_of_date(self, date: _dt.date | str) -> int:
        if isinstance(date, str):
            date = _dt.date.fromisoformat(date)
        return (date - self.date_of_day(0)).days

    def slice_days(self, first: int, last: int) -> "HouseholdDataset":
        """Days ``[first, last)`` as a new dataset."""
        if not 0 <= first < last <= self.days:
            raise DataError(f"day range [{first}, {last}) outside [0, {self.days})")
        spd = self.slots_per_day
        lo, hi = first * spd, last * spd
        grid = TimeGrid(self.grid.start + lo * self.grid.step, self.grid.step, hi - lo)

        def cut(s: ApplianceSeries) -> ApplianceSeries:
            return ApplianceSeries(s.id, s.power[lo:hi].copy(), grid, s.name)

        w = self.weather
        weather = WeatherSeries(w.temperature[lo:hi].copy(), w.humidity[lo:hi].copy(),
                                w.dew_point[lo:hi].copy(), grid)
        cal = CalendarFeatures(self.calendar.day_of_week[first:last].copy(),
                               self.calendar.is_holiday[first:last].copy(), self.calendar.slots_per_day)
        return HouseholdDataset([cut(s) for s in self.appliances], cut(self.total), weather, cal,
                                self.utc_offset, self.holidays, list(self.gap_report))

    def with_appliances(self, appliances: list[ApplianceSeries]) -> "HouseholdDataset":
        return HouseholdDataset(appliances, self.total, self.weather, self.calendar,
                                self.utc_offset, self.holidays, list(self.gap_report))


def local_date(ts: int, utc_offset: int = 0) -> _dt.date:
    return _dt.datetime.fromtimestamp(int(ts) + utc_offset, tz=_dt.timezone.utc).date()


def align_to_days(ds: HouseholdDataset) -> HouseholdDataset:
    """Trim to whole local days starting at the first local midnight."""
    g = ds.grid
    if SECONDS_PER_DAY % g.step:
        raise DataError(f"grid step {g.step} does not divide a day")
    lead = (-(g.start + ds.utc_offset)) % SECONDS_PER_DAY // g.step
    spd = SECONDS_PER_DAY // g.step
    days = (g.count - lead) // spd
    if days < 1:
        raise DataError("data spans less than one whole local day")
    lo, hi = lead, lead + days * spd
    grid = TimeGrid(g.start + lo * g.step, g.step, hi - lo)

    def cut(s: ApplianceSeries) -> ApplianceSeries:
        return ApplianceSeries(s.id, s.power[lo:hi].copy(), grid, s.name)

    w = ds.weather
    weather = WeatherSeries(w.temperature[lo:hi].copy(), w.humidity[lo:hi].copy(), w.dew_point[lo:hi].copy(), grid)
    cal = CalendarFeatures.for_days(grid.start, days, ds.utc_offset, ds.holidays, ds.calendar.slots_per_day)
    return HouseholdDataset([cut(s) for s in ds.appliances], cut(ds.total), weather, cal,
                            ds.utc_offset, ds.holidays, list(ds.gap_report))


def concat_datasets(parts: Sequence[HouseholdDataset]) -> HouseholdDataset:
    """Concatenate chronologically adjacent datasets (inverse of day slicing)."""
    if not parts:
        raise DataError("nothing to concatenate")
    first = parts[0]
    for a, b in zip(parts, parts[1:]):
        if a.grid.end != b.grid.start or a.grid.step != b.grid.step or a.ids != b.ids:
            raise DataError("datasets are not adjacent or have different channels")
    count = sum(p.grid.count for p in parts)
    grid = TimeGrid(first.grid.start, first.grid.step, count)

    def join(getter) -> np.ndarray:
        return np.concatenate([getter(p) for p in parts])

    appliances = [
        ApplianceSeries(s.id, join(lambda p, i=i: p.appliances[i].power), grid, s.name)
        for i, s in enumerate(first.appliances)
    ]
    total = ApplianceSeries(first.total.id, join(lambda p: p.total.power), grid, first.total.name)
    weather = WeatherSeries(join(lambda p: p.weather.temperature), join(lambda p: p.weather.humidity),
                            join(lambda p: p.weather.dew_point), grid)
    cal = CalendarFeatures(join(lambda p: p.calendar.day_of_week), join(lambda p: p.calendar.is_holiday),
                           first.calendar.slots_per_day)
    return HouseholdDataset(appliances, total, weather, cal, first.utc_offset, first.holidays,
                            list(first.gap_report))


# ---------------------------------------------------------------- resampling

def resample_array(values: np.ndarray, source: TimeGrid, target: TimeGrid) -> np.ndarray:
    if target.step % source.step != 0:
        raise DataError(f"target step {target.step} is not an integer multiple of {source.step}")
    offset = target.start - source.start
    if offset < 0 or target.end > source.end or offset % source.step != 0:
        raise DataError("target span is not contained in (or aligned with) the source span")
    ratio = target.step // source.step
    lo = offset // source.step
    block = np.asarray(values, dtype=np.float64)[lo: lo + ratio * target.count]
    return block.reshape(target.count, ratio).mean(axis=1)


def resample(series: ApplianceSeries, target: TimeGrid) -> ApplianceSeries:
    """Mean power of each target slot over the source slots it covers."""
    return ApplianceSeries(series.id, resample_array(series.power, series.grid, target), target, series.name)


def forecast_grid(grid: TimeGrid, slots_per_day: int = 12) -> TimeGrid:
    step = SECONDS_PER_DAY // slots_per_day
    if SECONDS_PER_DAY % slots_per_day or step % grid.step:
        raise DataError(f"{slots_per_day} slots/day is incompatible with source step {grid.step}")
    return TimeGrid(grid.start, step, grid.step * grid.count // step)


# ------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormalizationParams:
    minimum: np.ndarray
    maximum: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        span = self.maximum - self.minimum
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (x - self.minimum) / safe, 0.0)

    def invert(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return z * (self.maximum - self.minimum) + self.minimum

    def to_dict(self) -> dict:
        return {"min": np.atleast_1d(self.minimum).tolist(), "max": np.atleast_1d(self.maximum).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


def fit_normalizer(features: np.ndarray) -> NormalizationParams:
    """Per-column min/max of a ``(n_samples, n_features)`` array (1-D means one feature)."""
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot fit a normalizer on empty input")
    if x.ndim == 1:
        x = x[:, None]
    return NormalizationParams(x.min(axis=0), x.max(axis=0))


# ----------------------------------------------------------------- ingestion

@dataclass
class IngestSchema:
    """Column mapping for CSV ingestion.

    ``channels`` maps CSV column name to channel code. ``total`` names the
    main-meter column (if absent, the appliance sum stands in). ``weather``
    maps each of temperature/humidity/dew_point to a column name.
    """

    channels: dict[str, str]
    weather: dict[str, str]
    timestamp: str = "unix_ts"
    total: str | None = None
    names: dict[str, str] = field(default_factory=dict)
    utc_offset: int = 0
    holidays: tuple[str, ...] = ()

    @classmethod
    def load(cls, path: str | Path) -> "IngestSchema":
        with open(path) as fh:
            raw = json.load(fh)
        try:
            return cls(
                channels=dict(raw["channels"]),
                weather=dict(raw["weather"]),
                timestamp=raw.get("timestamp", "unix_ts"),
                total=raw.get("total"),
                names=dict(raw.get("names", {})),
                utc_offset=int(raw.get("utc_offset", 0)),
                holidays=tuple(raw.get("holidays", ())),
            )
        except KeyError as exc:
            raise DataError(f"schema {path} lacks mandatory key {exc}") from None


def _fill_gaps(values: np.ndarray, label: str, times: np.ndarray, report: list[dict]) -> np.ndarray:
    """Forward-fill NaN runs of at most ``MAX_FILL_GAP`` samples; longer runs become zero."""
    out = values.copy()
    missing = np.isnan(out)
    if not missing.any():
        return out
    idx = np.flatnonzero(missing)
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]]) + 1
    for a, b in zip(starts, ends):
        length = int(b - a)
        if length <= MAX_FILL_GAP and a > 0:
            out[a:b] = out[a - 1]
            action = "forward-fill"
        else:
            out[a:b] = 0.0
            action = "zero"
        report.append({"channel": label, "start": int(times[a]), "length": length, "action": action})
    return out


def _read_table(path: Path, ts_col: str) -> tuple[pd.DataFrame, int]:
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if ts_col not in df.columns:
        raise DataError(f"{path}: missing timestamp column {ts_col!r}")
    ts = df[ts_col].to_numpy()
    if not np.issubdtype(ts.dtype, np.number) or np.isnan(ts.astype(float)).any():
        raise DataError(f"{path}: timestamp column must be numeric unix seconds")
    ts = ts.astype(np.int64)
    if np.any(np.diff(ts) < 0):
        raise DataError(f"{path}: timestamps are not monotone")
    df = df.drop_duplicates(subset=ts_col, keep="first")
    diffs = np.diff(df[ts_col].to_numpy(dtype=np.int64))
    diffs = diffs[diffs > 0]
    step = int(np.min(diffs)) if diffs.size else 60
    return df, step


def ingest_csv(paths: str | Path | Sequence[str | Path], schema: IngestSchema) -> HouseholdDataset:
    """Load one or more CSV files into a ``HouseholdDataset`` on the finest source grid.

    Columns may be spread across files; a coarser file (e.g. hourly weather)
    is held constant across the finer slots. Use ``align_to_days`` before
    anything that works per calendar day.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    tables = [(Path(p), *_read_table(Path(p), schema.timestamp)) for p in paths]

    wanted = list(schema.channels) + list(schema.weather.values())
    if schema.total:
        wanted.append(schema.total)
    owner: dict[str, int] = {}
    for col in wanted:
        for i, (_, df, _) in enumerate(tables):
            if col in df.columns:
                owner.setdefault(col, i)
        if col not in owner:
            raise DataError(f"mapped column {col!r} not found in any input file")
    for key in WeatherSeries.FIELDS:
        if key not in schema.weather:
            raise DataError(f"schema must map weather field {key!r}")

    step = min(s for _, _, s in tables)
    for _, _, s in tables:
        if s % step:
            raise DataError(f"file step {s} is not a multiple of the grid step {step}")
    t0 = min(int(df[schema.timestamp].iloc[0]) for _, df, _ in tables)
    t1 = max(int(df[schema.timestamp].iloc[-1]) + s for _, df, s in tables)
    grid = TimeGrid(t0, step, (t1 - t0) // step)
    off = schema.utc_offset

    report: list[dict] = []
    columns: dict[str, np.ndarray] = {}
    for col, i in owner.items():
        path, df, fstep = tables[i]
        fcount = -(-grid.count * step // fstep)
        ftimes = t0 + fstep * np.arange(fcount, dtype=np.int64)
        raw = np.full(fcount, np.nan)
        ts = df[schema.timestamp].to_numpy(dtype=np.int64)
        vals = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=np.float64)
        pos = ts - t0
        ok = (pos >= 0) & (pos % fstep == 0) & (pos // fstep < fcount)
        raw[pos[ok] // fstep] = vals[ok]
        filled = _fill_gaps(raw, schema.channels.get(col, col), ftimes, report)
        columns[col] = np.repeat(filled, fstep // step)[: grid.count]

    def power_series(col: str, code: str) -> ApplianceSeries:
        p = columns[col]
        neg = int(np.sum(p < 0))
        if neg:
            report.append({"channel": code, "start": grid.start, "length": neg, "action": "clip-negative"})
            p = np.clip(p, 0.0, None)
        return ApplianceSeries(code, p, grid, schema.names.get(code, ""))

    appliances = [power_series(col, code) for col, code in schema.channels.items()]
    if schema.total:
        total = power_series(schema.total, "TOTAL")
    else:
        total = ApplianceSeries("TOTAL", np.sum([a.power for a in appliances], axis=0), grid, "appliance sum")
    weather = WeatherSeries(
        columns[schema.weather["temperature"]],
        np.clip(columns[schema.weather["humidity"]], 0.0, 100.0),
        columns[schema.weather["dew_point"]],
        grid,
    )
    days = grid.step * grid.count // SECONDS_PER_DAY
    calendar = CalendarFeatures.for_days(t0, days, off, schema.holidays)
    if report:
        log.info("ingest: %d gap/repair records", len(report))
    return HouseholdDataset(appliances, total, weather, calendar, off, tuple(schema.holidays), report)


# ------------------------------------------------------------ canonical dump

def _write_column_csv(path: Path, header: str, grid: TimeGrid, values: np.ndarray) -> None:
    ts = grid.timestamps()
    with open(path, "w", newline="\n") as fh:
        fh.write(f"timestamp,{header}\n")
        fh.writelines(f"{t},{v!r}\n" for t, v in zip(ts.tolist(), values.tolist()))


def dump_dataset(ds: HouseholdDataset, out_dir: str | Path) -> Path:
    """Write one CSV per channel plus ``manifest.json``; output is byte-deterministic."""
    out = Path(out_dir)
    (out / "channels").mkdir(parents=True, exist_ok=True)
    for s in ds.appliances + [ds.total]:
        _write_column_csv(out / "channels" / f"{s.id}.csv", "power", ds.grid, s.power)
    ts = ds.grid.timestamps()
    w = ds.weather
    with open(out / "weather.csv", "w", newline="\n") as fh:
        fh.write("timestamp,temperature,humidity,dew_point\n")
        fh.writelines(
            f"{t},{a!r},{b!r},{c!r}\n"
            for t, a, b, c in zip(ts.tolist(), w.temperature.tolist(), w.humidity.tolist(), w.dew_point.tolist())
        )
    manifest = {
        "format_version": DUMP_VERSION,
        "grid": ds.grid.to_dict(),
        "days": ds.days,
        "utc_offset": ds.utc_offset,
        "holidays": list(ds.holidays),
        "appliances": [{"id": s.id, "name": s.name} for s in ds.appliances],
        "total": {"id": ds.total.id, "name": ds.total.name},
        "gap_report": ds.gap_report,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(in_dir: str | Path) -> HouseholdDataset:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{src} has no manifest.json") from None
    grid = TimeGrid(**manifest["grid"])

    def read(path: Path) -> pd.DataFrame:
        df = pd.read_csv(path, float_precision="round_trip")
        if len(df) != grid.count:
            raise DataError(f"{path}: {len(df)} rows, expected {grid.count}")
        return df

    def series(meta: dict) -> ApplianceSeries:
        df = read(src / "channels" / f"{meta['id']}.csv")
        return ApplianceSeries(meta["id"], df["power"].to_numpy(dtype=np.float64), grid, meta.get("name", ""))

    wdf = read(src / "weather.csv")
    weather = WeatherSeries(*(wdf[f].to_numpy(dtype=np.float64) for f in WeatherSeries.FIELDS), grid=grid)
    calendar = CalendarFeatures.for_days(grid.start, manifest["days"], manifest["utc_offset"], manifest["holidays"])
    return HouseholdDataset(
        [series(m) for m in manifest["appliances"]],
        series(manifest["total"]),
        weather,
        calendar,
        manifest["utc_offset"],
        tuple(manifest["holidays"]),
        manifest.get("gap_report", []),
    )


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()
