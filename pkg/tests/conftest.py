from __future__ import annotations

import numpy as np
import pytest

from loadassoc.data import ApplianceSeries, CalendarFeatures, HouseholdDataset, TimeGrid, WeatherSeries

ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def record_criterion():
    """Store one PASS/FAIL/SKIP line for the acceptance summary."""

    def record(number: int, status: str, detail: str = "") -> None:
        ACCEPTANCE[number] = (status, detail)
        print(f"criterion {number}: {status} {detail}".rstrip())

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status:<4} {detail}")


def make_dataset(powers: dict[str, np.ndarray], step: int = 60, start: int = 0, total=None) -> HouseholdDataset:
    """Small dataset with flat weather on an arbitrary grid."""
    first = next(iter(powers.values()))
    grid = TimeGrid(start, step, len(first))
    apps = [ApplianceSeries(k, np.asarray(v, dtype=np.float64), grid) for k, v in powers.items()]
    tot = np.sum([a.power for a in apps], axis=0) if total is None else np.asarray(total, dtype=np.float64)
    n = grid.count
    weather = WeatherSeries(np.full(n, 10.0), np.full(n, 50.0), np.full(n, 0.0), grid)
    days = (n * step) // 86400
    cal = CalendarFeatures.for_days(start, days)
    return HouseholdDataset(apps, ApplianceSeries("TOTAL", tot, grid), weather, cal)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_pipeline_config(seed: int = 1, **train) -> dict:
    """A pipeline config small enough to run end to end in a few seconds."""
    from loadassoc.synthetic import planted_spec

    small = {"conv1_filters": 4, "conv2_filters": 8, "gru_units": 8, "gru_layers": 1, "input_window_days": 2}
    return {
        "data": {"synth": planted_spec(3, 2, days=62, seed=seed, low_power=1).to_dict()},
        "split": {"train_months": 1},
        "model": {"cluster": small, "overall": {**small, "gru_layers": 2}},
        "train": {"max_epochs": 3, "patience": 2, "seed": 3, **train},
    }
