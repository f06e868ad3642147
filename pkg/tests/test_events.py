from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_dataset
from loadassoc.data import ApplianceSeries, DataError, TimeGrid
from loadassoc.events import (
    ExclusionReport,
    debounce,
    exclude_low_power,
    extract_all,
    extract_events,
    read_events,
    write_events,
)
from loadassoc.synthetic import generate, planted_spec


def _series(power, step=60):
    power = np.asarray(power, dtype=np.float64)
    return ApplianceSeries("X", power, TimeGrid(0, step, len(power)))


def test_single_pulse():
    # [TRIVIAL] [0,120,130,0] -> start-up at slot 1, shut-down at slot 3
    es = extract_events(_series([0, 120, 130, 0]), 15.0, 1)
    np.testing.assert_array_equal(es.startup_slots, [1])
    np.testing.assert_array_equal(es.shutdowns, [180])
    np.testing.assert_array_equal(es.on_mask, [False, True, True, False])


def test_short_runs_debounced():
    # [TRIVIAL] [0,20,0,20,0] with min_duration 2 -> nothing
    es = extract_events(_series([0, 20, 0, 20, 0]), 15.0, 2)
    assert es.startups.size == 0 and es.shutdowns.size == 0
    assert not es.on_mask.any()


def test_threshold_is_strict():
    es = extract_events(_series([0, 15, 15, 0, 16, 16, 0]), 15.0, 1)
    np.testing.assert_array_equal(es.startup_slots, [4])


def test_short_off_gap_is_bridged():
    es = extract_events(_series([0, 0, 500, 500, 0, 500, 500, 0, 0]), 15.0, 2)
    np.testing.assert_array_equal(es.startup_slots, [2])
    np.testing.assert_array_equal(es.on_mask, [0, 0, 1, 1, 1, 1, 1, 0, 0])


def test_trace_starting_on_has_no_leading_startup():
    es = extract_events(_series([500, 500, 500, 0, 0, 500, 500]), 15.0, 2)
    np.testing.assert_array_equal(es.startup_slots, [5])
    np.testing.assert_array_equal(es.shutdowns, [180])


def test_empty_and_invalid_arguments():
    es = extract_events(_series(np.zeros(10)))
    assert es.startups.size == 0
    with pytest.raises(ValueError):
        extract_events(_series([1.0]), 0.0)
    with pytest.raises(ValueError):
        extract_events(_series([1.0]), 15.0, 0)


def test_planted_activations_with_noise_spikes():
    # [DERIVED] 50 planted activations + isolated spikes/dropouts -> exactly 50 start-ups
    rng = np.random.default_rng(8)
    n = 50 * 40
    power = rng.uniform(0, 5, n)
    planted = []
    for k in range(50):
        on = k * 40 + int(rng.integers(3, 10))
        dur = int(rng.integers(4, 20))
        power[on:on + dur] = 800 + rng.normal(0, 5, dur)
        planted.append(on)
        if dur > 6:
            power[on + 3] = 3.0  # one-slot dropout inside the run
        power[on + dur + 2] = 400.0  # one-slot spike in the OFF gap
    es = extract_events(_series(power), 15.0, 2)
    np.testing.assert_array_equal(es.startup_slots, planted)


def test_synthetic_noise_free_event_log_matches_generator():
    spec = planted_spec(3, 2, days=20, seed=5, noise=0.0)
    ds, _, planted = generate(spec)
    for got, want in zip(extract_all(ds, 15.0, 1), planted):
        np.testing.assert_array_equal(got.startups, want.startups)
        np.testing.assert_array_equal(got.shutdowns, want.shutdowns)
        np.testing.assert_array_equal(got.on_mask, want.on_mask)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 120), elements=st.sampled_from([0.0, 5.0, 30.0, 900.0])),
       st.integers(1, 5))
def test_debounce_idempotent(power, min_duration):
    es = extract_events(_series(power), 15.0, min_duration)
    again = extract_events(_series(es.reconstructed_power(100.0)), 15.0, min_duration)
    np.testing.assert_array_equal(es.startups, again.startups)
    np.testing.assert_array_equal(es.shutdowns, again.shutdowns)
    np.testing.assert_array_equal(es.on_mask, again.on_mask)
    np.testing.assert_array_equal(debounce(es.on_mask, min_duration), es.on_mask)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 120), elements=st.sampled_from([0.0, 30.0, 900.0])),
       st.integers(1, 4))
def test_event_stream_invariants(power, min_duration):
    es = extract_events(_series(power), 15.0, min_duration)
    assert np.all(np.diff(es.startups) > 0)
    assert abs(es.startups.size - es.shutdowns.size) <= 1
    bounds = sorted([(t, 1) for t in es.startups] + [(t, 0) for t in es.shutdowns])
    kinds = [k for _, k in bounds]
    assert all(a != b for a, b in zip(kinds, kinds[1:]))
    if kinds:
        assert kinds[0] == 1 or es.on_mask[0]
    for t in es.startups:
        k = t // 60
        assert es.on_mask[k] and (k == 0 or not es.on_mask[k - 1])


# -------------------------------------------------------------- exclusion

def test_exclusion_none_when_all_high():
    # [TRIVIAL] every channel peaks at 1000 W -> nothing excluded
    ds = make_dataset({c: np.full(100, 1000.0) for c in "ABC"})
    kept, rep = exclude_low_power(ds, 50.0)
    assert rep.excluded == [] and rep.retained_count == 3 and kept.ids == ["A", "B", "C"]


def test_exclusion_eighteen_channel_set():
    # [published] an 18-channel household with four sub-50 W channels -> 4 excluded, 14 retained
    codes = ["B1E", "B2E", "BME", "CDE", "CWE", "DNE", "DWE", "FGE", "FRE", "HPE", "OFE", "THE", "TVE", "WOE",
             "EBE", "EQE", "OUE", "UTE"]
    rng = np.random.default_rng(1)
    powers = {c: rng.uniform(0, 30 if c in ("EBE", "EQE", "OUE", "UTE") else 600, 2000) for c in codes}
    kept, rep = exclude_low_power(make_dataset(powers), 50.0)
    assert len(rep.excluded) == 4 and rep.retained_count == 14
    assert rep.retained_count + len(rep.excluded) == 18
    assert sorted(rep.excluded) == ["EBE", "EQE", "OUE", "UTE"]


def test_exclusion_planted_low_power_channels():
    # [DERIVED] generator plants two 10 W channels; exactly those go
    ds, _, _ = generate(planted_spec(3, 3, days=30, seed=2, low_power=2))
    kept, rep = exclude_low_power(ds, 50.0)
    assert sorted(rep.excluded) == ["LP0", "LP1"]
    assert len(kept.ids) == 9


def test_exclusion_ignores_single_spike():
    p = np.full(1000, 10.0)
    p[500] = 5000.0
    ds = make_dataset({"A": p, "B": np.full(1000, 300.0)})
    _, rep = exclude_low_power(ds, 50.0)
    assert rep.excluded == ["A"]


def test_exclusion_everything_is_an_error():
    with pytest.raises(DataError):
        exclude_low_power(make_dataset({"A": np.ones(10), "B": np.ones(10)}), 50.0)
    with pytest.raises(ValueError):
        exclude_low_power(make_dataset({"A": np.ones(10)}), 0.0)


def test_exclusion_report_round_trip():
    r = ExclusionReport(["A"], 50.0, 3, {"A": 1.0})
    assert ExclusionReport.from_dict(r.to_dict()) == r


def test_events_file_round_trip(tmp_path):
    ds, _, _ = generate(planted_spec(2, 2, days=5, seed=9))
    streams = extract_all(ds)
    write_events(streams, tmp_path / "events.csv")
    back = read_events(tmp_path / "events.csv", ds.grid, ds.ids)
    for a, b in zip(streams, back):
        np.testing.assert_array_equal(a.startups, b.startups)
        np.testing.assert_array_equal(a.shutdowns, b.shutdowns)
        np.testing.assert_array_equal(a.on_mask, b.on_mask)
