from __future__ import annotations

import numpy as np
import pytest

from loadassoc.association import AssociationConfig, association_matrix
from loadassoc.clustering import adjusted_rand_index, fixed_k
from loadassoc.events import extract_all
from loadassoc.synthetic import (
    ApplianceSpec,
    ClusterSpec,
    SynthSpec,
    daily_pattern,
    forecast_spec,
    generate,
    planted_spec,
    separated_spec,
)


def test_fixed_seed_is_bit_identical():
    # [TRIVIAL] determinism contract
    a, la, ea = generate(planted_spec(3, 2, days=20, seed=12, low_power=1))
    b, lb, eb = generate(planted_spec(3, 2, days=20, seed=12, low_power=1))
    for x, y in zip(a.appliances, b.appliances):
        assert x.power.tobytes() == y.power.tobytes()
    assert a.total.power.tobytes() == b.total.power.tobytes()
    assert a.weather.as_matrix().tobytes() == b.weather.as_matrix().tobytes()
    np.testing.assert_array_equal(la, lb)
    for x, y in zip(ea, eb):
        np.testing.assert_array_equal(x.startups, y.startups)


def test_different_seeds_differ():
    a, _, _ = generate(planted_spec(2, 2, days=10, seed=1))
    b, _, _ = generate(planted_spec(2, 2, days=10, seed=2))
    assert a.appliances[0].power.tobytes() != b.appliances[0].power.tobytes()


def test_dataset_shape_and_labels():
    ds, labels, streams = generate(planted_spec(3, 2, days=14, seed=0, low_power=2))
    assert ds.days == 14 and ds.grid.count == 14 * 1440 and ds.day_aligned
    assert ds.ids == ["C0A0", "C0A1", "C1A0", "C1A1", "C2A0", "C2A1", "LP0", "LP1"]
    np.testing.assert_array_equal(labels, [0, 0, 1, 1, 2, 2, 0, 1])
    assert [s.appliance_id for s in streams] == ds.ids
    assert np.all(ds.total.power >= ds.submetered_sum() - 1e-9)
    assert ds.date_of_day(0).isoformat() == "2012-04-01"


def test_full_coactivation_gives_maximal_within_cluster_q():
    # [TRIVIAL] co-activation 1.0, noise 0 -> cluster-mates hold the largest entries
    spec = planted_spec(3, 3, days=40, seed=5, coactivation=1.0, noise=0.0)
    ds, labels, _ = generate(spec)
    q = association_matrix(extract_all(ds), AssociationConfig(), ds.days).q
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    assert q[same & off].min() > q[~same].max()


@pytest.mark.parametrize("seed", range(5))
def test_planted_labels_recovered_at_60_days(seed):
    # [DERIVED] 0.8 within, 0 across, 60 days -> ARI 1.0
    ds, labels, _ = generate(planted_spec(3, 3, days=60, seed=seed, coactivation=0.8))
    am = association_matrix(extract_all(ds), AssociationConfig(), ds.days)
    assert adjusted_rand_index(fixed_k(am.q, 3, seed=7).labels, labels) == 1.0


def test_startup_rate_within_three_sigma():
    # empirical start-ups/day against the Poisson mean over a long span
    days = 2000
    spec = SynthSpec(
        [ApplianceSpec("A", 500.0, 0, solo_per_day=0.5, duration_min=(1.0, 1.0)),
         ApplianceSpec("B", 800.0, 0, solo_per_day=1.5, duration_min=(1.0, 1.0))],
        [ClusterSpec(activity_per_day=1.0)], coactivation=0.5, days=days, noise=0.0, seed=21, step=300,
        min_gap_slots=1)
    _, _, streams = generate(spec)
    for s, solo in zip(streams, (0.5, 1.5)):
        mean = solo + 0.5 * 1.0
        expected = mean * days
        assert abs(s.startups.size - expected) <= 3 * np.sqrt(expected)


def test_spec_validation():
    with pytest.raises(ValueError):
        planted_spec(coactivation=1.5)
    with pytest.raises(ValueError):
        SynthSpec([ApplianceSpec("A", 0.0, 0)], [ClusterSpec()])
    with pytest.raises(ValueError):
        SynthSpec([ApplianceSpec("A", 10.0, 3)], [ClusterSpec()])
    with pytest.raises(ValueError):
        SynthSpec([ApplianceSpec("A", 10.0, 0)], [ClusterSpec()], days=0)


def test_spec_json_round_trip(tmp_path):
    import json
    spec = planted_spec(2, 3, days=9, seed=4, low_power=1)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert SynthSpec.load(path) == spec


def test_daily_pattern_is_noise_free_template():
    load, dow = daily_pattern(21, seed=3)
    assert load.shape == (21, 12)
    for d in range(7, 21):
        np.testing.assert_array_equal(load[d], load[d - 7])
        assert dow[d] == dow[d - 7]
    ratio = load / load[0]
    assert np.allclose(ratio, ratio[:, :1])


def test_forecast_spec_has_distinct_groups():
    spec = forecast_spec(seed=0, days=30)
    ds, labels, _ = generate(spec)
    assert len(spec.clusters) == 3 and ds.days == 30
    assert sorted(set(labels.tolist())) == [0, 1, 2]
    assert [a.id for a in spec.appliances if a.power < 50] == ["LP0", "LP1"]


def test_separated_spec_blocks():
    spec = separated_spec(4, 2, days=5)
    hours = [int(np.argmax(c.hourly_template)) for c in spec.clusters]
    assert hours == [7, 13, 19, 1]
    with pytest.raises(ValueError):
        separated_spec(5)
