from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_matrix, brute_force_pair
from loadassoc.association import (
    AssociationConfig,
    association_entry,
    association_matrix,
    count_pair,
    match_startups,
    read_matrix,
    write_matrix,
)
from loadassoc.data import TimeGrid
from loadassoc.events import EventStream, extract_all
from loadassoc.synthetic import generate, planted_spec

DAY = 86400


def _stream(code, startups, grid):
    s = np.asarray(sorted(startups), dtype=np.int64)
    return EventStream(code, s, np.zeros(0, dtype=np.int64), np.zeros(grid.count, dtype=bool), grid)


def _grid(days=1):
    return TimeGrid(0, 60, days * 1440)


def test_single_pair_inside_both_windows():
    # [TRIVIAL] {100} vs {200}, Te 300, Ts 3600 -> N^e = N^s = 1
    g = _grid()
    ne, ns, nd = count_pair(_stream("a", [100], g), _stream("b", [200], g), AssociationConfig(300, 3600))
    assert (ne, ns, nd) == (1, 1, 1)


def test_empty_partner():
    # [TRIVIAL] {100} vs {} -> all zero
    g = _grid()
    assert count_pair(_stream("a", [100], g), _stream("b", [], g), AssociationConfig(300, 3600)) == (0, 0, 0)


def test_entry_arithmetic():
    # [TRIVIAL] 1/2 * 10/20 = 0.25
    assert association_entry(1, 2, 10, 20) == 0.25
    assert association_entry(0, 0, 0, 20) == 0.0


def test_never_co_active_same_day():
    # [TRIVIAL] start-ups on disjoint days -> N^d_pair = 0 -> q = 0
    g = _grid(4)
    a = _stream("a", [100, 2 * DAY + 100], g)
    b = _stream("b", [DAY + 100, 3 * DAY + 100], g)
    am = association_matrix([a, b], AssociationConfig(1800, DAY), 4)
    assert am.q[0, 1] == 0.0 and am.n_d[0, 1] == 0
    assert am.n_s[0, 1] > 0


def test_one_to_one_matching():
    # one start-up of b cannot pair with several of a
    g = _grid()
    ne, ns, _ = count_pair(_stream("a", [1000, 1010, 1020], g), _stream("b", [1005], g), AssociationConfig(60, 3600))
    assert (ne, ns) == (1, 1)


def test_tie_rule_equal_distances():
    # all three admissible pairs have |dt| = 100; the earlier pair goes first
    # and leaves (1200, 1100) for the second start-up
    g = _grid()
    ne, ns, _ = count_pair(_stream("a", [1000, 1200], g), _stream("b", [900, 1100], g), AssociationConfig(150, 3600))
    assert (ne, ns) == (2, 2)
    assert brute_force_pair([1000, 1200], [900, 1100], 150, 3600, 0)[:2] == (2, 2)


def test_candidate_window_limits_pairs():
    g = _grid(2)
    ne, ns, _ = count_pair(_stream("a", [0], g), _stream("b", [5000], g), AssociationConfig(1800, 3600))
    assert (ne, ns) == (0, 0)


def test_config_and_input_errors():
    with pytest.raises(ValueError):
        AssociationConfig(3600, 3600)
    with pytest.raises(ValueError):
        AssociationConfig(0, 3600)
    g = _grid()
    with pytest.raises(ValueError):
        count_pair(_stream("a", [1], g), _stream("b", [1], TimeGrid(60, 60, 1440)), AssociationConfig())
    with pytest.raises(ValueError):
        association_matrix([_stream("a", [1], g), _stream("b", [1], g)], AssociationConfig(), 0)
    with pytest.raises(ValueError):
        association_matrix([_stream("a", [1], g)], AssociationConfig(), 1)


def _planted_streams(seed, n_clusters=2, per=2, days=30, co=0.7):
    ds, _, _ = generate(planted_spec(n_clusters, per, days=days, seed=seed, coactivation=co))
    return ds, extract_all(ds)


def test_counters_match_brute_force_planted_30_days():
    # [DERIVED] 30-day planted household, co-activation 0.7 -> counters equal the oracle exactly
    ds, streams = _planted_streams(11, days=30, co=0.7)
    cfg = AssociationConfig(1800, DAY)
    for i in range(len(streams)):
        for j in range(len(streams)):
            if i != j:
                got = count_pair(streams[i], streams[j], cfg)
                want = brute_force_pair(streams[i].startups, streams[j].startups, 1800, DAY, ds.grid.start)
                assert got == want


def test_three_appliance_matrix_equals_oracle():
    # [DERIVED] 3-appliance household -> matrix equals the oracle entrywise, exactly
    ds, _, _ = generate(planted_spec(1, 3, days=20, seed=4))
    streams = extract_all(ds)
    am = association_matrix(streams, AssociationConfig(), ds.days)
    q, ne, ns, nd = brute_force_matrix([s.startups for s in streams], 1800, DAY, ds.days, ds.grid.start)
    assert am.q.tobytes() == q.tobytes()
    np.testing.assert_array_equal(am.n_e, ne)
    np.testing.assert_array_equal(am.n_s, ns)
    np.testing.assert_array_equal(am.n_d, nd)


def test_match_startups_returns_matched_distances():
    dts = match_startups(np.array([0, 500]), np.array([100, 450, 5000]), 1000)
    np.testing.assert_array_equal(np.sort(dts), [50, 100])


@st.composite
def stream_sets(draw):
    n = draw(st.integers(2, 5))
    days = draw(st.integers(1, 4))
    span = days * DAY
    # a coarse time lattice makes |dt| ties frequent
    times = st.lists(st.integers(0, span // 300 - 1).map(lambda k: 300 * k), max_size=25, unique=True)
    return days, [draw(times) for _ in range(n)]


@settings(max_examples=150, deadline=None)
@given(stream_sets())
def test_matrix_invariants_and_oracle(data):
    days, raw = data
    g = _grid(days)
    streams = [_stream(f"a{i}", s, g) for i, s in enumerate(raw)]
    prev = None
    for te in (300, 900, 1800, 3600):
        am = association_matrix(streams, AssociationConfig(te, DAY), days)
        assert np.all(np.diag(am.q) == 0)
        assert np.all((am.q >= 0) & (am.q <= 1))
        assert np.array_equal(am.q, am.q.T)
        assert np.all(am.q[am.n_s == 0] == 0)
        if prev is not None:
            assert np.all(am.q >= prev)
        prev = am.q
    q, ne, ns, nd = brute_force_matrix(raw, 3600, DAY, days, 0)
    assert am.q.tobytes() == q.tobytes()
    np.testing.assert_array_equal(am.n_s, ns)


def test_matrix_determinism():
    _, streams = _planted_streams(3)
    a = association_matrix(streams, AssociationConfig(), 30)
    b = association_matrix(streams, AssociationConfig(), 30)
    assert a.q.tobytes() == b.q.tobytes()


def test_matrix_file_round_trip(tmp_path):
    ds, streams = _planted_streams(6)
    am = association_matrix(streams, AssociationConfig(), ds.days)
    write_matrix(am, tmp_path / "q.csv")
    assert (tmp_path / "q_counters.csv").exists()
    header = (tmp_path / "q.csv").read_text().splitlines()[0].split(",")
    assert header[1:] == am.ids
    back = read_matrix(tmp_path / "q.csv")
    assert back.ids == am.ids and back.n_days == am.n_days
    assert back.q.tobytes() == am.q.tobytes()
    np.testing.assert_array_equal(back.n_e, am.n_e)
