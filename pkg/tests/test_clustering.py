from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score, silhouette_score

from conftest import make_dataset
from loadassoc.clustering import (
    ClusterAssignment,
    adjusted_rand_index,
    aggregate_cluster_loads,
    canonical_labels,
    check_conservation,
    fixed_k,
    kmeans,
    laplacian,
    read_assignment,
    resolve_attach,
    select_k,
    silhouette,
    spectral_cluster,
    spectral_embedding,
    write_assignment,
)
from loadassoc.data import DataError
from loadassoc.events import ExclusionReport


def block_matrix(sizes, within, across, jitter=0.0, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = labels.size
    q = np.where(labels[:, None] == labels[None, :], within, across).astype(float)
    if jitter:
        noise = rng.uniform(-jitter, jitter, (n, n))
        q = np.clip(q + (noise + noise.T) / 2, 0.0, 1.0)
    np.fill_diagonal(q, 0.0)
    return q, labels


# --------------------------------------------------------------- laplacian

def test_laplacian_two_nodes():
    # [TRIVIAL] Q = [[0,1],[1,0]] -> [[1,-1],[-1,1]]
    np.testing.assert_array_equal(laplacian(np.array([[0.0, 1.0], [1.0, 0.0]])), [[1.0, -1.0], [-1.0, 1.0]])


def test_laplacian_all_isolated():
    # [TRIVIAL] zero matrix -> identity
    np.testing.assert_array_equal(laplacian(np.zeros((4, 4))), np.eye(4))


def test_laplacian_partly_isolated_node():
    q = np.array([[0, 0.5, 0], [0.5, 0, 0], [0, 0, 0]], dtype=float)
    L = laplacian(q)
    np.testing.assert_array_equal(L[2], [0, 0, 1])
    np.testing.assert_array_equal(L[:, 2], [0, 0, 1])


@pytest.mark.parametrize("seed", range(10))
def test_laplacian_spectrum_random(seed):
    # [DERIVED] random symmetric 6x6 Q -> eigenvalues in [0, 2]; checked with a general (non-symmetric) solver
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (6, 6))
    q = np.triu(a, 1) + np.triu(a, 1).T
    vals = np.sort(np.linalg.eigvals(laplacian(q)).real)
    assert vals.min() >= -1e-10 and vals.max() <= 2 + 1e-10
    assert abs(vals[0]) < 1e-10
    _, ours = spectral_embedding(q, 2)
    np.testing.assert_allclose(ours, vals, atol=1e-10)


@pytest.mark.parametrize("sizes", [(3, 3), (2, 4, 3), (2, 2, 2, 2), (5,)])
def test_zero_eigenvalues_count_components(sizes):
    q, labels = block_matrix(sizes, 0.7, 0.0, jitter=0.2, seed=len(sizes))
    q[labels[:, None] != labels[None, :]] = 0.0
    vals = np.linalg.eigvalsh(laplacian(q))
    assert np.sum(np.abs(vals) < 1e-10) == len(sizes)


# ---------------------------------------------------------------- cluster

def test_perfect_two_blocks():
    # [TRIVIAL] within 1, across 0, k=2
    q, truth = block_matrix((3, 4), 1.0, 0.0)
    labels = spectral_cluster(q, 2, seed=0)
    assert adjusted_rand_index(labels, truth) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_planted_four_blocks(seed):
    # [DERIVED] within 0.8, across 0.05 -> ARI 1.0 for every seed
    rng = np.random.default_rng(100 + seed)
    sizes = tuple(int(s) for s in rng.integers(2, 5, 4))
    q, truth = block_matrix(sizes, 0.8, 0.05, jitter=0.05, seed=seed)
    assert adjusted_rand_index(spectral_cluster(q, 4, seed), truth) == 1.0


def test_spectral_cluster_deterministic_and_range():
    q, _ = block_matrix((3, 3, 3), 0.6, 0.1, jitter=0.1, seed=3)
    a = spectral_cluster(q, 3, seed=5)
    b = spectral_cluster(q, 3, seed=5)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        spectral_cluster(q, 1)
    with pytest.raises(ValueError):
        spectral_cluster(q, 10)


def test_embedding_rows_unit_norm():
    q, _ = block_matrix((3, 3), 0.5, 0.1, jitter=0.1, seed=2)
    emb, _ = spectral_embedding(q, 2)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-12)


def test_kmeans_labels_and_inertia():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 0.1, (10, 2)), rng.normal(5, 0.1, (10, 2))])
    labels, inertia = kmeans(x, 2, seed=1)
    assert adjusted_rand_index(labels, np.repeat([0, 1], 10)) == 1.0
    centers = np.stack([x[labels == g].mean(0) for g in range(2)])
    assert inertia == pytest.approx(((x - centers[labels]) ** 2).sum())


def test_canonical_labels_first_appearance():
    np.testing.assert_array_equal(canonical_labels(np.array([2, 2, 0, 1, 0])), [0, 0, 1, 2, 1])


# ------------------------------------------------------- scores vs sklearn

@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 20), st.integers(2, 5))
def test_silhouette_matches_sklearn(seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    labels = rng.integers(0, min(k, n - 1), n)
    if len(np.unique(labels)) < 2:
        labels[0] = 1 - labels[0] if labels[0] < 2 else 0
    got = silhouette(x, labels)
    want = silhouette_score(x, labels) if 2 <= len(np.unique(labels)) < n else 0.0
    assert got == pytest.approx(want, abs=1e-12)
    assert -1.0 <= got <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.integers(0, 10_000))
def test_ari_matches_sklearn(a, seed):
    b = np.random.default_rng(seed).integers(0, 4, len(a))
    assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)
    perm = np.array([3, 0, 4, 1, 2])
    assert adjusted_rand_index(a, perm[np.asarray(a)]) == pytest.approx(1.0)


# ---------------------------------------------------------------- select_k

def test_select_k_two_perfect_blocks():
    # [TRIVIAL] silhouette 1 at k = 2
    q, truth = block_matrix((3, 3), 1.0, 0.0)
    a = select_k(q, seed=0)
    assert a.k == 2
    assert a.silhouette_by_k[2] == pytest.approx(1.0)
    assert adjusted_rand_index(a.labels, truth) == 1.0


@pytest.mark.parametrize("k", [2, 3, 4])
def test_select_k_planted_blocks(k):
    # [DERIVED] planted k chosen in >= 18 of 20 seeds
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 * k + seed)
        sizes = tuple(int(s) for s in rng.integers(2, 5, k))
        q, truth = block_matrix(sizes, 0.7, 0.05, jitter=0.1, seed=seed)
        a = select_k(q, seed=seed)
        hits += a.k == k and adjusted_rand_index(a.labels, truth) == 1.0
    assert hits >= 18


def test_select_k_singleton_appliance():
    # one appliance weakly tied to everyone ends up alone
    q, _ = block_matrix((3, 3, 1), 0.8, 0.0)
    q[6, :6] = q[:6, 6] = 0.02
    a = select_k(q, seed=0)
    assert np.sum(a.labels == a.labels[6]) == 1
    assert a.k == 3


def test_select_k_all_zero_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        a = select_k(np.zeros((4, 4)), seed=0)
    assert a.k == 4 and sorted(a.labels.tolist()) == [0, 1, 2, 3]
    assert caught


def test_select_k_diagnostics():
    q, _ = block_matrix((3, 3, 2), 0.7, 0.05, jitter=0.05, seed=1)
    a = select_k(q, seed=0, ids=list("abcdefgh"))
    assert set(a.silhouette_by_k) == set(range(2, 8))
    assert all(-1 <= v <= 1 for v in a.silhouette_by_k.values())
    assert np.all(np.diff(a.eigenvalues) >= -1e-12)
    assert set(a.eigengaps) == set(range(1, 8))
    assert sorted(set(a.labels.tolist())) == list(range(a.k))
    with pytest.raises(ValueError):
        select_k(q[:2, :2])


def test_assignment_json_round_trip(tmp_path):
    q, _ = block_matrix((2, 3), 0.9, 0.1)
    a = fixed_k(q, 2, seed=0, ids=list("vwxyz"))
    write_assignment(a, tmp_path / "c.json", {"excluded": []})
    back, raw = read_assignment(tmp_path / "c.json")
    np.testing.assert_array_equal(back.labels, a.labels)
    assert back.ids == a.ids and back.k == a.k and raw["excluded"] == []
    assert set(raw["labels"]) == set("vwxyz")


# ------------------------------------------------------------- aggregation

def _assignment(labels, ids):
    labels = np.asarray(labels)
    return ClusterAssignment(int(labels.max()) + 1, labels, list(ids), {}, np.zeros(len(ids)), 0, {})


def test_aggregate_two_in_one_cluster():
    # [TRIVIAL] [1,2] + [3,4] -> [4,6]
    ds = make_dataset({"A": [1.0, 2.0], "B": [3.0, 4.0], "C": [9.0, 9.0]})
    loads = aggregate_cluster_loads(ds, _assignment([0, 0, 1], "ABC"))
    np.testing.assert_array_equal(loads[0].power, [4.0, 6.0])
    np.testing.assert_array_equal(loads[1].power, [9.0, 9.0])
    assert loads[0].name == "A+B"


def test_aggregate_attaches_excluded_channel():
    # excluded channel attached to a configured cluster index is summed into it
    ds = make_dataset({"A": [1.0, 2.0], "B": [3.0, 4.0], "C": [5.0, 5.0], "D": [6.0, 6.0], "LP": [0.5, 0.25]})
    kept = _assignment([0, 1, 2, 3], "ABCD")
    rep = ExclusionReport(["LP"], 50.0, 4, {})
    loads = aggregate_cluster_loads(ds, kept, rep, 3)
    np.testing.assert_array_equal(loads[3].power, [6.5, 6.25])
    assert "LP" in loads[3].name
    with pytest.raises(ValueError):
        aggregate_cluster_loads(ds, kept, rep, 4)
    assert resolve_attach(_assignment([0, 0, 1, 2, 2], "ABCDE"), "smallest") == 1


def test_aggregate_coverage_gap():
    ds = make_dataset({"A": [1.0], "B": [2.0], "C": [3.0]})
    with pytest.raises(DataError):
        aggregate_cluster_loads(ds, _assignment([0, 1], "AB"))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(1, 4))
def test_aggregate_conservation(seed, n, k):
    # [DERIVED] cluster loads add up to the appliance sum
    rng = np.random.default_rng(seed)
    k = min(k, n)
    powers = {f"a{i}": rng.exponential(300, 50) for i in range(n)}
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    loads = aggregate_cluster_loads(make_dataset(powers), _assignment(labels, list(powers)))
    total = np.sum(list(powers.values()), axis=0)
    summed = np.sum([s.power for s in loads], axis=0)
    assert np.abs(summed - total).sum() <= 1e-9 * np.abs(total).sum()


def test_conservation_check_detects_mismatch():
    with pytest.raises(DataError):
        check_conservation(np.array([1.0, 2.0]), [np.array([1.0, 1.0])])
