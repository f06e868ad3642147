"""Spectral clustering of the association graph into appliance clusters."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ApplianceSeries, DataError, HouseholdDataset
from .events import ExclusionReport

log = logging.getLogger(__name__)

N_RESTARTS = 50
MAX_ITER = 300
INERTIA_TOL = 1e-6


@dataclass
class ClusterAssignment:
    k: int
    labels: np.ndarray
    ids: list[str]
    silhouette_by_k: dict[int, float]
    eigenvalues: np.ndarray
    seed: int
    eigengaps: dict[int, float] = field(default_factory=dict)

    def members(self) -> list[list[str]]:
        return [[c for c, lab in zip(self.ids, self.labels) if lab == g] for g in range(self.k)]

    def to_dict(self) -> dict:
        return {
            "k": int(self.k),
            "labels": {c: int(lab) for c, lab in zip(self.ids, self.labels)},
            "order": list(self.ids),
            "silhouette": {str(k): v for k, v in sorted(self.silhouette_by_k.items())},
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "eigengaps": {str(k): v for k, v in sorted(self.eigengaps.items())},
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterAssignment":
        ids = list(d["order"])
        return cls(
            int(d["k"]),
            np.array([d["labels"][c] for c in ids], dtype=np.int64),
            ids,
            {int(k): float(v) for k, v in d["silhouette"].items()},
            np.asarray(d["eigenvalues"], dtype=np.float64),
            int(d["seed"]),
            {int(k): float(v) for k, v in d.get("eigengaps", {}).items()},
        )


def _as_array(q) -> np.ndarray:
    return np.asarray(getattr(q, "q", q), dtype=np.float64)


def laplacian(q) -> np.ndarray:
    """Symmetric normalized Laplacian ``I - D^-1/2 Q D^-1/2``; isolated nodes get identity rows."""
    a = _as_array(q)
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return (lap + lap.T) / 2


def spectral_embedding(q, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized eigenvectors of the ``k`` smallest Laplacian eigenvalues, plus the full spectrum."""
    vals, vecs = np.linalg.eigh(laplacian(q))
    emb = vecs[:, :k].copy()
    norms = np.linalg.norm(emb, axis=1)
    nz = norms > 0
    emb[nz] /= norms[nz, None]
    return emb, vals


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, float]:
    prev = np.inf
    for _ in range(MAX_ITER):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(x.shape[0]), labels].sum())
        for c in range(centers.shape[0]):
            pts = x[labels == c]
            if len(pts):
                centers[c] = pts.mean(axis=0)
        if np.isfinite(prev) and prev - inertia <= INERTIA_TOL * prev:
            break
        prev = inertia
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, float(d2[np.arange(x.shape[0]), labels].sum())


def kmeans(x: np.ndarray, k: int, seed: int, restarts: int = N_RESTARTS) -> tuple[np.ndarray, float]:
    """k-means with k-means++ seeding; best inertia over ``restarts`` (first wins ties)."""
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        labels, inertia = _lloyd(x, _kmeanspp(x, k, rng))
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return best, best_inertia


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters in order of first appearance; empty clusters disappear."""
    mapping: dict[int, int] = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(lab)] for lab in labels], dtype=np.int64)


def spectral_cluster(q, k: int, seed: int = 0) -> np.ndarray:
    a = _as_array(q)
    n = a.shape[0]
    if not 2 <= k <= n:
        raise ValueError(f"k={k} outside [2, {n}]")
    emb, _ = spectral_embedding(a, k)
    labels, _ = kmeans(emb, k, seed)
    return canonical_labels(labels)


def silhouette(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette with Euclidean distance; singleton members score 0."""
    labels = np.asarray(labels)
    groups = np.unique(labels)
    if len(groups) < 2 or len(groups) >= len(labels):
        return 0.0
    dist = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2), 0.0))
    scores = np.zeros(len(labels))
    for i in range(len(labels)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == g].mean() for g in groups if g != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def pairs(v):
        return (v * (v - 1) // 2).sum()

    idx = pairs(table)
    ra = pairs(table.sum(axis=1))
    rb = pairs(table.sum(axis=0))
    total = len(a) * (len(a) - 1) // 2
    expected = ra * rb / total if total else 0.0
    top = (ra + rb) / 2
    if top == expected:
        return 1.0
    return float((idx - expected) / (top - expected))


def select_k(q, seed: int = 0, ids: list[str] | None = None, k_range: tuple[int, int] | None = None
             ) -> ClusterAssignment:
    """Cluster for every k in range and keep the best mean silhouette (smaller k wins ties).

    Eigengaps are reported as an elbow diagnostic only.
    """
    a = _as_array(q)
    n = a.shape[0]
    if ids is None:
        ids = list(getattr(q, "ids", [str(i) for i in range(n)]))
    if n < 3:
        raise ValueError("select_k needs at least 3 appliances")
    vals = np.linalg.eigvalsh(laplacian(a))
    gaps = {k: float(vals[k] - vals[k - 1]) for k in range(1, n)}
    if not np.any(a > 0):
        warnings.warn("association matrix is all zero; every appliance is its own cluster")
        return ClusterAssignment(n, np.arange(n), ids, {}, vals, seed, gaps)
    lo, hi = k_range or (2, n - 1)
    scores: dict[int, float] = {}
    fits: dict[int, np.ndarray] = {}
    for k in range(lo, hi + 1):
        emb, _ = spectral_embedding(a, k)
        labels, _ = kmeans(emb, k, seed)
        fits[k] = canonical_labels(labels)
        scores[k] = silhouette(emb, fits[k])
    best = max(scores, key=lambda k: (scores[k], -k))
    labels = fits[best]
    return ClusterAssignment(int(labels.max()) + 1, labels, ids, scores, vals, seed, gaps)


def fixed_k(q, k: int, seed: int = 0, ids: list[str] | None = None) -> ClusterAssignment:
    a = _as_array(q)
    if ids is None:
        ids = list(getattr(q, "ids", [str(i) for i in range(a.shape[0])]))
    labels = spectral_cluster(a, k, seed)
    emb, vals = spectral_embedding(a, k)
    gaps = {j: float(vals[j] - vals[j - 1]) for j in range(1, a.shape[0])}
    return ClusterAssignment(int(labels.max()) + 1, labels, ids, {k: silhouette(emb, labels)}, vals, seed, gaps)


def resolve_attach(assignment: ClusterAssignment, attach: int | str) -> int:
    """Cluster index for re-attached low-power channels: an index, or ``"smallest"``."""
    if attach == "smallest":
        sizes = np.bincount(assignment.labels, minlength=assignment.k)
        return int(np.argmin(sizes))
    idx = int(attach)
    if not 0 <= idx < assignment.k:
        raise ValueError(f"attach target {idx} outside [0, {assignment.k})")
    return idx


def cluster_membership(assignment: ClusterAssignment, excluded: ExclusionReport | None,
                       attach: int | str = "smallest") -> list[list[str]]:
    members = assignment.members()
    if excluded and excluded.excluded:
        members[resolve_attach(assignment, attach)] += list(excluded.excluded)
    return members


def aggregate_cluster_loads(dataset: HouseholdDataset, assignment: ClusterAssignment,
                            excluded: ExclusionReport | None = None, attach: int | str = "smallest"
                            ) -> list[ApplianceSeries]:
    """Per-cluster load = sum of member channels, with excluded channels attached to one cluster."""
    members = cluster_membership(assignment, excluded, attach)
    covered = [c for m in members for c in m]
    missing = set(dataset.ids) - set(covered)
    if missing:
        raise DataError(f"appliances in no cluster: {sorted(missing)}")
    out = []
    for g, chans in enumerate(members):
        power = np.zeros(dataset.grid.count)
        for c in chans:
            power = power + dataset.appliance(c).power
        out.append(ApplianceSeries(f"cluster-{g}", power, dataset.grid, "+".join(chans)))
    check_conservation(dataset.submetered_sum(), [s.power for s in out])
    return out


def check_conservation(total: np.ndarray, parts: list[np.ndarray], rtol: float = 1e-9) -> None:
    summed = np.sum(parts, axis=0)
    scale = max(float(np.abs(total).sum()), 1e-300)
    err = float(np.abs(summed - total).sum()) / scale
    if err > rtol:
        raise DataError(f"cluster loads do not sum to the appliance total (relative error {err:.3e})")


def write_assignment(assignment: ClusterAssignment, path: str | Path, extra: dict | None = None) -> None:
    d = assignment.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_assignment(path: str | Path) -> tuple[ClusterAssignment, dict]:
    d = json.loads(Path(path).read_text())
    return ClusterAssignment.from_dict(d), d
