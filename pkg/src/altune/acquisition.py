"""Uncertainty scoring, batch selection, and clustering-based initialization.

Every scorer follows one contract: higher score means more desirable to
label. Selection is made deterministic by breaking score ties on ascending
sample id.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset

STRATEGIES = ("entropy", "least_confidence", "margin", "bald", "random")


@dataclass
class AcquisitionSpec:
    kind: str = "entropy"
    committee_size: int = 10   # bald only
    dropout_rate: float = 0.1  # bald only

    def validate(self) -> None:
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown acquisition strategy {self.kind!r}")
        if self.kind == "bald":
            if self.committee_size < 2:
                raise ValueError("bald committee needs at least 2 members")
            if not 0.0 < self.dropout_rate <= 0.5:
                raise ValueError("dropout rate must lie in (0, 0.5]")


@dataclass(frozen=True)
class ScoredSample:
    id: str
    score: float


def score_entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats; 0 * log 0 counts as 0."""
    p = np.asarray(probs, dtype=np.float64)
    nonzero = p[p > 0.0]
    return float(-(nonzero * np.log(nonzero)).sum())


def score_least_confidence(probs: np.ndarray) -> float:
    return float(1.0 - np.max(probs))


def score_margin(probs: np.ndarray) -> float:
    """Negated top-2 gap, so that uncertain samples score higher."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size < 2:
        raise ValueError("margin needs at least 2 classes")
    top2 = np.partition(p, p.size - 2)[-2:]
    return float(-(top2[1] - top2[0]))


def _sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def score_committee_bald(
    model,
    sample,
    committee_size: int = 10,
    dropout_rate: float = 0.1,
    seed: int = 0,
) -> float:
    """Mutual-information estimate from a dropout committee.

    Runs committee_size stochastic passes and returns
    H(mean prediction) - mean(H(prediction)); zero when the committee agrees
    exactly. Deterministic for a fixed (seed, sample id).
    """
    if committee_size < 2:
        raise ValueError("committee needs at least 2 members")
    rng = _sample_rng(seed, sample.id)
    votes = np.stack(
        [
            model.predict_proba_dropout(sample.features, dropout_rate, rng)
            for _ in range(committee_size)
        ]
    )
    mean_entropy = float(np.mean([score_entropy(v) for v in votes]))
    return score_entropy(votes.mean(axis=0)) - mean_entropy


def select_top_k(scored: list[ScoredSample], k: int) -> list[str]:
    """Ids of the k best scores, ordered (score desc, id asc).

    Asking for more than the pool returns the whole pool.
    """
    for s in scored:
        if not math.isfinite(s.score):
            raise ValueError(f"non-finite score for sample {s.id!r}")
    ranked = sorted(scored, key=lambda s: (-s.score, s.id))
    return [s.id for s in ranked[: min(k, len(ranked))]]


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray          # (k, d)
    assignments: np.ndarray        # (n,) cluster index per point
    sse: float
    sse_history: list[float] = field(default_factory=list)


def _nearest(points: np.ndarray, centroids: np.ndarray):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    assign = d2.argmin(axis=1)
    return assign, d2


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(-1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(-1))
    return centroids


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding and Euclidean distances.

    Empty clusters adopt the point currently farthest from its centroid, which
    keeps the recorded SSE non-increasing across iterations.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be an (n, d) array")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)
    history: list[float] = []
    for _ in range(max_iters):
        assign, d2 = _nearest(points, centroids)
        used = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(used == 0):
            dist_to_own = d2[np.arange(n), assign]
            far = int(np.argmax(dist_to_own))
            assign[far] = j
            d2[far, :] = np.inf  # keep it from being grabbed twice
            d2[far, j] = 0.0
            used = np.bincount(assign, minlength=k)
        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = points[assign == j].mean(axis=0)
        sse = float(((points - new_centroids[assign]) ** 2).sum())
        history.append(sse)
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(-1)).max())
        centroids = new_centroids
        if shift < tol:
            break
    assign, d2 = _nearest(points, centroids)
    sse = float(d2[np.arange(n), assign].sum())
    return ClusterModel(k, centroids, assign, sse, history)


def elbow_from_sse(sses: list[float]) -> int:
    """k (2..k_max-1) maximizing the second difference of the SSE curve; ties
    go to the smallest k. sses[i] is the SSE for k = i + 1."""
    k_max = len(sses)
    if k_max < 3:
        raise ValueError("elbow needs SSE values for at least k_max = 3")
    best_k, best_score = 2, -math.inf
    for k in range(2, k_max):
        score = (sses[k - 2] - sses[k - 1]) - (sses[k - 1] - sses[k])
        if score > best_score:
            best_k, best_score = k, score
    return best_k


def elbow_choose_k(points: np.ndarray, k_max: int, seed: int = 0) -> int:
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 3 <= k_max <= n:
        raise ValueError(f"k_max must lie in [3, {n}]")
    sses = [kmeans(points, k, seed).sse for k in range(1, k_max + 1)]
    return elbow_from_sse(sses)


def _largest_remainder_quotas(sizes: np.ndarray, m: int) -> np.ndarray:
    """Integer quotas summing to m, proportional to sizes, at least 1 each."""
    n = sizes.sum()
    exact = m * sizes / n
    quotas = np.floor(exact).astype(int)
    remainders = exact - quotas
    shortfall = m - quotas.sum()
    # hand out the leftovers by largest remainder, ties to the lowest cluster
    order = sorted(range(len(sizes)), key=lambda j: (-remainders[j], j))
    for j in order[:shortfall]:
        quotas[j] += 1
    while (quotas == 0).any():
        zero = int(np.flatnonzero(quotas == 0)[0])
        donor = int(max(range(len(quotas)), key=lambda j: (quotas[j], -j)))
        quotas[donor] -= 1
        quotas[zero] += 1
    return quotas


def clustering_init(
    pool: Dataset, fraction: float = 0.01, k_max: int = 8, seed: int = 0
) -> list[str]:
    """Initial labeling batch: per-cluster quotas of the samples nearest to
    the k-means centroids, with k picked by the elbow rule."""
    ids = pool.ids()
    points = pool.feature_matrix()
    n = len(ids)
    if n < 3:
        k = n
    else:
        k = elbow_choose_k(points, min(k_max, n), seed)
    model = kmeans(points, k, seed)
    m = max(k, math.ceil(fraction * n))
    m = min(m, n)
    sizes = np.bincount(model.assignments, minlength=k)
    quotas = _largest_remainder_quotas(sizes, m)
    chosen: list[str] = []
    dist = np.sqrt(
        ((points - model.centroids[model.assignments]) ** 2).sum(-1)
    )
    for j in range(k):
        members = np.flatnonzero(model.assignments == j)
        ranked = sorted(members, key=lambda i: (dist[i], ids[i]))
        chosen.extend(ids[i] for i in ranked[: quotas[j]])
    return sorted(chosen)
