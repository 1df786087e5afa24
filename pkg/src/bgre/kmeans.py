"""Lloyd's k-means with farthest-first seeding, and silhouette-based k selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidK
from .rng import make_rng


@dataclass
class KmeansResult:
    centroids: np.ndarray   # k x d
    assignment: np.ndarray  # N, 0-based
    inertia: float
    k_selected: int
    n_iter: int = 0
    history: tuple = ()     # inertia after each assignment step


def _sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _inertia(points, centroids, assignment) -> float:
    r = points - centroids[assignment]
    return float(np.sum(r * r))


def farthest_first(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of k seeds: a random start, then repeatedly the point farthest
    from the chosen set (lowest index on ties)."""
    chosen = [int(rng.integers(points.shape[0]))]
    d = _sq_dist(points, points[chosen])[:, 0]
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, _sq_dist(points, points[[nxt]])[:, 0])
    return np.asarray(chosen)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300) -> KmeansResult:
    """Lloyd iterations from farthest-first seeds until assignments stop changing.

    A cluster that loses all its points is re-seeded with the point farthest
    from its current centroid, so every returned cluster is nonempty.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if not 1 <= k <= n:
        raise InvalidK(f"k must satisfy 1 <= k <= N={n}, got {k}")
    rng = make_rng(seed)
    centroids = x[farthest_first(x, k, rng)].copy()
    assignment = np.full(n, -1)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        dist = _sq_dist(x, centroids)
        new = np.argmin(dist, axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.nonzero(counts == 0)[0]:
            far = np.argmax(dist[np.arange(n), new])
            donor = new[far]
            if counts[donor] <= 1:
                continue
            counts[donor] -= 1
            new[far] = c
            counts[c] = 1
            dist[far] = 0.0
        history.append(_inertia(x, centroids, new))
        if np.array_equal(new, assignment):
            break
        assignment = new
        centroids = np.vstack([x[assignment == c].mean(axis=0) for c in range(k)])
    return KmeansResult(centroids=centroids, assignment=assignment,
                        inertia=_inertia(x, centroids, assignment), k_selected=k,
                        n_iter=it, history=tuple(history))


def silhouette_values(points, assignment) -> np.ndarray:
    """Per-point silhouette (b - a) / max(a, b); 0 for singleton clusters."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    lab = np.asarray(assignment)
    d = np.sqrt(np.maximum(_sq_dist(x, x), 0.0))
    labels = np.unique(lab)
    onehot = (lab[:, None] == labels[None, :]).astype(float)
    sizes = onehot.sum(axis=0)
    sums = d @ onehot
    own = np.searchsorted(labels, lab)
    n = x.shape[0]
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(n), own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own_size > 1, s, 0.0)


def silhouette_select(points, k_range=range(2, 11), seed: int = 0, max_iter: int = 300):
    """k in ``k_range`` maximising the mean silhouette; ties go to the smaller k.

    Returns ``(k_selected, KmeansResult)``.
    """
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 2 or ks[-1] > n - 1:
        raise InvalidK(f"k_range must lie within [2, N-1] = [2, {n - 1}]")
    if len(ks) == 1:
        return ks[0], kmeans(x, ks[0], seed, max_iter)
    best_k, best_score, best_fit = None, -np.inf, None
    for k in ks:
        fit = kmeans(x, k, seed, max_iter)
        score = float(np.mean(silhouette_values(x, fit.assignment)))
        if score > best_score:
            best_k, best_score, best_fit = k, score, fit
    return best_k, best_fit
