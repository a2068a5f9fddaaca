"""k-means on matched parameters and count-weighted non-maximum suppression."""

from __future__ import annotations

import numpy as np


class EmptyClusteringError(ValueError):
    """No voxel qualified for clustering (typically the density floor is too high)."""


def _sq_dist(points, centers):
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans_plus_plus(points, K, rng):
    """k-means++ seeding; stops early once every point coincides with a center."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dist(points, points[chosen]).min(axis=1)
    while len(chosen) < K:
        total = d2.sum()
        if total <= 0:
            break
        # inverse-CDF draw keeps the choice reproducible across platforms
        pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        pick = min(pick, n - 1)
        chosen.append(pick)
        d2 = np.minimum(d2, ((points - points[pick]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(points, K: int, seed, max_iter: int = 100):
    """Lloyd's algorithm from k-means++ seeds.

    Parameters
    ----------
    points : ndarray, shape (n, P)
    K : int
        Maximum number of clusters.
    seed : int or numpy SeedSequence
    max_iter : int

    Returns
    -------
    centers : ndarray, shape (K', P)
        ``K' <= K``; clusters that end up empty are dropped.
    counts : ndarray of int, shape (K',)
    labels : ndarray of int, shape (n,)
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0:
        raise EmptyClusteringError("no points to cluster")
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(points, K, rng)
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sq_dist(points, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        used = np.unique(labels)
        centers = np.array([points[labels == k].mean(axis=0) for k in used])
        labels = np.searchsorted(used, labels)
    counts = np.bincount(labels, minlength=centers.shape[0])
    keep = counts > 0
    if not np.all(keep):
        remap = np.cumsum(keep) - 1
        centers, counts, labels = centers[keep], counts[keep], remap[labels]
    return centers, counts, labels


def kmeans_objective(points, centers, labels):
    return float(((points - centers[labels]) ** 2).sum())


def are_neighbours(a, b, upsilon: float) -> bool:
    """``b`` lies in the relative neighbourhood of ``a``: |b_p - a_p| < upsilon * a_p for all p."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.all(np.abs(b - a) < upsilon * a))


def neighbour_matrix(params, upsilon: float) -> np.ndarray:
    """Symmetric neighbour relation: i ~ j if either lies in the other's neighbourhood."""
    p = np.asarray(params, dtype=float)
    diff = np.abs(p[:, None, :] - p[None, :, :])
    one_way = np.all(diff < upsilon * p[:, None, :], axis=2)
    rel = one_way | one_way.T
    np.fill_diagonal(rel, False)
    return rel


def non_maximum_suppression(centers, counts, upsilon: float, kappa: float):
    """Keep well-supported, mutually distant cluster centers.

    Repeatedly take the center with the largest remaining count, add the
    counts of its neighbours, keep it if the merged count reaches ``kappa``,
    then zero it and its neighbours.

    Returns
    -------
    kept : ndarray, shape (T, P)
    merged_counts : ndarray, shape (T,)
        Merged count of each kept center (all ``>= kappa``).
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    c = np.asarray(counts, dtype=float).copy()
    if c.shape[0] != centers.shape[0]:
        raise ValueError("centers and counts are not aligned")
    nb = neighbour_matrix(centers, upsilon)
    kept, merged_counts = [], []
    while np.any(c > 0):
        d = int(np.argmax(c))
        group = nb[d] & (c > 0)
        merged = c[d] + c[group].sum()
        if merged >= kappa:
            kept.append(centers[d])
            merged_counts.append(merged)
        c[d] = 0.0
        c[group] = 0.0
    if not kept:
        return np.empty((0, centers.shape[1])), np.empty(0)
    return np.array(kept), np.array(merged_counts)
