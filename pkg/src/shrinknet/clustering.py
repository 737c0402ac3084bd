"""K-Means: D2-weighted seeding plus Lloyd refinement.

Clustering partitions a cloud into regions for the graph convolution; it
runs outside the gradient tape and its output is treated as a forward-pass
constant. Determinism: every random draw comes from the caller's generator,
distance ties resolve to the lowest region id, and empty regions are
repaired by re-seeding on the point farthest from its current centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class ClusterAssignment:
    labels: np.ndarray        # (N,) int64, values in [0, n_regions)
    centroids: np.ndarray     # (n_regions, d)
    n_regions: int

    def regions(self) -> list[np.ndarray]:
        """Member indices per region, each in ascending point order."""
        return [np.flatnonzero(self.labels == k) for k in range(self.n_regions)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_regions)


@dataclass
class LloydReport:
    iterations: int
    inertia: float
    history: list[float]      # inertia after each assignment pass


def _check_cloud(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ConfigError(f"expected a non-empty (N, d) cloud, got shape {points.shape}")
    return points


def kmeanspp_seed(points, k: int, rng) -> np.ndarray:
    """Choose k starting centroids: first uniform, the rest proportional to
    squared distance from the nearest centroid chosen so far."""
    points = _check_cloud(points)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"need 1 <= k <= {n} clusters, got k={k}")
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(k - 1):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centroid already
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def _assign(points, centroids):
    """Nearest centroid per point; ties go to the lowest region id."""
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def _repair_empty(points, centroids, labels, point_d2):
    """Re-seed empty regions on far points so every region stays populated."""
    k = centroids.shape[0]
    counts = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        donors = np.flatnonzero(counts[labels] >= 2)
        if donors.size == 0:  # unreachable when k <= n, kept as a guard
            donors = np.arange(points.shape[0])
        far = donors[np.argmax(point_d2[donors])]
        counts[labels[far]] -= 1
        labels[far] = empty
        counts[empty] = 1
        centroids[empty] = points[far]
        point_d2[far] = 0.0
    return centroids, labels, point_d2


def lloyd(points, centroids, max_iter: int = 25, tol: float = 1e-6):
    """Refine centroids until inertia improves by less than `tol`, the
    centroids stop moving, or `max_iter` update rounds have run.

    max_iter=0 keeps the seeds and only assigns points to them.
    Returns (ClusterAssignment, LloydReport); the inertia history has one
    entry per assignment pass and never increases.
    """
    points = _check_cloud(points)
    centroids = np.array(centroids, dtype=np.float64, copy=True)
    k = centroids.shape[0]
    if k < 1 or k > points.shape[0]:
        raise ConfigError(f"need 1 <= k <= {points.shape[0]} centroids, got {k}")
    if centroids.shape[1] != points.shape[1]:
        raise ConfigError("centroid dimension does not match the cloud")

    labels, d2 = _assign(points, centroids)
    centroids, labels, d2 = _repair_empty(points, centroids, labels, d2)
    inertia = float(d2.sum())
    history = [inertia]
    iterations = 1

    for _ in range(max_iter):
        means = np.zeros_like(centroids)
        np.add.at(means, labels, points)
        means /= np.bincount(labels, minlength=k)[:, None]
        if np.array_equal(means, centroids):
            break
        centroids = means
        labels, d2 = _assign(points, centroids)
        centroids, labels, d2 = _repair_empty(points, centroids, labels, d2)
        new_inertia = float(d2.sum())
        history.append(new_inertia)
        iterations += 1
        if inertia - new_inertia < tol:
            inertia = new_inertia
            break
        inertia = new_inertia

    assignment = ClusterAssignment(labels=labels.astype(np.int64),
                                   centroids=centroids, n_regions=k)
    return assignment, LloydReport(iterations=iterations,
                                   inertia=history[-1], history=history)


def cluster_points(points, k: int, rng, max_iter: int = 25, tol: float = 1e-6):
    """Seed then refine; the one-call form used by the network."""
    seeds = kmeanspp_seed(points, k, rng)
    return lloyd(points, seeds, max_iter=max_iter, tol=tol)
