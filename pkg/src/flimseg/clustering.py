"""Mini-batch K-means and covariance PCA, the two filter-estimation primitives.

All randomness flows from explicit integer seeds; the same seed reproduces
bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KMEANS_BATCH = 256
KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-4
KMEANS_RESTARTS = 10


@dataclass(frozen=True)
class ClusterResult:
    centers: np.ndarray
    assignment: np.ndarray
    inertia: float
    degenerate: bool = False

    @property
    def k(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray
    eigenvalues: np.ndarray


def _sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances, (n, k)."""
    d = (
        np.sum(points ** 2, axis=1)[:, None]
        + np.sum(centers ** 2, axis=1)[None, :]
        - 2.0 * points @ centers.T
    )
    return np.maximum(d, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=points.dtype)
    centers[0] = points[rng.integers(n)]
    closest = _sq_distances(points, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # remaining mass is zero: all points coincide with a center
            centers[j] = points[rng.integers(n)]
            continue
        idx = rng.choice(n, p=closest / total)
        centers[j] = points[idx]
        closest = np.minimum(closest, _sq_distances(points, centers[j : j + 1])[:, 0])
    return centers


def _lloyd_polish(points, centers, max_iter):
    """Full-batch refinement until assignments stabilize."""
    assignment = None
    for _ in range(max_iter):
        d = _sq_distances(points, centers)
        new_assignment = np.argmin(d, axis=1)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(centers.shape[0]):
            members = points[assignment == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # empty cluster: relocate to the point farthest from its center
                far = np.argmax(d[np.arange(len(points)), assignment])
                centers[j] = points[far]
                assignment[far] = j
    d = _sq_distances(points, centers)
    assignment = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(points)), assignment].sum())
    return centers, assignment, inertia


def _single_run(points, k, rng, batch_size, max_iter, tol):
    n = points.shape[0]
    centers = _kmeans_pp_init(points, k, rng)
    counts = np.zeros(k)
    for _ in range(max_iter):
        batch = points[rng.choice(n, size=min(batch_size, n), replace=False)]
        assignment = np.argmin(_sq_distances(batch, centers), axis=1)
        shift = 0.0
        for j in range(k):
            members = batch[assignment == j]
            if not len(members):
                continue
            counts[j] += len(members)
            eta = len(members) / counts[j]
            updated = (1.0 - eta) * centers[j] + eta * members.mean(axis=0)
            shift = max(shift, float(np.linalg.norm(updated - centers[j])))
            centers[j] = updated
        if shift < tol:
            break
    return _lloyd_polish(points, centers, max_iter)


def minibatch_kmeans(
    points,
    k: int,
    seed: int,
    batch_size: int = KMEANS_BATCH,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
    restarts: int = KMEANS_RESTARTS,
) -> ClusterResult:
    """Mini-batch K-means with k-means++ seeding and a full-batch polish.

    Runs `restarts` independent seeded attempts and keeps the lowest-inertia
    one. If the input has fewer than k distinct rows, those rows become the
    centers and the result is flagged degenerate.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    distinct = np.unique(points, axis=0)
    if distinct.shape[0] < k:
        d = _sq_distances(points, distinct)
        assignment = np.argmin(d, axis=1)
        return ClusterResult(
            centers=distinct,
            assignment=assignment,
            inertia=float(d[np.arange(len(points)), assignment].sum()),
            degenerate=True,
        )

    best = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(child)
        centers, assignment, inertia = _single_run(
            points.copy(), k, rng, batch_size, max_iter, tol
        )
        if best is None or inertia < best[2]:
            best = (centers, assignment, inertia)
    centers, assignment, inertia = best
    return ClusterResult(centers=centers, assignment=assignment, inertia=inertia)


def pca_components(points, m: int) -> PcaResult:
    """Top-m eigenvectors of the mean-centered population covariance.

    Components come back orthonormal, sorted by descending eigenvalue, with
    the sign convention that each component's largest-magnitude entry is
    positive.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    n, d = points.shape
    if not 1 <= m <= min(n, d):
        raise ValueError(f"m must satisfy 1 <= m <= min(n, d) = {min(n, d)}, got {m}")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / n
    if not np.any(np.abs(cov) > 1e-12):
        raise ValueError("all input points are identical: covariance is zero")
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:m]
    values = np.maximum(eigenvalues[order], 0.0)
    components = eigenvectors[:, order].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaResult(components=components, eigenvalues=values)
