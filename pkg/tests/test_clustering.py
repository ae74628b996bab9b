import numpy as np
import pytest

from flimseg.clustering import minibatch_kmeans, pca_components


def lloyd_oracle(points, k, restarts=40, iters=200, seed=0):
    """Exhaustive multi-restart Lloyd reference, independent implementation."""
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = np.inf
    best_centers = None
    n = len(points)
    for _ in range(restarts):
        centers = points[rng.choice(n, size=k, replace=False)].copy()
        for _ in range(iters):
            d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            assign = d.argmin(axis=1)
            new = centers.copy()
            for j in range(k):
                members = points[assign == j]
                if len(members):
                    new[j] = members.mean(axis=0)
            if np.allclose(new, centers):
                break
            centers = new
        d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        inertia = d.min(axis=1).sum()
        if inertia < best:
            best, best_centers = inertia, centers
    return best_centers, best


def test_two_well_separated_pairs():
    points = np.array([[0, 0], [0.1, 0], [10, 0], [10.1, 0]])
    result = minibatch_kmeans(points, 2, seed=0)
    oracle_centers, oracle_inertia = lloyd_oracle(points, 2)
    got = sorted(result.centers[:, 0])
    want = sorted(oracle_centers[:, 0])
    assert got == pytest.approx(want, abs=1e-9)
    assert got == pytest.approx([0.05, 10.05], abs=1e-9)
    assert result.inertia == pytest.approx(oracle_inertia, rel=1e-9)


def test_k1_is_grand_mean():
    rng = np.random.default_rng(1)
    points = rng.normal(size=(37, 5))
    result = minibatch_kmeans(points, 1, seed=3)
    assert result.centers[0] == pytest.approx(points.mean(axis=0), abs=1e-9)


def test_degenerate_duplicates():
    points = np.ones((3, 4))
    result = minibatch_kmeans(points, 2, seed=0)
    assert result.degenerate
    assert result.k == 1
    assert result.inertia == pytest.approx(0.0)


def test_errors():
    with pytest.raises(ValueError):
        minibatch_kmeans(np.ones((3, 2)), 0, seed=0)
    with pytest.raises(ValueError):
        minibatch_kmeans(np.empty((0, 2)), 1, seed=0)


def test_same_seed_bit_identical():
    rng = np.random.default_rng(2)
    points = rng.normal(size=(50, 6))
    a = minibatch_kmeans(points, 3, seed=11)
    b = minibatch_kmeans(points, 3, seed=11)
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.assignment, b.assignment)
    assert a.inertia == b.inertia


def test_assignment_is_nearest_center():
    rng = np.random.default_rng(4)
    points = rng.normal(size=(40, 3))
    result = minibatch_kmeans(points, 3, seed=5)
    d = ((points[:, None, :] - result.centers[None, :, :]) ** 2).sum(axis=2)
    assert np.array_equal(result.assignment, d.argmin(axis=1))
    assert result.inertia == pytest.approx(d.min(axis=1).sum(), rel=1e-9)


def test_inertia_close_to_oracle_small_instances():
    rng = np.random.default_rng(9)
    for i in range(12):
        n = int(rng.integers(6, 65))
        d = int(rng.integers(1, 9))
        k = int(rng.integers(1, 4))
        points = rng.normal(size=(n, d)) * rng.uniform(0.5, 3)
        result = minibatch_kmeans(points, k, seed=i)
        _, oracle = lloyd_oracle(points, k, seed=i)
        assert result.inertia <= 1.05 * oracle + 1e-12


def test_pca_axis_aligned():
    rng = np.random.default_rng(0)
    points = np.zeros((30, 3))
    points[:, 2] = rng.normal(size=30) * 5
    result = pca_components(points, 1)
    assert result.components[0] == pytest.approx([0, 0, 1], abs=1e-9)


def test_pca_matches_independent_solver():
    rng = np.random.default_rng(1)
    cov = np.diag([4.0, 1.0])
    points = rng.multivariate_normal([0, 0], cov, size=400)
    result = pca_components(points, 1)
    # independent oracle: SVD of the centered data
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    angle = np.degrees(np.arccos(min(1.0, abs(float(np.dot(result.components[0], vt[0]))))))
    assert angle < 5.0
    svd_eigenvalue = (centered @ vt[0]).var()
    assert result.eigenvalues[0] == pytest.approx(svd_eigenvalue, rel=1e-6)


def test_pca_full_rank_orthonormal():
    rng = np.random.default_rng(2)
    points = rng.normal(size=(50, 6))
    result = pca_components(points, 6)
    gram = result.components @ result.components.T
    assert np.abs(gram - np.eye(6)).max() < 1e-5
    assert list(result.eigenvalues) == sorted(result.eigenvalues, reverse=True)
    # full-component reconstruction is lossless
    centered = points - points.mean(axis=0)
    recon = centered @ result.components.T @ result.components
    assert np.abs(recon - centered).max() < 1e-4


def test_pca_sign_convention():
    rng = np.random.default_rng(3)
    points = rng.normal(size=(40, 4))
    result = pca_components(points, 4)
    for row in result.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_pca_errors():
    rng = np.random.default_rng(4)
    points = rng.normal(size=(10, 4))
    with pytest.raises(ValueError, match="m must satisfy"):
        pca_components(points, 5)
    with pytest.raises(ValueError, match="identical"):
        pca_components(np.ones((8, 3)), 1)
