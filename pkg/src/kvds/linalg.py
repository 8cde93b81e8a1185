"""Dense numerics shared by every other module.

Vectors and matrices are plain numpy arrays (float64 in memory; the file
formats narrow to float32 on disk). All randomized fits take an explicit
integer seed and are deterministic given (input order, seed).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; 0 (with a warning) if either norm is 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of a zero-norm vector, returning 0", stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class PcaModel:
    """Mean-centering + orthonormal projection fitted by `pca_fit`.

    components has shape (out_dim, in_dim); rows are orthonormal principal
    axes, ordered by descending explained variance.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.components.shape[1]

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(data: np.ndarray, out_dim: int) -> PcaModel:
    """Fit PCA by eigendecomposition of the sample covariance (no whitening).

    Deterministic given input order: eigenvalues sorted descending and each
    component's sign fixed so its first nonzero coordinate is positive.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be a 2-D array of row vectors")
    n, d = data.shape
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite values")
    if out_dim < 1 or out_dim > d:
        raise ValueError(f"out_dim {out_dim} outside [1, {d}]")
    if n < out_dim:
        raise ValueError(f"need at least {out_dim} samples, got {n}")

    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order][:out_dim], 0.0, None)
    components = eigvecs[:, order][:, :out_dim].T.copy()

    # Sign convention: first nonzero coordinate of each row made positive.
    for row in components:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0

    return PcaModel(mean=mean, components=components, explained_variance=eigvals)


def pca_apply(model: PcaModel, v: np.ndarray) -> np.ndarray:
    """Project a vector (or a batch of row vectors) into PCA space."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.in_dim:
        raise ValueError(f"dim mismatch: {v.shape[-1]} vs model in_dim {model.in_dim}")
    return (v - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, y: np.ndarray) -> np.ndarray:
    """Map projected coordinates back to the input space."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != model.out_dim:
        raise ValueError(f"dim mismatch: {y.shape[-1]} vs model out_dim {model.out_dim}")
    return y @ model.components + model.mean


def _sq_dists(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared L2 distances, shape (n_points, n_centroids)."""
    d2 = (
        np.sum(data * data, axis=1)[:, None]
        + np.sum(centroids * centroids, axis=1)[None, :]
        - 2.0 * data @ centroids.T
    )
    return np.clip(d2, 0.0, None)


def _kmeans_pp_init(data: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((n_clusters, data.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = data[first]
    closest = np.sum((data - centroids[0]) ** 2, axis=1)
    for i in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            probs = closest / total
            idx = int(rng.choice(n, p=probs))
        else:
            # All remaining points coincide with chosen centroids.
            idx = int(rng.integers(n))
        centroids[i] = data[idx]
        closest = np.minimum(closest, np.sum((data - centroids[i]) ** 2, axis=1))
    return centroids


def kmeans(
    data: np.ndarray,
    n_clusters: int,
    seed: int,
    max_iters: int = 25,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means with k-means++ init from a seeded PRNG.

    Runs until the assignment fixpoint or ``max_iters``. Empty clusters are
    re-seeded with the point currently farthest from its centroid. Returns
    (centroids, assignments).
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be a 2-D array of row vectors")
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite values")
    n = data.shape[0]
    if n_clusters < 1 or n_clusters > n:
        raise ValueError(f"n_clusters {n_clusters} outside [1, {n}]")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(data, n_clusters, rng)
    assignments = np.full(n, -1, dtype=np.int64)

    for _ in range(max_iters):
        dists = _sq_dists(data, centroids)
        new_assignments = np.argmin(dists, axis=1)
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments

        point_dist = dists[np.arange(n), assignments].copy()
        for c in range(n_clusters):
            mask = assignments == c
            if mask.any():
                centroids[c] = data[mask].mean(axis=0)
            else:
                far = int(np.argmax(point_dist))
                centroids[c] = data[far]
                assignments[far] = c
                point_dist[far] = 0.0

    # Final assignment against the returned centroids.
    assignments = np.argmin(_sq_dists(data, centroids), axis=1)
    return centroids, assignments


def kmeans_distortion(data: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    """Total squared distance of points to their assigned centroids."""
    data = np.asarray(data, dtype=np.float64)
    diffs = data - centroids[assignments]
    return float(np.sum(diffs * diffs))
