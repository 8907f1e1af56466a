"""Patch extraction, canonical alignment and the inverse mapping of normals."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegeneratePatchError, ValidationError

log = logging.getLogger(__name__)

# relative tolerance for treating covariance eigenvalues as zero
RANK_TOL = 1e-10


@dataclass
class AlignedPatch:
    coords: np.ndarray          # N x 3, canonical frame, row 0 at the origin
    scale: float
    rotation: np.ndarray        # maps query-centred world offsets to canonical axes
    query_world: np.ndarray
    source_indices: np.ndarray
    degenerate: bool = False    # rank-deficient covariance, identity rotation used

    def to_canonical(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate world-frame direction vectors into the canonical frame."""
        return np.asarray(vectors) @ self.rotation.T


class NeighborIndex:
    """Exact k-nearest-neighbour queries with ties broken by lower point index.

    A KD-tree proposes candidates; the final order is a stable sort on
    (distance, index), widening the candidate set when a tie straddles the
    cut-off.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points)

    def query(self, query: int, n: int) -> np.ndarray:
        total = len(self.points)
        if n > total:
            raise ValidationError(
                f"patch size {n} exceeds the {total} points in the cloud; use a smaller patch size")
        q = self.points[query]
        extra = min(total, n + 8)
        while True:
            dist, idx = self.tree.query(q, k=extra)
            dist = np.atleast_1d(dist)
            idx = np.atleast_1d(idx)
            # recompute exactly so equal distances compare equal
            exact = np.sum((self.points[idx] - q) ** 2, axis=1)
            if extra == total or np.partition(exact, n - 1)[n - 1] < exact.max():
                break
            extra = min(total, 2 * extra)
        exact[idx == query] = -1.0
        order = np.lexsort((idx, exact))
        return idx[order[:n]]


def extract_patch(cloud, query: int, n: int, index: NeighborIndex | None = None):
    """Return ``(raw N x 3 patch, source indices)``; row 0 is the query point."""
    points = cloud.points if hasattr(cloud, "points") else np.asarray(cloud)
    if n > len(points):
        raise ValidationError(
            f"patch size {n} exceeds the {len(points)} points in the cloud; use a smaller patch size")
    if index is None:
        d = np.sum((points - points[query]) ** 2, axis=1)
        d[query] = -1.0
        idx = np.lexsort((np.arange(len(points)), d))[:n]
    else:
        idx = index.query(query, n)
    return points[idx], idx


def _orient(basis: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Fix eigenvector signs: positive third moment, then first non-zero component positive."""
    basis = basis.copy()
    proj = x @ basis.T
    cubes = np.sum(proj ** 3, axis=0)
    scale = np.sum(np.abs(proj) ** 3, axis=0)
    for j in range(3):
        if abs(cubes[j]) > 1e-9 * max(scale[j], 1e-300):
            if cubes[j] < 0:
                basis[j] = -basis[j]
        else:
            nz = np.flatnonzero(np.abs(basis[j]) > 1e-12)
            if len(nz) and basis[j, nz[0]] < 0:
                basis[j] = -basis[j]
    if np.linalg.det(basis) < 0:
        basis[2] = -basis[2]
    return basis


def pca_frame(x: np.ndarray):
    """Rotation whose rows are covariance eigenvectors (largest first) of query-centred ``x``."""
    cov = x.T @ x / len(x)
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1]
    basis = evecs[:, ::-1].T
    degenerate = evals[1] <= RANK_TOL * max(evals[0], 1e-300)
    if degenerate:
        return np.eye(3), True
    return _orient(basis, x), False


def align_patch(raw: np.ndarray, source_indices=None) -> AlignedPatch:
    raw = np.asarray(raw, dtype=np.float64)
    query = raw[0].copy()
    x = raw - query
    radius = float(np.sqrt(np.max(np.sum(x ** 2, axis=1))))
    if radius <= 0.0 or not np.isfinite(radius):
        raise DegeneratePatchError("all patch points coincide")
    x = x / radius
    rotation, degenerate = pca_frame(x)
    if degenerate:
        log.warning("rank-deficient patch covariance; using identity rotation")
    coords = x @ rotation.T
    coords[0] = 0.0
    if source_indices is None:
        source_indices = np.arange(len(raw))
    return AlignedPatch(coords, radius, rotation, query, np.asarray(source_indices), degenerate)


def unalign_normal(patch: AlignedPatch, n_hat: np.ndarray) -> np.ndarray:
    """Map canonical-frame normals (3 or K x 3) back to the world frame."""
    out = np.asarray(n_hat, dtype=np.float64) @ patch.rotation
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    """Brute-force k nearest neighbours per row, self excluded, ties to the lower index."""
    coords = np.asarray(coords, dtype=np.float64)
    m = len(coords)
    if k >= m:
        raise ValidationError(f"k={k} must be smaller than the {m} points")
    d = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix (det +1)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
