"""PCA plane fitting and n-jet height-function fitting.

Both serve as baselines and as independent oracles for the learned model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePatchError


def jet_terms(order: int) -> list[tuple[int, int]]:
    """Monomial exponents ``(i, j)`` for ``x**i * y**j``, by total degree then ``i``."""
    return [(i, deg - i) for deg in range(order + 1) for i in range(deg + 1)]


@dataclass
class JetCoefficients:
    order: int
    alpha: np.ndarray
    residual: float = 0.0
    ill_conditioned: bool = False

    def __post_init__(self):
        expected = (self.order + 1) * (self.order + 2) // 2
        if len(self.alpha) != expected:
            raise ValueError(f"order {self.order} jet needs {expected} coefficients, got {len(self.alpha)}")

    def __getitem__(self, ij: tuple[int, int]) -> float:
        return float(self.alpha[jet_terms(self.order).index(tuple(ij))])

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return sum(a * x ** i * y ** j for a, (i, j) in zip(self.alpha, jet_terms(self.order)))


def pca_normal(patch: np.ndarray) -> np.ndarray:
    """Smallest-variance direction of the centred patch, oriented to z >= 0."""
    patch = np.asarray(patch, dtype=np.float64)
    if len(patch) < 3:
        raise DegeneratePatchError("PCA normal needs at least 3 points")
    x = patch - patch.mean(axis=0)
    evals, evecs = np.linalg.eigh(x.T @ x)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise DegeneratePatchError("collinear or coincident patch")
    n = evecs[:, 0]
    if n[2] < 0:
        n = -n
    return n / np.linalg.norm(n)


def pca_normals_batch(patches: np.ndarray) -> np.ndarray:
    """Vectorised :func:`pca_normal` over a ``B x N x 3`` stack (no degeneracy check)."""
    x = patches - patches.mean(axis=1, keepdims=True)
    cov = np.einsum("bni,bnj->bij", x, x)
    _, evecs = np.linalg.eigh(cov)
    n = evecs[:, :, 0]
    n *= np.where(n[:, 2:3] < 0, -1.0, 1.0)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def fit_jet(patch: np.ndarray, order: int = 2) -> JetCoefficients:
    """Least-squares fit of ``z = J(x, y)`` to an aligned patch.

    Coordinates are rescaled to unit extent and Vandermonde columns are
    normalised before an SVD-based solve; the coefficients are mapped back
    to the original units.
    """
    patch = np.asarray(patch, dtype=np.float64)
    terms = jet_terms(order)
    if len(patch) < len(terms):
        raise DegeneratePatchError(f"order-{order} jet needs at least {len(terms)} points")
    x, y, z = patch[:, 0], patch[:, 1], patch[:, 2]
    h = max(np.max(np.abs(x)), np.max(np.abs(y)))
    if h == 0:
        h = 1.0
    xs, ys = x / h, y / h
    V = np.stack([xs ** i * ys ** j for i, j in terms], axis=1)
    col = np.linalg.norm(V, axis=0)
    col[col == 0] = 1.0
    sol, _, rank, _ = np.linalg.lstsq(V / col, z, rcond=None)
    scaled = sol / col
    alpha = np.array([a / h ** (i + j) for a, (i, j) in zip(scaled, terms)])
    resid = z - V @ scaled
    return JetCoefficients(order, alpha, float(resid @ resid), bool(rank < len(terms)))


def jet_normal(coeffs: JetCoefficients) -> np.ndarray:
    a10 = coeffs[(1, 0)]
    a01 = coeffs[(0, 1)]
    return np.array([-a10, -a01, 1.0]) / np.sqrt(1.0 + a10 * a10 + a01 * a01)
