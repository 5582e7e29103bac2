"""
From a similarity matrix to cluster labels.

    L = I - D^-1/2 A D^-1/2

The spectrum of L is computed once by cyclic Jacobi rotations and shared by
the eigengap estimate and the spectral embedding, which is row-normalised
and handed to k-means.
"""
import logging
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from abclust.utils import (ConfigurationError, DataError, IsolatedElementError,
                           NumericalError)

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
EIG_RESIDUAL_TOL = 1e-8
SYMMETRY_TOL = 1e-10

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 100
KMEANS_SHIFT_TOL = 1e-8

logger = logging.getLogger("Eigen")

KSource = Literal["given", "eigengap"]


@dataclass(frozen=True)
class KernelMatrix:
    """Symmetric, non-negative and finite n x n matrix"""
    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"Kernel matrix must be square, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise DataError("Kernel matrix has non-finite entries")
        if (a < 0).any():
            raise DataError("Kernel matrix has negative entries")
        if not np.array_equal(a, a.T):
            raise DataError("Kernel matrix is not symmetric")
        object.__setattr__(self, "entries", a)

    @staticmethod
    def symmetrized(m: np.ndarray) -> "KernelMatrix":
        m = np.asarray(m, dtype=np.float64)
        return KernelMatrix(0.5 * (m + m.T))

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class Spectrum:
    values: np.ndarray
    """Ascending eigenvalues of L"""
    vectors: np.ndarray
    """Orthonormal eigenvectors as columns, same order as `values`"""


@dataclass
class ClusterResult:
    labels: np.ndarray
    k_used: int
    k_source: KSource
    degenerate: bool = False
    """Set when k-means had fewer distinct points than k, some labels may be unused"""


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    duplicate_centroids: bool


def normalized_laplacian(a: KernelMatrix) -> np.ndarray:
    deg = a.entries.sum(axis=1)
    zero = np.flatnonzero(deg <= 0)
    if zero.size:
        raise IsolatedElementError(int(zero[0]))
    dinv = 1.0 / np.sqrt(deg)
    lap = np.eye(a.n) - dinv[:, None] * a.entries * dinv[None, :]
    return 0.5 * (lap + lap.T)


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def sym_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.

    Cyclic Jacobi: every sweep zeroes each off-diagonal pair once, until the
    off-diagonal norm falls below JACOBI_TOL * |M|_F. Eigenvector signs are
    fixed so the largest-magnitude component of each is positive.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"sym_eig needs a square matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NumericalError("sym_eig received non-finite entries")
    scale = np.linalg.norm(a)
    if np.abs(a - a.T).max(initial=0.0) > SYMMETRY_TOL * max(1.0, scale):
        raise DataError("sym_eig needs a symmetric matrix")
    a = 0.5 * (a + a.T)
    sym = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    tol = JACOBI_TOL * scale
    sweeps = 0
    while _off_norm(a) > tol:
        if sweeps == JACOBI_MAX_SWEEPS:
            raise NumericalError(f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps, "
                                 f"off-diagonal norm {_off_norm(a):.3e} (tolerance {tol:.3e})")
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                idx = [p, q]
                a[:, idx] = a[:, idx] @ rot
                a[idx, :] = rot.T @ a[idx, :]
                a[p, q] = a[q, p] = 0.0
                v[:, idx] = v[:, idx] @ rot
    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    values, v = values[order], v[:, order]
    for j in range(n):
        i = int(np.argmax(np.abs(v[:, j])))
        if v[i, j] < 0:
            v[:, j] = -v[:, j]
    residual = float(np.linalg.norm(sym @ v - v * values[None, :], axis=0).max(initial=0.0))
    if residual > EIG_RESIDUAL_TOL * max(scale, np.finfo(float).tiny):
        raise NumericalError(f"Eigen residual {residual:.3e} exceeds {EIG_RESIDUAL_TOL} * |M|")
    logger.debug(f"Jacobi converged in {sweeps} sweeps for n={n}, residual {residual:.2e}")
    return values, v


def laplacian_spectrum(a: KernelMatrix) -> Spectrum:
    values, vectors = sym_eig(normalized_laplacian(a))
    return Spectrum(values, vectors)


def eigengap(values: np.ndarray, k_max: int | None = None, literal: bool = False) -> int:
    """Cluster count from the largest gap of an ascending spectrum.

    `literal` reads the gaps on the descending order instead, which on ideal
    block kernels answers n - (#blocks). Kept for comparison only.
    """
    n = values.size
    if n == 1:
        return 1
    ordered = values[::-1] if literal else values
    gaps = np.abs(np.diff(ordered))
    limit = n - 1 if k_max is None else max(1, min(k_max, n - 1))
    return int(np.argmax(gaps[:limit])) + 1


def num_clusters(a: KernelMatrix, k_max: int | None = None, literal: bool = False,
                 spectrum: Spectrum | None = None) -> int:
    if k_max is not None and k_max < 1:
        raise ConfigurationError(f"k_max must be positive, got {k_max}")
    spectrum = spectrum or laplacian_spectrum(a)
    return eigengap(spectrum.values, k_max, literal)


def spectral_cluster(a: KernelMatrix, k: int, seed: int, k_source: KSource = "given",
                     spectrum: Spectrum | None = None) -> ClusterResult:
    if k < 1 or k > a.n:
        raise ConfigurationError(f"Cannot form {k} clusters from {a.n} elements")
    spectrum = spectrum or laplacian_spectrum(a)
    u = spectrum.vectors[:, :k].copy()
    norms = np.linalg.norm(u, axis=1)
    nz = norms > 0
    u[nz] /= norms[nz, None]
    km = kmeans(u, k, seed)
    return ClusterResult(km.labels, k, k_source, km.duplicate_centroids)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans(points: np.ndarray, k: int, seed: int,
           restarts: int = KMEANS_RESTARTS) -> KMeansResult:
    """k-means++ seeding and Lloyd iterations, best of `restarts` by inertia"""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ConfigurationError(f"k-means needs 1 <= k <= n, got k={k} n={n}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, max_iter=KMEANS_MAX_ITER,
                tol=KMEANS_SHIFT_TOL, algorithm="lloyd", random_state=seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        km.fit(points)
    duplicate = any(issubclass(w.category, ConvergenceWarning) and "distinct clusters" in str(w.message)
                    for w in caught)
    if duplicate:
        logger.warning(f"⚠ Fewer than {k} distinct points, k-means reused a centroid")
    return KMeansResult(km.labels_.astype(np.int64), km.cluster_centers_, float(km.inertia_), duplicate)


def _check_labels(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"Label vectors differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DataError("Cannot score empty labelings")
    return a, b


def ari(a, b) -> float:
    """Adjusted Rand index. Partitions with nothing to adjust (all one cluster
    or all singletons on both sides) score 1."""
    a, b = _check_labels(a, b)
    return float(adjusted_rand_score(a, b))


def nmi(a, b) -> float:
    """Mutual information normalised by the geometric mean of both entropies"""
    a, b = _check_labels(a, b)
    return float(np.clip(normalized_mutual_info_score(a, b, average_method="geometric"), 0.0, 1.0))


def gaussian_kernel(x: np.ndarray, gamma: float = 1.0) -> KernelMatrix:
    """exp(-gamma |x_i - x_j|^2) over the raw points"""
    if gamma <= 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    x = np.asarray(x, dtype=np.float64)
    return KernelMatrix.symmetrized(np.exp(-gamma * _sq_dists(x, x)))
