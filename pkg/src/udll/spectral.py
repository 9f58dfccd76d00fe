"""Spectral clustering of a learned self-expressive matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.cluster import KMeans
from sklearn.utils.validation import check_array

from .exceptions import ConvergenceError, ShapeError

__all__ = [
    "SymmetricAffinity",
    "SpectralEmbedding",
    "postprocess_affinity",
    "normalized_laplacian",
    "jacobi_eigh",
    "spectral_embed",
    "kmeans",
    "spectral_cluster",
    "SpectralClustering",
]


@dataclass
class SymmetricAffinity:
    S: np.ndarray
    options: dict = field(default_factory=dict)


@dataclass
class SpectralEmbedding:
    """Row-normalised eigenvector coordinates.

    ``zero_rows`` marks rows that were exactly zero and left unnormalised;
    ``degenerate`` is set when the k-th and (k+1)-th eigenvalues coincide,
    so the subspace (and the embedding) is not unique.
    """

    vectors: np.ndarray
    eigenvalues: np.ndarray
    zero_rows: np.ndarray
    degenerate: bool = False

    @property
    def k(self):
        return self.vectors.shape[1]


def postprocess_affinity(W, top_q=0):
    """Turn a self-expressive matrix into a symmetric affinity with max entry 1.

    Steps: ``|W|``, zero the diagonal, optionally keep the ``top_q`` largest
    entries of each column, symmetrise as ``(C + C^T) / 2``, scale to max 1.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ShapeError(f"affinity source must be square, got {W.shape}")
    C = np.abs(W)
    np.fill_diagonal(C, 0.0)
    if top_q and top_q < C.shape[0]:
        order = np.argsort(-C, axis=0, kind="stable")
        mask = np.zeros_like(C, dtype=bool)
        np.put_along_axis(mask, order[:top_q], True, axis=0)
        C = np.where(mask, C, 0.0)
    S = 0.5 * (C + C.T)
    peak = S.max()
    if not peak > 0:
        raise ValueError("affinity is identically zero off the diagonal; nothing to cluster")
    return SymmetricAffinity(S / peak, {"abs": True, "zero_diagonal": True, "top_q": int(top_q), "scale": "max"})


def normalized_laplacian(S):
    """``L = I - D^{-1/2} S D^{-1/2}``; returns ``(L, isolated)``.

    Zero-degree vertices keep an identity row/column and are flagged in the
    boolean mask ``isolated``.
    """
    S = np.asarray(getattr(S, "S", S), dtype=np.float64)
    deg = S.sum(axis=1)
    isolated = deg <= 0
    inv_sqrt = np.zeros_like(deg)
    inv_sqrt[~isolated] = 1.0 / np.sqrt(deg[~isolated])
    L = -(inv_sqrt[:, None] * S * inv_sqrt[None, :])
    L[np.diag_indices_from(L)] += 1.0
    L = 0.5 * (L + L.T)
    return L, isolated


def _round_robin(m):
    """Pairings of ``m`` (even) players so that every pair meets exactly once."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        half = m // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(A, tol=1e-14, max_sweeps=60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once in round-robin order.
    Before each round the working matrix is permuted so that the round's
    ``n/2`` disjoint pairs occupy adjacent positions; the rotations are then
    one batched 2x2 product over row pairs, and the same over the rows of
    the transpose. Odd ``n`` gets a decoupled zero row that never rotates.
    Returns ascending eigenvalues and the matching orthonormal eigenvectors
    as columns.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise ShapeError(f"expected a square matrix, got {A.shape}")
    if n < 2:
        return np.diag(A).copy(), np.eye(n)
    scale = np.linalg.norm(A)
    if scale == 0:
        return np.zeros(n), np.eye(n)
    m = n + (n % 2)
    half = m // 2
    B = np.pad(0.5 * (A + A.T), ((0, m - n), (0, m - n)))
    Ut = np.eye(m)  # row i: current basis vector at position i, original coordinates
    order = np.arange(m)  # original index held at each position
    layouts = [np.column_stack((np.minimum(p, q), np.maximum(p, q))).ravel() for p, q in _round_robin(m)]
    even, odd = np.arange(0, m, 2), np.arange(1, m, 2)
    offdiag = ~np.eye(m, dtype=bool)
    where = np.empty(m, dtype=np.int64)
    G = np.empty((half, 2, 2))

    def rotate_rows(M):
        return np.matmul(G, M.reshape(half, 2, -1)).reshape(M.shape)

    for _ in range(max_sweeps):
        if np.linalg.norm(B[offdiag]) <= tol * scale:
            break
        for layout in layouts:
            where[order] = np.arange(m)
            sigma = where[layout]
            B = B.take(sigma, axis=0).take(sigma, axis=1)
            Ut = Ut.take(sigma, axis=0)
            order = layout
            apq = B[even, odd]
            active = np.abs(apq) > 1e-300
            tau = (B[odd, odd] - B[even, even]) / (2.0 * np.where(active, apq, 1.0))
            t = np.where(active, np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            G[:, 0, 0], G[:, 0, 1], G[:, 1, 0], G[:, 1, 1] = c, -s, s, c
            # J^T B J; the result is symmetric, so its transpose stands in for it
            B = rotate_rows(np.ascontiguousarray(rotate_rows(B).T))
            B[even[active], odd[active]] = 0.0
            B[odd[active], even[active]] = 0.0
            Ut = rotate_rows(Ut)
        B = 0.5 * (B + B.T)
    else:
        residual = np.linalg.norm(B[offdiag])
        if residual > tol * scale:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps; off-diagonal norm {residual:.3e}"
            )
    real = order < n
    evals = np.diag(B)[real]
    vecs = Ut[real][:, :n]
    idx = np.argsort(evals, kind="stable")
    return evals[idx], np.ascontiguousarray(vecs[idx].T)


def spectral_embed(L, k, solver="jacobi"):
    """Row-normalised eigenvectors of the ``k`` smallest eigenvalues of ``L``.

    ``solver="lapack"`` uses ``numpy.linalg.eigh`` instead of Jacobi, which
    is much faster for a few thousand nodes.
    """
    if k < 2:
        raise ValueError("need k >= 2")
    L = np.asarray(L, dtype=np.float64)
    if k > L.shape[0]:
        raise ValueError(f"k={k} exceeds the number of nodes {L.shape[0]}")
    if solver == "jacobi":
        evals, evecs = jacobi_eigh(L)
    elif solver == "lapack":
        evals, evecs = np.linalg.eigh(L)
    else:
        raise ValueError(f"unknown eigensolver {solver!r}")
    U = evecs[:, :k].copy()
    # fix each eigenvector's sign so repeated runs and solvers agree
    pivot = np.argmax(np.abs(U), axis=0)
    U *= np.where(U[pivot, np.arange(k)] < 0, -1.0, 1.0)
    norms = np.linalg.norm(U, axis=1)
    zero = norms == 0
    U[~zero] /= norms[~zero, None]
    degenerate = k < evals.size and abs(evals[k] - evals[k - 1]) <= 1e-10 * max(1.0, abs(evals[k]))
    return SpectralEmbedding(U, evals[:k].copy(), zero, bool(degenerate))


def kmeans(points, n_clusters, seed=0, restarts=10):
    """Lloyd's k-means with k-means++ seeding; best of ``restarts`` by inertia."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < n_clusters:
        raise ValueError(f"{points.shape[0]} points cannot form {n_clusters} clusters")
    km = KMeans(n_clusters=n_clusters, init="k-means++", n_init=restarts, random_state=seed, algorithm="lloyd")
    return km.fit_predict(points)


def spectral_cluster(W, n_clusters, top_q=0, seed=0, restarts=10, solver="jacobi", return_details=False):
    """Labels from post-processed affinity, normalised Laplacian, embedding and k-means.

    Vertices with no affinity to any other vertex are left out of the
    embedding and all receive the extra label ``n_clusters``.
    """
    aff = postprocess_affinity(W, top_q)
    L, isolated = normalized_laplacian(aff.S)
    keep = ~isolated
    if keep.sum() < n_clusters:
        raise ValueError(f"only {int(keep.sum())} connected vertices for {n_clusters} clusters")
    if isolated.any():
        L, _ = normalized_laplacian(aff.S[np.ix_(keep, keep)])
    emb = spectral_embed(L, n_clusters, solver)
    labels = np.full(isolated.size, n_clusters, dtype=np.int64)
    labels[keep] = kmeans(emb.vectors, n_clusters, seed, restarts)
    if return_details:
        return labels, {"affinity": aff, "laplacian": L, "isolated": isolated, "embedding": emb}
    return labels


class SpectralClustering(ClusterMixin, BaseEstimator):
    """Spectral clustering of a precomputed (possibly asymmetric) coefficient matrix.

    Parameters
    ----------
    n_clusters : int
    top_q : int, default 0
        Keep only the ``top_q`` strongest coefficients per column before
        symmetrising; 0 keeps all.
    eigen_solver : {"jacobi", "lapack"}, default "jacobi"
    n_init : int, default 10
        k-means restarts.
    random_state : int, default 0

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
    affinity_matrix_ : ndarray of shape (n_samples, n_samples)
    embedding_ : SpectralEmbedding
    """

    def __init__(self, n_clusters=2, top_q=0, eigen_solver="jacobi", n_init=10, random_state=0):
        self.n_clusters = n_clusters
        self.top_q = top_q
        self.eigen_solver = eigen_solver
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        labels, details = spectral_cluster(
            X, self.n_clusters, self.top_q, self.random_state, self.n_init, self.eigen_solver, return_details=True
        )
        self.labels_ = labels
        self.affinity_matrix_ = details["affinity"].S
        self.embedding_ = details["embedding"]
        return self
