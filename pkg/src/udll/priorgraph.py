"""Closed-form k-nearest-neighbour prior graph.

Each column ``a_j`` of the graph solves

    min_a  sum_i m_ij a_i + lam * ||a||^2   s.t.  a >= 0, 1^T a = 1

with ``m_ij = ||z_i - z_j||^2``. Choosing ``lam`` at the upper end of the
interval that keeps exactly ``k`` active entries gives the closed form

    a_i = (m_(k+1) - m_(i)) / (k m_(k+1) - sum_{p<=k} m_(p))   for i <= k

over distances sorted ascending. The self-distance ``m_jj = 0`` is excluded
from candidacy so ``a_jj = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .exceptions import DataFormatError, ShapeError

__all__ = [
    "PriorGraph",
    "pairwise_sqdist",
    "solve_column",
    "qp_oracle_column",
    "project_simplex",
    "build_prior_graph",
    "check_prior_graph",
    "save_graph",
    "load_graph",
]

GRAPH_MAGIC = "UDLL-GRAPH"


@dataclass
class PriorGraph:
    """Column-stochastic sparse affinity; column ``j`` holds the weights of node ``j``'s neighbours.

    Attributes
    ----------
    matrix : scipy.sparse.csc_matrix, shape (n, n)
        ``matrix[i, j] = a_ij``.
    k : int
        Neighbours per column.
    lambdas : ndarray of shape (n,) or None
        Regularisation weight selected for each column. Not stored in the
        text format, so ``None`` after :func:`load_graph`.
    degenerate : ndarray of bool, shape (n,)
        Columns that used the uniform fallback.
    """

    matrix: sparse.csc_matrix
    k: int
    lambdas: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def column(self, j):
        """Return ``(indices, weights)`` of the stored entries of column ``j``."""
        start, stop = self.matrix.indptr[j], self.matrix.indptr[j + 1]
        return self.matrix.indices[start:stop], self.matrix.data[start:stop]


def pairwise_sqdist(Z):
    """Squared Euclidean distances between the columns of ``Z`` (features x samples).

    Entries below ``1e-12 * (|z_i|^2 + |z_j|^2)`` are cancellation noise of the
    Gram expansion and are snapped to zero.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ShapeError(f"expected a 2-d feature matrix, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("features contain non-finite values")
    G = Z.T @ Z
    sq = np.diag(G).copy()
    norms = sq[:, None] + sq[None, :]
    D = norms - 2.0 * G
    D = 0.5 * (D + D.T)
    D[D <= 1e-12 * norms] = 0.0
    np.fill_diagonal(D, 0.0)
    return D


def solve_column(distances, k, source_index=None):
    """Closed-form graph column for one node.

    Parameters
    ----------
    distances : array-like of shape (n,)
        Squared distances from node ``source_index`` to every node. If
        ``source_index`` is None the array is taken to already exclude the
        node itself.
    k : int
        Number of neighbours, ``1 <= k <= n_candidates - 1``.

    Returns
    -------
    indices : ndarray of int, shape (k,)
        Neighbour indices into ``distances``, nearest first (ties by index).
    weights : ndarray of shape (k,)
    lam : float
        The regularisation weight this solution corresponds to.
    degenerate : bool
        True when the first ``k + 1`` distances coincide and the uniform
        fallback ``1/k`` was used.
    """
    m = np.asarray(distances, dtype=np.float64)
    candidates = np.arange(m.size)
    if source_index is not None:
        candidates = np.delete(candidates, source_index)
    if not 1 <= k <= candidates.size - 1:
        raise ValueError(f"k={k} out of range: need 1 <= k <= {candidates.size - 1} for {candidates.size} candidates")
    if np.any(m[candidates] < 0) or not np.all(np.isfinite(m[candidates])):
        raise ValueError("distances must be finite and nonnegative")

    order = candidates[np.argsort(m[candidates], kind="stable")]
    nearest = m[order[: k + 1]]
    m_next = nearest[k]
    head_sum = float(np.sum(nearest[:k]))
    denom = k * m_next - head_sum
    lam = 0.5 * denom
    idx = order[:k]
    if denom <= 1e-14 * k * m_next or denom <= 0.0:
        return idx, np.full(k, 1.0 / k), lam, True
    weights = (m_next - nearest[:k]) / denom
    return idx, weights, lam, False


def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def qp_oracle_column(distances, lam):
    """Solve the column problem at a fixed ``lam`` as a simplex projection of ``-m / (2 lam)``."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    return project_simplex(-np.asarray(distances, dtype=np.float64) / (2.0 * lam))


def build_prior_graph(Z, k):
    """Build the prior graph from latent features ``Z`` (one column per sample)."""
    D = pairwise_sqdist(Z)
    n = D.shape[0]
    if n < k + 2:
        raise ValueError(f"need at least k + 2 = {k + 2} samples, got {n}")
    rows = np.empty((n, k), dtype=np.int64)
    vals = np.empty((n, k))
    lambdas = np.empty(n)
    degenerate = np.zeros(n, dtype=bool)
    for j in range(n):
        rows[j], vals[j], lambdas[j], degenerate[j] = solve_column(D[:, j], k, source_index=j)
    cols = np.repeat(np.arange(n), k)
    A = sparse.csc_matrix((vals.ravel(), (rows.ravel(), cols)), shape=(n, n))
    A.eliminate_zeros()
    A.sort_indices()
    return PriorGraph(A, k, lambdas, degenerate)


def check_prior_graph(graph: PriorGraph, tol=1e-12):
    """Raise ``ValueError`` if ``graph`` breaks any structural invariant."""
    A = graph.matrix
    if A.shape != (graph.n, graph.n):
        raise ValueError(f"graph matrix is not square: {A.shape}")
    if A.nnz and A.data.min() < 0:
        raise ValueError("negative graph weight")
    if np.any(A.diagonal() != 0):
        raise ValueError("graph has self-loops")
    sums = np.asarray(A.sum(axis=0)).ravel()
    bad = np.nonzero(np.abs(sums - 1.0) > tol)[0]
    if bad.size:
        raise ValueError(f"column {bad[0]} sums to {sums[bad[0]]!r}, not 1")
    counts = np.diff(A.indptr)
    if np.any(counts > graph.k):
        raise ValueError(f"a column has more than k={graph.k} nonzeros")


def save_graph(graph: PriorGraph, path):
    """Write ``UDLL-GRAPH n k`` then one ``j i weight`` line per nonzero."""
    A = graph.matrix
    lines = [f"{GRAPH_MAGIC} {graph.n} {graph.k}"]
    for j in range(graph.n):
        idx, w = graph.column(j)
        lines.extend(f"{j} {i} {v:.17g}" for i, v in zip(idx, w) if v != 0)
    Path(path).write_text("\n".join(lines) + "\n")


def load_graph(path) -> PriorGraph:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != GRAPH_MAGIC:
            raise DataFormatError(f"{path}: missing '{GRAPH_MAGIC} n k' header")
        n, k = int(header[1]), int(header[2])
        rows, cols, vals = [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 'j i weight'")
            j, i, v = int(parts[0]), int(parts[1]), float(parts[2])
            if not (0 <= i < n and 0 <= j < n):
                raise DataFormatError(f"{path}:{lineno}: index out of range for n={n}")
            cols.append(j)
            rows.append(i)
            vals.append(v)
    A = sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    A.sort_indices()
    return PriorGraph(A, k)
