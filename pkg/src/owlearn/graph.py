"""Similarity graphs, Laplacians, and hypergraph Laplacians.

Every operator produced here is spectrally scaled so its norm is at most 1,
which is the normalization the contraction analysis of the unrolled layers
relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import as_matrix, spectral_norm


class GraphKind(Enum):
    LAPLACIAN = "laplacian"
    HYPERGRAPH_LAPLACIAN = "hypergraph-laplacian"


@dataclass(frozen=True)
class GraphOperator:
    """A normalized N x N propagation matrix plus its spectral data.

    ``matrix`` is the scaled operator actually applied by layers;
    ``scale`` is the spectral norm of the unscaled matrix, so
    ``matrix * scale`` recovers the raw Laplacian.
    """

    matrix: np.ndarray
    kind: GraphKind
    spectral_norm: float
    k_neighbors: int
    scale: float

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"graph operator must be square, got {m.shape}")
        if not np.allclose(m, m.T, atol=1e-12, rtol=0.0):
            raise ValueError("graph operator must be symmetric")
        if self.spectral_norm > 1.0 + 1e-9:
            raise ValueError(
                f"graph operator norm {self.spectral_norm} exceeds 1; scaling failed"
            )


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _knn_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of each row's k nearest rows (self excluded, ties by lower index)."""
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"knn: need 1 <= k < n, got k={k}, n={n}")
    d2 = _pairwise_sq_dists(x)
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps ascending index order among equal distances
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def knn_similarity(x, k: int) -> np.ndarray:
    """Binary symmetric k-NN adjacency with zero diagonal.

    S[i, j] = 1 iff j is among i's k nearest neighbours (Euclidean) or
    vice versa. Duplicate points are allowed; distance ties break toward
    the lower sample index.
    """
    x = as_matrix(x, "x")
    nbrs = _knn_indices(x, k)
    n = x.shape[0]
    s = np.zeros((n, n))
    rows = np.repeat(np.arange(n), k)
    s[rows, nbrs.reshape(-1)] = 1.0
    s = np.maximum(s, s.T)
    np.fill_diagonal(s, 0.0)
    return s


def laplacian(s, k_neighbors: int = 0) -> GraphOperator:
    """L = E - S with E = diag(row sums), scaled by 1/sigma_max(L)."""
    s = as_matrix(s, "s")
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity must be square, got {s.shape}")
    if not np.allclose(s, s.T, atol=1e-12, rtol=0.0):
        raise ValueError("similarity matrix must be symmetric")
    if np.any(s < 0):
        raise ValueError("similarity matrix must be non-negative")
    if np.any(np.abs(np.diag(s)) > 0):
        raise ValueError("similarity matrix must have a zero diagonal")
    lap = np.diag(s.sum(axis=1)) - s
    scale = spectral_norm(lap) if np.any(lap) else 0.0
    scaled = lap / scale if scale > 0 else lap
    norm = spectral_norm(scaled) if scale > 0 else 0.0
    return GraphOperator(matrix=scaled, kind=GraphKind.LAPLACIAN,
                         spectral_norm=norm, k_neighbors=k_neighbors, scale=scale)


def knn_graph(x, k: int) -> GraphOperator:
    """Convenience composition: scaled Laplacian of the k-NN similarity."""
    return laplacian(knn_similarity(x, k), k_neighbors=k)


def hypergraph_laplacian(x, k: int) -> GraphOperator:
    """Normalized hypergraph Laplacian from k-NN neighbourhood hyperedges.

    One hyperedge per vertex containing the vertex and its k nearest
    neighbours, unit hyperedge weights. With incidence H, vertex degrees
    Dv and edge degrees De, the operator is
    I - Dv^{-1/2} H De^{-1} H^T Dv^{-1/2}, then spectrally scaled.
    """
    x = as_matrix(x, "x")
    n = x.shape[0]
    nbrs = _knn_indices(x, k)
    h = np.zeros((n, n))
    h[np.arange(n), np.arange(n)] = 1.0  # each vertex joins its own hyperedge
    rows = nbrs.reshape(-1)
    cols = np.repeat(np.arange(n), k)
    h[rows, cols] = 1.0
    dv = h.sum(axis=1)
    de = h.sum(axis=0)
    dv_isqrt = 1.0 / np.sqrt(dv)  # every vertex is in its own edge, so dv >= 1
    theta = (dv_isqrt[:, None] * h) @ (h.T / de[:, None]) * dv_isqrt[None, :]
    theta = 0.5 * (theta + theta.T)  # kill float asymmetry
    lap = np.eye(n) - theta
    scale = spectral_norm(lap) if np.any(lap) else 0.0
    scaled = lap / scale if scale > 0 else lap
    norm = spectral_norm(scaled) if scale > 0 else 0.0
    return GraphOperator(matrix=scaled, kind=GraphKind.HYPERGRAPH_LAPLACIAN,
                         spectral_norm=norm, k_neighbors=k, scale=scale)


def load_edge_list(path, n_nodes: int) -> np.ndarray:
    """Read an undirected edge list ("i j" per line, 0-based) into an adjacency.

    Blank lines and lines starting with '#' are ignored. Used to bypass the
    k-NN construction when a native graph exists.
    """
    s = np.zeros((n_nodes, n_nodes))
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'i j', got {line!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-integer node id in {line!r}") from exc
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise ValueError(
                f"{path}:{lineno}: node id out of range [0, {n_nodes}) in {line!r}"
            )
        if i == j:
            continue  # self loops carry no Laplacian weight
        s[i, j] = 1.0
        s[j, i] = 1.0
    return s
