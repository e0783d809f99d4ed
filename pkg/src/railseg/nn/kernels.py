"""Index-producing geometric kernels of the hierarchical network.

All kernels take plain ``(n, 3)`` arrays and return integer indices (plus
weights for interpolation). Squared distances are accumulated in float64.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

_CHUNK = 256


def lexmin_index(positions: np.ndarray) -> int:
    """Index of the lexicographically smallest (x, y, z) triple."""
    if len(positions) == 0:
        raise ValueError("empty point set")
    order = np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0]))
    return int(order[0])


def fps(positions: np.ndarray, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the lowest index."""
    p = np.asarray(positions, dtype=np.float64)
    n = len(p)
    if not 1 <= k <= n:
        raise ValueError(f"fps needs 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range")
    out = np.empty(k, dtype=np.int64)
    out[0] = start_index
    mind = np.full(n, np.inf)
    last = start_index
    for i in range(1, k):
        d = p - p[last]
        np.minimum(mind, np.einsum("ij,ij->i", d, d), out=mind)
        last = int(np.argmax(mind))
        out[i] = last
    return out


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a[:, None, 0] - b[None, :, 0]) ** 2
    d += (a[:, None, 1] - b[None, :, 1]) ** 2
    d += (a[:, None, 2] - b[None, :, 2]) ** 2
    return d


def ball_query(centers: np.ndarray, positions: np.ndarray, radius: float, nsample: int) -> np.ndarray:
    """Up to ``nsample`` in-radius neighbors per center, in ascending index order.

    Short rows are padded with their first neighbor; a center with no
    neighbor in range gets ``nsample`` copies of its nearest point.
    """
    c = np.asarray(centers, dtype=np.float64)
    p = np.asarray(positions, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("ball_query on an empty point set")
    if not radius > 0 or nsample < 1:
        raise ValueError("ball_query needs radius > 0 and nsample >= 1")
    m = len(c)
    out = np.empty((m, nsample), dtype=np.int64)
    r2 = radius * radius
    for s in range(0, m, _CHUNK):
        d2 = _sqdist(c[s:s + _CHUNK], p)
        rows, cols = np.nonzero(d2 <= r2)
        counts = np.bincount(rows, minlength=len(d2))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(len(rows)) - starts[rows]
        keep = rank < nsample
        first = np.argmin(d2, axis=1)
        has = counts > 0
        first[has] = cols[starts[has]]
        block = np.repeat(first[:, None], nsample, axis=1)
        block[rows[keep], rank[keep]] = cols[keep]
        out[s:s + _CHUNK] = block
    return out


def knn(query: np.ndarray, source: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest sources per query: (indices (q, k), distances (q, k))."""
    if len(source) == 0:
        raise ValueError("knn on an empty source set")
    if not 1 <= k <= len(source):
        raise ValueError(f"knn needs 1 <= k <= {len(source)}, got {k}")
    tree = cKDTree(np.asarray(source, dtype=np.float64))
    d, i = tree.query(np.asarray(query, dtype=np.float64), k=k)
    return i.reshape(len(query), k).astype(np.int64), d.reshape(len(query), k)


def idw_weights(query: np.ndarray, source: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor indices and normalized inverse-square-distance weights."""
    idx, d = knn(query, source, k)
    w = 1.0 / np.maximum(d, 1e-10) ** 2
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def idw_matrix(query: np.ndarray, source: np.ndarray, k: int = 3) -> sp.csr_matrix:
    """Sparse (q, s) interpolation operator; rows sum to 1."""
    idx, w = idw_weights(query, source, k)
    q = len(query)
    rows = np.repeat(np.arange(q), idx.shape[1])
    return sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(q, len(source)))


def interpolate_idw(query: np.ndarray, source: np.ndarray, source_feats: np.ndarray, k: int = 3) -> np.ndarray:
    feats = np.asarray(source_feats)
    idx, w = idw_weights(query, source, k)
    if feats.ndim == 1:
        return np.einsum("qk,qk->q", w, feats[idx])
    return np.einsum("qk,qkf->qf", w, feats[idx])
