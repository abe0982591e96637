"""Graph layers with explicit backward passes.

All functions act on one graph signal ``X`` of shape ``(n, channels)``.
Adjacencies are scipy sparse matrices; ``A_hat`` is the renormalized
D^-1/2 (A + I) D^-1/2 operator and ``A`` the 0/1 structure without loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..mesh import normalize_adjacency

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Inputs with inconsistent shapes."""


class DegenerateProjectionError(ValueError):
    """A pooling projection vector with zero norm."""


def leaky_relu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def leaky_relu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


# --------------------------------------------------------------------------
# graph convolution


def gcn_layer_forward(X: np.ndarray, A_hat, W: np.ndarray, b: np.ndarray, activation: str = "leaky"):
    """X' = act(A_hat X W + b); returns ``(X', cache)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise ShapeError(f"cannot apply a {W.shape} weight to features of shape {X.shape}")
    if A_hat.shape != (X.shape[0], X.shape[0]):
        raise ShapeError(f"adjacency {A_hat.shape} does not match {X.shape[0]} nodes")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match {W.shape[1]} output channels")
    AX = A_hat @ X
    Z = AX @ W + b
    out = leaky_relu(Z) if activation == "leaky" else Z
    return out, (AX, Z, activation)


def gcn_layer_backward(dOut: np.ndarray, A_hat, W: np.ndarray, cache):
    """Gradients ``(dX, dW, db)`` for :func:`gcn_layer_forward` (A_hat symmetric)."""
    AX, Z, activation = cache
    dZ = dOut * leaky_relu_grad(Z) if activation == "leaky" else dOut
    dW = AX.T @ dZ
    db = dZ.sum(axis=0)
    dX = A_hat.T @ (dZ @ W.T)
    return dX, dW, db


# --------------------------------------------------------------------------
# pooling


@dataclass(frozen=True, eq=False)
class PoolLevel:
    """Bookkeeping of one kMax pooling step, needed for unpooling and backward."""

    kept: np.ndarray  # indices into the finer graph, best score first
    assignment: np.ndarray  # for every finer node, the position in ``kept`` it clones from
    A: sp.csr_matrix  # structure of the coarser graph
    A_hat: sp.csr_matrix
    gate: np.ndarray  # tanh(y[kept])
    p_unit: np.ndarray
    p_norm: float


def top_k_order(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, best first, ties to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def cluster_assignment(A: sp.csr_matrix, kept: np.ndarray) -> np.ndarray:
    """Nearest kept node in hop distance for every node.

    Returns positions into ``kept``. Ties between equally near kept nodes go
    to the smaller position, i.e. the better score, which keeps the map
    equivariant under node relabeling. Nodes that no kept node can reach are
    assigned to the best kept node.
    """
    n = A.shape[0]
    big = np.iinfo(np.int64).max
    label = np.full(n, big, dtype=np.int64)
    label[kept] = np.arange(len(kept))
    A = A.tocsr()
    indptr, indices = A.indptr, A.indices
    nonempty = indptr[1:] > indptr[:-1]
    starts = indptr[:-1][nonempty]
    while True:
        open_ = label == big
        if not open_.any():
            break
        vals = label[indices]
        best = np.full(n, big, dtype=np.int64)
        if len(indices):
            best[nonempty] = np.minimum.reduceat(vals, starts)
        grow = open_ & (best < big)
        if not grow.any():
            label[open_] = 0
            break
        label[grow] = best[grow]
    return label


def pooled_structure(A: sp.csr_matrix, kept: np.ndarray) -> sp.csr_matrix:
    """0/1 structure of (A + I)^2 restricted to ``kept``, self-loops removed."""
    n = A.shape[0]
    AI = (A + sp.identity(n, format="csr")).tocsr()
    AI.data[:] = 1.0
    S = (AI[kept] @ AI[:, kept]).tocsr()
    S.setdiag(0)
    S.eliminate_zeros()
    S.data[:] = 1.0
    S.sort_indices()
    return S


def kmax_pool(X: np.ndarray, A: sp.csr_matrix, p: np.ndarray, keep_fraction: float):
    """Keep the top ``ceil(keep_fraction * n)`` nodes by the projection score.

    Returns ``(X_pooled, level)``; ``X_pooled = X[kept] * tanh(y[kept])``
    with ``y = X p / |p|``.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    p = np.asarray(p, dtype=float)
    norm = float(np.linalg.norm(p))
    if norm == 0 or not math.isfinite(norm):
        raise DegenerateProjectionError("pooling projection vector has zero norm")
    if X.shape[1] != p.shape[0]:
        raise ShapeError("projection vector length does not match the channel count")
    n = X.shape[0]
    k = max(1, math.ceil(keep_fraction * n - 1e-9))
    p_unit = p / norm
    y = X @ p_unit
    kept = top_k_order(y, k)
    gate = np.tanh(y[kept])
    Xp = X[kept] * gate[:, None]
    S = pooled_structure(A, kept)
    assignment = cluster_assignment(A, kept)
    level = PoolLevel(kept, assignment, S, normalize_adjacency(S), gate, p_unit, norm)
    return Xp, level


def kmax_pool_backward(dXp: np.ndarray, X: np.ndarray, level: PoolLevel):
    """Gradients ``(dX, dp)`` of :func:`kmax_pool` for a fixed kept set."""
    kept, gate = level.kept, level.gate
    Xk = X[kept]
    dX = np.zeros_like(X)
    dX[kept] = dXp * gate[:, None]
    dy = (dXp * Xk).sum(axis=1) * (1.0 - gate ** 2)
    dX[kept] += dy[:, None] * level.p_unit[None, :]
    dp_unit = Xk.T @ dy
    dp = (dp_unit - level.p_unit * (level.p_unit @ dp_unit)) / level.p_norm
    return dX, dp


# --------------------------------------------------------------------------
# unpooling


def clone_cluster_unpool(X_pooled: np.ndarray, n: int, kept: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Every node copies the pooled row of its assigned kept node."""
    assignment = np.asarray(assignment)
    if assignment.shape != (n,):
        raise ShapeError("cluster assignment must cover every node of the finer graph")
    if assignment.min() < 0 or assignment.max() >= len(kept):
        raise ShapeError("cluster assignment refers to a missing kept node")
    return X_pooled[assignment]


def clone_cluster_unpool_backward(dX: np.ndarray, k: int, assignment: np.ndarray) -> np.ndarray:
    n = len(assignment)
    S = sp.csr_matrix((np.ones(n), (assignment, np.arange(n))), shape=(k, n))
    return S @ dX
