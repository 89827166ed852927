"""Masked scaled-dot-product attention evaluated over mask entries only.

Scores are formed one head-dimension column at a time over the ``nnz`` stored
(query, key) pairs, so peak working memory is ``O(nnz + n*d)`` and never
``O(n^2)`` unless the mask itself is dense. Row reductions use
``ufunc.reduceat`` over the CSR row pointer; rows are never empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .hsa import AttentionMask


@dataclass
class HybridMixParams:
    beta: float = 0.0


def _check_qkv(Q, K, V, mask: AttentionMask):
    if Q.ndim != 2 or K.shape != Q.shape or V.shape[0] != Q.shape[0]:
        raise ValueError(f"Q, K, V shapes disagree: {Q.shape}, {K.shape}, {V.shape}")
    if Q.shape[0] != mask.n:
        raise ValueError(f"sequence length {Q.shape[0]} does not match mask n={mask.n}")


def _scores(Q, K, rows, cols):
    d = Q.shape[1]
    QT = np.ascontiguousarray(Q.T)
    KT = np.ascontiguousarray(K.T)
    s = np.zeros(rows.size)
    for c in range(d):
        s += QT[c][rows] * KT[c][cols]
    s *= 1.0 / np.sqrt(d)
    return s


def _segment_softmax(s, starts, rows, member=None):
    """Softmax of ``s`` within each row segment; ``member`` restricts support."""
    if member is not None:
        s = np.where(member, s, -np.inf)
    m = np.maximum.reduceat(s, starts)
    p = np.exp(s - m[rows])
    p /= np.add.reduceat(p, starts)[rows]
    return p


def _weighted_rows(p, V, rows, cols, starts, n):
    out = np.empty((n, V.shape[1]))
    VT = np.ascontiguousarray(V.T)
    for c in range(V.shape[1]):
        out[:, c] = np.add.reduceat(p * VT[c][cols], starts)
    return out


def attention_weights(Q, K, mask: AttentionMask) -> np.ndarray:
    """Per-entry attention probabilities aligned with ``mask.indices``."""
    _check_qkv(Q, K, K, mask)
    rows = mask.row_ids()
    return _segment_softmax(_scores(Q, K, rows, mask.indices), mask.indptr[:-1], rows)


def masked_attention(Q, K, V, mask: AttentionMask) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d))`` restricted to ``mask``, applied to ``V``."""
    out, _ = attention_forward(Q, K, V, mask)
    return out


def attention_forward(Q, K, V, mask: AttentionMask):
    """Masked attention returning ``(output, probs)`` for the backward pass."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    _check_qkv(Q, K, V, mask)
    rows = mask.row_ids()
    cols = mask.indices
    starts = mask.indptr[:-1]
    p = _segment_softmax(_scores(Q, K, rows, cols), starts, rows)
    return _weighted_rows(p, V, rows, cols, starts, mask.n), p


def _scores_backward(ds, Q, K, rows, cols, n):
    d = Q.shape[1]
    scale = 1.0 / np.sqrt(d)
    dQ = np.empty_like(Q)
    dK = np.empty_like(K)
    for c in range(d):
        dQ[:, c] = np.bincount(rows, weights=ds * K[cols, c], minlength=n)
        dK[:, c] = np.bincount(cols, weights=ds * Q[rows, c], minlength=n)
    return dQ * scale, dK * scale


def _dprobs(dout, V, rows, cols):
    dp = np.zeros(rows.size)
    for c in range(V.shape[1]):
        dp += dout[rows, c] * V[cols, c]
    return dp


def attention_backward(dout, Q, K, V, mask: AttentionMask, p):
    """Gradients ``(dQ, dK, dV)`` of masked attention given upstream ``dout``."""
    n = mask.n
    rows = mask.row_ids()
    cols = mask.indices.astype(np.int64)
    starts = mask.indptr[:-1]
    dV = np.empty_like(V)
    for c in range(V.shape[1]):
        dV[:, c] = np.bincount(cols, weights=p * dout[rows, c], minlength=n)
    dp = _dprobs(dout, V, rows, cols)
    ds = p * (dp - np.add.reduceat(p * dp, starts)[rows])
    dQ, dK = _scores_backward(ds, Q, K, rows, cols, n)
    return dQ, dK, dV


def hybrid_mix(local_w, global_w, i, j, p: HybridMixParams) -> np.ndarray:
    """Position-aware convex mix ``a*local + (1-a)*global`` with ``a = sigmoid(beta*(j-i))``.

    ``local_w``/``global_w`` are either dense ``n x n`` weight matrices (then
    ``i``/``j`` may be ``None``) or flat per-entry arrays with row ids ``i``
    and column ids ``j``. Rows of the result are renormalised to sum to 1.
    """
    local_w = np.asarray(local_w, dtype=np.float64)
    global_w = np.asarray(global_w, dtype=np.float64)
    if local_w.shape != global_w.shape:
        raise ValueError("local and global weights must cover the same index set")
    if local_w.ndim == 2 and i is None:
        n = local_w.shape[0]
        ii, jj = np.meshgrid(np.arange(n), np.arange(local_w.shape[1]), indexing="ij")
        alpha = expit(p.beta * (jj - ii))
        mixed = alpha * local_w + (1.0 - alpha) * global_w
        return mixed / mixed.sum(axis=1, keepdims=True)
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    alpha = expit(p.beta * (j - i))
    mixed = alpha * local_w + (1.0 - alpha) * global_w
    z = np.bincount(i, weights=mixed)
    return mixed / z[i]


def membership(union: AttentionMask, part: AttentionMask) -> np.ndarray:
    """Boolean per entry of ``union``: is the pair also stored in ``part``."""
    u = union.codes()
    q = part.codes()
    pos = np.searchsorted(q, u)
    pos[pos == q.size] = 0
    return q[pos] == u


def hybrid_attention_forward(Q, K, V, mask: AttentionMask, in_local, in_global, beta: float):
    """Attention with separate local/global softmaxes mixed by :func:`hybrid_mix`.

    ``in_local``/``in_global`` flag which entries of ``mask`` belong to each
    component; every row must hold at least one entry of each.
    """
    _check_qkv(Q, K, V, mask)
    rows = mask.row_ids()
    cols = mask.indices.astype(np.int64)
    starts = mask.indptr[:-1]
    s = _scores(Q, K, rows, cols)
    a_loc = _segment_softmax(s, starts, rows, in_local)
    a_glb = _segment_softmax(s, starts, rows, in_global)
    alpha = expit(beta * (cols - rows))
    u = alpha * a_loc + (1.0 - alpha) * a_glb
    z = np.add.reduceat(u, starts)
    w = u / z[rows]
    out = _weighted_rows(w, V, rows, cols, starts, mask.n)
    cache = {"a_loc": a_loc, "a_glb": a_glb, "alpha": alpha, "z": z, "w": w}
    return out, cache


def hybrid_attention_backward(dout, Q, K, V, mask: AttentionMask, cache, beta: float):
    """Gradients ``(dQ, dK, dV, dbeta)`` of :func:`hybrid_attention_forward`."""
    n = mask.n
    rows = mask.row_ids()
    cols = mask.indices.astype(np.int64)
    starts = mask.indptr[:-1]
    w, alpha, z = cache["w"], cache["alpha"], cache["z"]
    a_loc, a_glb = cache["a_loc"], cache["a_glb"]
    dV = np.empty_like(V)
    for c in range(V.shape[1]):
        dV[:, c] = np.bincount(cols, weights=w * dout[rows, c], minlength=n)
    dw = _dprobs(dout, V, rows, cols)
    du = (dw - np.add.reduceat(w * dw, starts)[rows]) / z[rows]
    d_loc = alpha * du
    d_glb = (1.0 - alpha) * du
    dalpha = (a_loc - a_glb) * du
    dbeta = float(np.sum(dalpha * alpha * (1.0 - alpha) * (cols - rows)))
    ds = a_loc * (d_loc - np.add.reduceat(a_loc * d_loc, starts)[rows])
    ds += a_glb * (d_glb - np.add.reduceat(a_glb * d_glb, starts)[rows])
    dQ, dK = _scores_backward(ds, Q, K, rows, cols, n)
    return dQ, dK, dV, dbeta


def flop_account(mask: AttentionMask, d_model: int, heads: int) -> int:
    """Multiply-add count: ``2*nnz*d_head*heads + 4*n*d_model**2``."""
    if d_model % heads:
        raise ValueError("d_model must be divisible by heads")
    d_head = d_model // heads
    return 2 * mask.nnz * d_head * heads + 4 * mask.n * d_model * d_model
