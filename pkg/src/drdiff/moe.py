"""Top-k routed mixture-of-experts feed-forward layer.

Row-vector convention throughout: a token ``h`` has shape ``(d,)`` and a batch
of tokens ``(n, d)``; affine maps are ``h @ W + b``.

The router reads its input through a stop-gradient: its parameters are
trained, but no gradient flows from the logits back into ``h``. Experts
outside a token's top-k are never evaluated for that token.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .numerics import softmax


@dataclass
class RouterParams:
    W_gate: np.ndarray  # d x M
    b_gate: np.ndarray  # M

    @property
    def n_experts(self) -> int:
        return self.b_gate.shape[0]


@dataclass
class ExpertParams:
    W1: np.ndarray  # d x hidden
    b1: np.ndarray
    W2: np.ndarray  # hidden x d
    b2: np.ndarray
    capacity_mult: float = 1.0


@dataclass
class GatingOutput:
    logits: np.ndarray
    topk: np.ndarray
    weights: np.ndarray


@dataclass
class LoadStats:
    f: np.ndarray
    P: np.ndarray
    lambda_aux: float = 0.01


def expert_hidden(d_ff: int, capacity_mult: float) -> int:
    return max(1, int(np.floor(capacity_mult * d_ff)))


def init_expert(rng, d: int, d_ff: int, capacity_mult: float = 1.0) -> ExpertParams:
    hidden = expert_hidden(d_ff, capacity_mult)
    return ExpertParams(
        W1=rng.normal((d, hidden)) / np.sqrt(d),
        b1=np.zeros(hidden),
        W2=rng.normal((hidden, d)) / np.sqrt(hidden),
        b2=np.zeros(d),
        capacity_mult=capacity_mult,
    )


def route(h: np.ndarray, p: RouterParams) -> np.ndarray:
    """Router logits ``h @ W_gate + b_gate`` (``h`` is treated as a constant)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != p.W_gate.shape[0]:
        raise ValueError(f"router expects width {p.W_gate.shape[0]}, got {h.shape[-1]}")
    return h @ p.W_gate + p.b_gate


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits; ties go to the lower index."""
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def topk_gate(logits, k: int) -> GatingOutput:
    """Softmax over the top-k logits, exact zeros elsewhere.

    Works on a single logit vector or a batch of shape ``(n, M)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    M = logits.shape[-1]
    if not 1 <= k <= M:
        raise ValueError(f"k must satisfy 1 <= k <= {M}, got {k}")
    idx = topk_indices(logits, k)
    sel = np.take_along_axis(logits, idx, axis=-1)
    g = softmax(sel, axis=-1)
    weights = np.zeros_like(logits)
    np.put_along_axis(weights, idx, g, axis=-1)
    return GatingOutput(logits=logits, topk=idx, weights=weights)


def expert_forward(h, e: ExpertParams, counter: Counter | None = None, key=None) -> np.ndarray:
    """``relu(h @ W1 + b1) @ W2 + b2`` for one token or a batch."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != e.W1.shape[0]:
        raise ValueError(f"expert expects width {e.W1.shape[0]}, got {h.shape[-1]}")
    if counter is not None:
        counter[key] += 1 if h.ndim == 1 else h.shape[0]
    return np.maximum(h @ e.W1 + e.b1, 0.0) @ e.W2 + e.b2


def moe_forward(h, router: RouterParams, experts: list[ExpertParams], k: int,
                counter: Counter | None = None):
    """Weighted sum of the selected experts' outputs.

    ``h`` may be a single token or an ``(n, d)`` batch. Each token is sent
    only to its own top-k experts; ``counter`` (if given) tallies token
    evaluations per expert index.
    """
    if not experts:
        raise ValueError("need at least one expert")
    if router.n_experts != len(experts):
        raise ValueError("router width does not match number of experts")
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    x = h[None, :] if single else h
    gating = topk_gate(route(x, router), k)
    out = np.zeros_like(x)
    for j, e in enumerate(experts):
        tok = np.flatnonzero((gating.topk == j).any(axis=1))
        if tok.size:
            y = expert_forward(x[tok], e, counter, key=j)
            out[tok] += gating.weights[tok, j, None] * y
    if single:
        return out[0], GatingOutput(gating.logits[0], gating.topk[0], gating.weights[0])
    return out, gating


def dispatch_counts(topk: np.ndarray, M: int) -> np.ndarray:
    return np.bincount(np.asarray(topk).reshape(-1), minlength=M).astype(np.float64)


def load_stats(topk: np.ndarray, probs: np.ndarray, lambda_aux: float = 0.01) -> LoadStats:
    """Dispatch fractions and mean router probabilities for a token batch.

    ``topk`` is ``(N, k)``, ``probs`` the full router softmax ``(N, M)``.
    ``f`` is normalised to sum to 1 (each token counts ``k`` dispatches).
    """
    topk = np.asarray(topk)
    N, k = topk.shape
    M = probs.shape[1]
    f = dispatch_counts(topk, M) / (N * k)
    P = probs.mean(axis=0)
    return LoadStats(f=f, P=P, lambda_aux=lambda_aux)


def load_balance_loss(stats: LoadStats) -> float:
    """``lambda_aux * M * sum_j f_j P_j``; equals ``lambda_aux`` under uniform routing."""
    M = stats.f.shape[0]
    return float(stats.lambda_aux * M * np.dot(stats.f, stats.P))


# batched layer used by the denoiser -------------------------------------------------


def moe_layer_forward(x, router: RouterParams, experts: list[ExpertParams], k: int,
                      counter: Counter | None = None, router_x=None):
    """Batched MoE forward returning ``(y, cache)`` for :func:`moe_layer_backward`.

    ``router_x`` (default ``x``) is what the router reads; passing a frozen
    copy makes the stop-gradient explicit for finite-difference checks.
    """
    rx = x if router_x is None else router_x
    logits = route(rx, router)
    gating = topk_gate(logits, k)
    probs = softmax(logits, axis=-1)
    y = np.zeros_like(x)
    per_expert = []
    for j, e in enumerate(experts):
        tok = np.flatnonzero((gating.topk == j).any(axis=1))
        if tok.size == 0:
            per_expert.append(None)
            continue
        if counter is not None:
            counter[j] += tok.size
        xj = x[tok]
        pre = xj @ e.W1 + e.b1
        act = np.maximum(pre, 0.0)
        out = act @ e.W2 + e.b2
        y[tok] += gating.weights[tok, j, None] * out
        per_expert.append((tok, pre, act, out))
    cache = {"x": x, "router_x": rx, "gating": gating, "probs": probs, "per_expert": per_expert}
    return y, cache


def moe_layer_backward(dy, cache, router: RouterParams, experts: list[ExpertParams],
                       aux_coef: np.ndarray | None = None):
    """Backward of :func:`moe_layer_forward`.

    ``aux_coef`` is ``d L_aux / d probs[token, j]`` (same for every token in
    the batch: ``lambda_aux * M * f_j / N``). Returns ``(dx, grads)`` where
    ``dx`` excludes the router path (stop-gradient) and ``grads`` maps
    ``"W_gate"``, ``"b_gate"`` and ``(j, name)`` to arrays.
    """
    x = cache["x"]
    gating = cache["gating"]
    probs = cache["probs"]
    dx = np.zeros_like(x)
    dweights = np.zeros_like(gating.weights)
    grads: dict = {}
    for j, e in enumerate(experts):
        g = {n: np.zeros_like(getattr(e, n)) for n in ("W1", "b1", "W2", "b2")}
        entry = cache["per_expert"][j]
        if entry is not None:
            tok, pre, act, out = entry
            gw = gating.weights[tok, j, None]
            dweights[tok, j] = np.einsum("td,td->t", dy[tok], out)
            dout = gw * dy[tok]
            g["W2"] = act.T @ dout
            g["b2"] = dout.sum(axis=0)
            dpre = (dout @ e.W2.T) * (pre > 0)
            g["W1"] = x[tok].T @ dpre
            g["b1"] = dpre.sum(axis=0)
            dx[tok] += dpre @ e.W1.T
        for n, v in g.items():
            grads[(j, n)] = v
    w = gating.weights
    # softmax restricted to top-k: nonselected weights are 0 and stay 0
    dlogits = w * (dweights - np.sum(w * dweights, axis=1, keepdims=True))
    if aux_coef is not None:
        dprobs = np.broadcast_to(aux_coef, probs.shape)
        dlogits = dlogits + probs * (dprobs - np.sum(probs * dprobs, axis=1, keepdims=True))
    grads["W_gate"] = cache["router_x"].T @ dlogits
    grads["b_gate"] = dlogits.sum(axis=0)
    return dx, grads
