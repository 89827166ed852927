"""Tiny noise-prediction network with hand-written reverse-mode gradients.

Architecture (pre-norm residual blocks)::

    h = z_t + (sinusoid(t) @ t_w + t_b)
    for each layer:
        h = h + Wo . SparseAttention(LN1(h))      # mask from the length bracket
        h = h + MoE(LN2(h))                       # router sees LN2(h) through a stop-gradient
    eps_pred = h @ head_w + head_b

Parameters live in a flat ``name -> ndarray`` dict so checkpointing, the
optimizer and gradient checks treat every tensor uniformly. ``embed`` is the
fixed token-embedding table used to map tokens to clean latents and back;
it is not trained.
"""

from __future__ import annotations

import copy
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import attention as attn
from .diffusion import (
    AnchorSet,
    LatentSeq,
    NoiseSchedule,
    build_anchor_targets,
    default_segment_count,
    q_sample,
    sas_loss_and_grad,
)
from .hsa import HSAConfig, cached_hsa_mask, cached_hsa_parts, decide_mode, init_phi, mask_local
from .moe import ExpertParams, RouterParams, expert_hidden, moe_layer_backward, moe_layer_forward
from .numerics import Rng, gaussian

CHECKPOINT_VERSION = 1
FROZEN = ("embed",)


@dataclass
class ModelConfig:
    vocab: int = 256
    d: int = 32
    layers: int = 2
    heads: int = 2
    d_ff: int = 64
    n_experts: int = 4
    k: int = 2
    capacities: tuple[float, ...] | None = None
    hsa: HSAConfig = field(default_factory=HSAConfig)
    phi_hidden: int = 16
    ln_eps: float = 1e-5
    hybrid: bool = True
    embed_scale: float = 1.0
    fixed_window: int = 0  # > 0: plain local band of this half-width in every layer instead of HSA

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.d % 2:
            raise ValueError("d must be even for the sinusoidal time encoding")
        if self.fixed_window < 0:
            raise ValueError("fixed_window must be >= 0")
        if not 1 <= self.k <= self.n_experts:
            raise ValueError("need 1 <= k <= n_experts")
        if self.capacities is None:
            self.capacities = tuple(1.0 if j % 2 == 0 else 0.5 for j in range(self.n_experts))
        self.capacities = tuple(float(c) for c in self.capacities)
        if len(self.capacities) != self.n_experts:
            raise ValueError("need one capacity multiplier per expert")
        if self.hsa.layers_L < self.layers:
            self.hsa = HSAConfig(**{**asdict(self.hsa), "layers_L": self.layers})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["capacities"] = list(self.capacities)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["hsa"] = HSAConfig(**data["hsa"])
        data["capacities"] = tuple(data["capacities"])
        return cls(**data)


@dataclass
class DenoiserParams:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(copy.deepcopy(self.cfg), {k: v.copy() for k, v in self.tensors.items()})

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if k not in FROZEN]

    def router(self, l: int) -> RouterParams:
        return RouterParams(self.tensors[f"L{l}.router_w"], self.tensors[f"L{l}.router_b"])

    def experts(self, l: int) -> list[ExpertParams]:
        t = self.tensors
        return [
            ExpertParams(t[f"L{l}.e{j}.w1"], t[f"L{l}.e{j}.b1"], t[f"L{l}.e{j}.w2"], t[f"L{l}.e{j}.b2"],
                         self.cfg.capacities[j])
            for j in range(self.cfg.n_experts)
        ]

    def phi(self) -> dict:
        t = self.tensors
        return {"w1": t["phi.w1"], "b1": t["phi.b1"], "w2": t["phi.w2"], "b2": t["phi.b2"]}

    def count(self, names=None) -> int:
        names = self.tensors if names is None else names
        return int(sum(self.tensors[k].size for k in names))

    def total_params(self) -> int:
        """All stored parameters, including the frozen embedding table."""
        return self.count()

    def expert_size(self, l: int, j: int) -> int:
        return self.count([f"L{l}.e{j}.{p}" for p in ("w1", "b1", "w2", "b2")])

    def router_params(self) -> int:
        """Gate weights and biases over all layers; these grow with the expert count."""
        return self.count([k for k in self.tensors if k.endswith((".router_w", ".router_b"))])

    def active_params(self) -> int:
        """Parameters a single token runs through: the backbone plus its k largest experts per layer.

        Router gates are excluded (see :meth:`router_params`), so the count
        depends on k and the expert sizes but not on how many experts exist.
        """
        skip = {k for k in self.tensors if (".e" in k and k.startswith("L")) or k.endswith((".router_w", ".router_b"))}
        active = self.count([k for k in self.tensors if k not in skip])
        for l in range(self.cfg.layers):
            sizes = sorted((self.expert_size(l, j) for j in range(self.cfg.n_experts)), reverse=True)
            active += sum(sizes[: self.cfg.k])
        return active


def init_params(cfg: ModelConfig, rng: Rng) -> DenoiserParams:
    d = cfg.d
    t: dict[str, np.ndarray] = {}
    t["embed"] = rng.normal((cfg.vocab, d)) * cfg.embed_scale
    t["t_w"] = rng.normal((d, d)) * (0.1 / math.sqrt(d))
    t["t_b"] = np.zeros(d)
    for l in range(cfg.layers):
        p = f"L{l}."
        t[p + "ln1_g"] = np.ones(d)
        t[p + "ln1_b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            t[p + name] = rng.normal((d, d)) / math.sqrt(d)
        t[p + "beta"] = np.zeros(1)
        t[p + "ln2_g"] = np.ones(d)
        t[p + "ln2_b"] = np.zeros(d)
        t[p + "router_w"] = rng.normal((d, cfg.n_experts)) / math.sqrt(d)
        t[p + "router_b"] = np.zeros(cfg.n_experts)
        for j, cap in enumerate(cfg.capacities):
            hidden = expert_hidden(cfg.d_ff, cap)
            t[p + f"e{j}.w1"] = rng.normal((d, hidden)) / math.sqrt(d)
            t[p + f"e{j}.b1"] = np.zeros(hidden)
            t[p + f"e{j}.w2"] = rng.normal((hidden, d)) / math.sqrt(hidden)
            t[p + f"e{j}.b2"] = np.zeros(d)
    t["head_w"] = rng.normal((d, d)) / math.sqrt(d)
    t["head_b"] = np.zeros(d)
    for k, v in init_phi(rng, d, cfg.phi_hidden).items():
        t[f"phi.{k}"] = v
    return DenoiserParams(cfg, t)


def time_encoding(t: int, d: int) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _layernorm(x, g, b, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dg, db


def layer_mask(cfg: ModelConfig, n: int, l: int):
    """Attention mask used by layer ``l`` at sequence length ``n``."""
    if cfg.fixed_window:
        return _fixed_local(n, cfg.fixed_window)
    return cached_hsa_mask(cfg.hsa, n, l)


@lru_cache(maxsize=16)
def _fixed_local(n: int, w: int):
    return mask_local(n, w)


def model_flops(cfg: ModelConfig, n: int) -> tuple[int, int]:
    """``(nnz, flops)`` of the attention sublayers summed over layers at length ``n``."""
    nnz = flops = 0
    for l in range(cfg.layers):
        mask = layer_mask(cfg, n, l)
        nnz += mask.nnz
        flops += attn.flop_account(mask, cfg.d, cfg.heads)
    return nnz, flops


def _attention_plan(params: DenoiserParams, n: int, l: int, x1: np.ndarray):
    cfg = params.cfg
    if cfg.fixed_window:
        return {"mode": "local", "mask": layer_mask(cfg, n, l), "decision": None}
    decision = decide_mode(cfg.hsa, n, x1.mean(axis=0), params.phi())
    mode = cfg.hsa.mode_for(n)
    if decision.active != mode:
        raise RuntimeError(f"mode decision {decision.active} disagrees with bracket {mode}")
    mask = cached_hsa_mask(cfg.hsa, n, l)
    plan = {"mode": mode, "mask": mask, "decision": decision}
    if mode == "16k+" and cfg.hybrid:
        _, local, glob = cached_hsa_parts(cfg.hsa, n, l)
        plan["in_local"] = attn.membership(mask, local)
        plan["in_global"] = attn.membership(mask, glob)
    return plan


def forward(params: DenoiserParams, zt, t: int | None = None, router_inputs=None,
            counter: Counter | None = None, return_cache: bool = False):
    """Noise prediction for latent ``zt`` (``LatentSeq`` or ``n x d`` array) at step ``t``.

    ``router_inputs`` optionally replaces each layer's router input with a
    fixed array; this realises the stop-gradient when differentiating
    numerically. ``counter`` tallies expert evaluations keyed ``(layer, j)``.
    """
    cfg = params.cfg
    P = params.tensors
    if isinstance(zt, LatentSeq):
        z, t = zt.z, zt.t if t is None else t
    else:
        z = np.asarray(zt, dtype=np.float64)
    if t is None:
        raise ValueError("timestep required")
    if z.ndim != 2 or z.shape[1] != cfg.d:
        raise ValueError(f"latent must be n x {cfg.d}, got {z.shape}")
    n, d = z.shape
    H = cfg.heads
    dh = d // H
    tenc = time_encoding(t, d)
    h = z + (tenc @ P["t_w"] + P["t_b"])
    caches = []
    for l in range(cfg.layers):
        p = f"L{l}."
        x1, ln1 = _layernorm(h, P[p + "ln1_g"], P[p + "ln1_b"], cfg.ln_eps)
        plan = _attention_plan(params, n, l, x1)
        Q, K, V = x1 @ P[p + "wq"], x1 @ P[p + "wk"], x1 @ P[p + "wv"]
        heads_out = np.empty((n, d))
        head_caches = []
        beta = float(P[p + "beta"][0])
        for hd in range(H):
            sl = slice(hd * dh, (hd + 1) * dh)
            if "in_local" in plan:
                o, c = attn.hybrid_attention_forward(Q[:, sl], K[:, sl], V[:, sl], plan["mask"],
                                                     plan["in_local"], plan["in_global"], beta)
            else:
                o, c = attn.attention_forward(Q[:, sl], K[:, sl], V[:, sl], plan["mask"])
            heads_out[:, sl] = o
            head_caches.append(c)
        h = h + heads_out @ P[p + "wo"]
        x2, ln2 = _layernorm(h, P[p + "ln2_g"], P[p + "ln2_b"], cfg.ln_eps)
        rx = x2 if router_inputs is None else router_inputs[l]
        layer_counter = Counter() if counter is not None else None
        y, moe_cache = moe_layer_forward(x2, params.router(l), params.experts(l), cfg.k,
                                         counter=layer_counter, router_x=rx)
        if counter is not None:
            for j, c in layer_counter.items():
                counter[(l, j)] += c
        h = h + y
        caches.append({"ln1": ln1, "x1": x1, "plan": plan, "Q": Q, "K": K, "V": V,
                       "heads_out": heads_out, "head_caches": head_caches, "ln2": ln2,
                       "moe": moe_cache, "router_x": rx})
    out = h @ P["head_w"] + P["head_b"]
    if not return_cache:
        return out
    return out, {"tenc": tenc, "h_final": h, "layers": caches}


def backward(params: DenoiserParams, cache: dict, upstream: np.ndarray, aux_coefs=None):
    """Gradients of ``sum(upstream * eps_pred)`` for every tensor.

    ``aux_coefs[l]`` is the per-expert derivative of the load-balancing loss
    with respect to each token's router probability at layer ``l``. Returns
    ``(grads, dz)`` with ``dz`` the gradient with respect to the input latent.
    Router logits pass no gradient into the hidden state, and experts a token
    was not routed to receive none from that token.
    """
    cfg = params.cfg
    P = params.tensors
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    d = cfg.d
    dh_size = d // cfg.heads
    grads["head_w"] = cache["h_final"].T @ upstream
    grads["head_b"] = upstream.sum(axis=0)
    dh = upstream @ P["head_w"].T
    for l in reversed(range(cfg.layers)):
        p = f"L{l}."
        c = cache["layers"][l]
        coef = None if aux_coefs is None else aux_coefs[l]
        dx2, mg = moe_layer_backward(dh, c["moe"], params.router(l), params.experts(l), coef)
        grads[p + "router_w"] = mg["W_gate"]
        grads[p + "router_b"] = mg["b_gate"]
        for j in range(cfg.n_experts):
            for src, dst in (("W1", "w1"), ("b1", "b1"), ("W2", "w2"), ("b2", "b2")):
                grads[p + f"e{j}.{dst}"] = mg[(j, src)]
        dxn, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layernorm_backward(dx2, P[p + "ln2_g"], c["ln2"])
        dh = dh + dxn
        grads[p + "wo"] = c["heads_out"].T @ dh
        dheads = dh @ P[p + "wo"].T
        dQ = np.empty_like(c["Q"])
        dK = np.empty_like(c["K"])
        dV = np.empty_like(c["V"])
        beta = float(P[p + "beta"][0])
        dbeta = 0.0
        plan = c["plan"]
        for hd in range(cfg.heads):
            sl = slice(hd * dh_size, (hd + 1) * dh_size)
            args = (dheads[:, sl], c["Q"][:, sl], c["K"][:, sl], c["V"][:, sl], plan["mask"], c["head_caches"][hd])
            if "in_local" in plan:
                dQ[:, sl], dK[:, sl], dV[:, sl], db = attn.hybrid_attention_backward(*args, beta)
                dbeta += db
            else:
                dQ[:, sl], dK[:, sl], dV[:, sl] = attn.attention_backward(*args)
        grads[p + "beta"] = np.array([dbeta])
        x1 = c["x1"]
        grads[p + "wq"] = x1.T @ dQ
        grads[p + "wk"] = x1.T @ dK
        grads[p + "wv"] = x1.T @ dV
        dx1 = dQ @ P[p + "wq"].T + dK @ P[p + "wk"].T + dV @ P[p + "wv"].T
        dxn, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layernorm_backward(dx1, P[p + "ln1_g"], c["ln1"])
        dh = dh + dxn
    dtemb = dh.sum(axis=0)
    grads["t_w"] = np.outer(cache["tenc"], dtemb)
    grads["t_b"] = dtemb
    return grads, dh


# training ------------------------------------------------------------------------------


@dataclass
class AnchorSpec:
    """How anchor targets are built for every training item."""

    timesteps: list[int]
    lambdas: list[float]
    segment_count: int | None = None  # None: max(1, n // 8)

    def build(self, z0: np.ndarray, sched: NoiseSchedule, rng: Rng) -> AnchorSet:
        segs = self.segment_count or default_segment_count(z0.shape[0])
        return build_anchor_targets(z0, sched, self.timesteps, segs, rng, self.lambdas)


@dataclass
class OptimConfig:
    lr: float = 1e-4
    warmup: int = 5000
    weight_decay: float = 0.01
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_at(self, step: int) -> float:
        """Learning rate for optimizer step ``step`` (1-based), linear warm-up."""
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup)


@dataclass
class TrainState:
    params: DenoiserParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    rng: Rng
    optim: OptimConfig = field(default_factory=OptimConfig)


def init_state(params: DenoiserParams, rng: Rng, optim: OptimConfig | None = None) -> TrainState:
    zeros = {k: np.zeros_like(params[k]) for k in params.trainable()}
    return TrainState(params, zeros, {k: z.copy() for k, z in zeros.items()}, 0, rng, optim or OptimConfig())


def batch_loss_and_grads(params: DenoiserParams, batch, sched: NoiseSchedule, anchor_sets,
                         lambda_aux: float, router_inputs=None, need_grads: bool = True):
    """Total loss ``L_diffusion + L_SAS + L_aux`` over a batch and its gradients.

    ``batch`` is a list of ``(z0, t, eps)``; ``anchor_sets[i]`` is the
    :class:`AnchorSet` for item ``i`` (or ``None``). The noise and anchor
    terms are averaged over items; the load-balancing term uses dispatch
    fractions and router probabilities pooled over every token in the batch
    and is averaged over layers.
    """
    cfg = params.cfg
    M = cfg.n_experts
    items = []
    ri_out = []
    for b, (z0, t, eps) in enumerate(batch):
        zt = q_sample(z0, t, eps, sched)
        ri = None if router_inputs is None else router_inputs[b]
        eps_pred, cache = forward(params, zt, t, router_inputs=ri, return_cache=True)
        ri_out.append([c["router_x"] for c in cache["layers"]])
        items.append((zt, eps, eps_pred, cache))
    B = len(batch)
    l_diff = l_sas = 0.0
    upstreams = []
    for b, (zt, eps, eps_pred, cache) in enumerate(items):
        N = eps.size
        l_diff += float(np.mean((eps_pred - eps) ** 2)) / B
        up = 2.0 * (eps_pred - eps) / N / B
        anchors = anchor_sets[b] if anchor_sets is not None else None
        if anchors is not None and anchors.timesteps:
            ls, gs = sas_loss_and_grad(zt, eps_pred, anchors, anchors.eps_primes, sched)
            l_sas += ls / B
            up = up + gs / B
        upstreams.append(up)
    # load balancing, pooled per layer over all tokens in the batch
    l_aux = 0.0
    aux_coefs = []
    f_layers = []
    for l in range(cfg.layers):
        topk = np.concatenate([c["layers"][l]["moe"]["gating"].topk for *_, c in items])
        probs = np.concatenate([c["layers"][l]["moe"]["probs"] for *_, c in items])
        N_tok, k = topk.shape
        f = np.bincount(topk.reshape(-1), minlength=M) / (N_tok * k)
        Pm = probs.mean(axis=0)
        l_aux += lambda_aux * M * float(f @ Pm) / cfg.layers
        aux_coefs.append(lambda_aux * M * f / N_tok / cfg.layers)
        f_layers.append(f)
    total = l_diff + l_sas + l_aux
    metrics = {"loss": total, "l_diff": l_diff, "l_sas": l_sas, "l_aux": l_aux,
               "dispatch": np.mean(f_layers, axis=0)}
    if not need_grads:
        return metrics, None, ri_out
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for (zt, eps, eps_pred, cache), up in zip(items, upstreams):
        g, _ = backward(params, cache, up, aux_coefs)
        for k, v in g.items():
            grads[k] += v
    for k in FROZEN:
        grads[k][...] = 0.0
    return metrics, grads, ri_out


def train_step(state: TrainState, batch, sched: NoiseSchedule, anchors,
               lambda_aux: float = 0.01):
    """One optimizer step: loss, global-norm clipping, AdamW update with warm-up.

    ``anchors`` is an :class:`AnchorSpec` (targets drawn fresh from
    ``state.rng``), a prebuilt list of :class:`AnchorSet` (one per item, for
    a fixed batch) or ``None``.

    Weight decay is decoupled and applied to matrices only (not to biases,
    norms or scalars). Returns ``(state, metrics)``; ``state`` is updated in
    place.
    """
    if not batch:
        raise ValueError("empty batch")
    params = state.params
    anchor_sets = None
    if isinstance(anchors, (list, tuple)):
        anchor_sets = list(anchors)
    elif anchors is not None and anchors.timesteps:
        anchor_sets = [anchors.build(np.asarray(z0), sched, state.rng) for z0, _, _ in batch]
    metrics, grads, _ = batch_loss_and_grads(params, batch, sched, anchor_sets, lambda_aux)
    names = params.trainable()
    gnorm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
    if not (math.isfinite(metrics["loss"]) and math.isfinite(gnorm)):
        dump = json.dumps({k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in metrics.items()})
        bad = [k for k in names if not np.all(np.isfinite(grads[k]))]
        raise FloatingPointError(f"non-finite loss at step {state.step + 1}: {dump}; bad grads: {bad}")
    opt = state.optim
    scale = opt.clip / gnorm if opt.clip and gnorm > opt.clip else 1.0
    state.step += 1
    lr = opt.lr_at(state.step)
    bc1 = 1.0 - opt.beta1**state.step
    bc2 = 1.0 - opt.beta2**state.step
    for k in names:
        g = grads[k] * scale
        m = state.m[k]
        v = state.v[k]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if lr == 0.0:
            continue
        theta = params.tensors[k]
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        if theta.ndim >= 2:
            update = update + opt.weight_decay * theta
        theta -= lr * update
    metrics.update(grad_norm=gnorm, lr=lr, step=state.step)
    return state, metrics


# checkpoints ---------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState) -> None:
    """Write a versioned ``.npz``: every named tensor plus optimizer moments and metadata."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": state.params.cfg.to_dict(),
        "optim": asdict(state.optim),
        "step": state.step,
        "rng": state.rng.get_state(),
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for k, v in state.params.tensors.items():
        arrays[f"param/{k}"] = v
    for k in state.m:
        arrays[f"adam_m/{k}"] = state.m[k]
        arrays[f"adam_v/{k}"] = state.v[k]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> TrainState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        tensors, m, v = {}, {}, {}
        for key in data.files:
            kind, _, name = key.partition("/")
            if kind == "param":
                tensors[name] = data[key].copy()
            elif kind == "adam_m":
                m[name] = data[key].copy()
            elif kind == "adam_v":
                v[name] = data[key].copy()
    cfg = ModelConfig.from_dict(meta["model"])
    rng = Rng(meta["rng"]["seed"], _key=tuple(meta["rng"]["key"]))
    rng.set_state(meta["rng"])
    return TrainState(DenoiserParams(cfg, tensors), m, v, meta["step"], rng, OptimConfig(**meta["optim"]))


def round_to_tokens(z0: np.ndarray, embed: np.ndarray) -> np.ndarray:
    """Nearest embedding row (Euclidean) for every latent position."""
    d2 = (z0**2).sum(axis=1)[:, None] - 2.0 * z0 @ embed.T + (embed**2).sum(axis=1)[None, :]
    return np.argmin(d2, axis=1)


def make_eps_fn(params: DenoiserParams):
    return lambda z, t: forward(params, z, t)


def random_batch(params: DenoiserParams, tokens_list, sched: NoiseSchedule, rng: Rng):
    """``(z0, t, eps)`` triples for token sequences: embedded, random step, fresh noise."""
    batch = []
    for toks in tokens_list:
        z0 = params["embed"][np.asarray(toks)]
        t = int(rng.integers(1, sched.T + 1))
        batch.append((z0, t, gaussian(rng, *z0.shape)))
    return batch
