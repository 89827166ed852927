"""Length-adaptive sparse attention masks.

Four mask families are selected by sequence length:

* ``dense``  (n <= n1): every token sees every token.
* ``4k``     (n1 < n <= n2): local band of half-width ``w4k`` plus ``ceil(sqrt(n))``
  evenly spaced global tokens.
* ``8k``     (n2 < n <= n3): dilated lattice with per-layer dilation plus
  ``ceil(sqrt(n))`` global tokens.
* ``16k+``   (n > n3): stride-``s_meta`` lattice over a ``w16k`` super-window plus
  ``min(ceil(rho*n), anchor_cap)`` semantic anchors.

Global/anchor tokens are symmetric: anchor rows attend to every column and
every row attends to all anchors. Masks are stored in CSR form (``indptr``,
``indices``) with strictly increasing columns per row; a row always contains
its own index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .numerics import softmax

MODES = ("dense", "4k", "8k", "16k+")
_CEIL_TOL = 1e-9


def _ceil(x: float) -> int:
    # 0.05 * 100 == 5.000000000000001 in binary floating point
    return math.ceil(x - _CEIL_TOL)


def _ceil_sqrt(n: int) -> int:
    return 0 if n == 0 else math.isqrt(n - 1) + 1


@dataclass(frozen=True)
class HSAConfig:
    n1: int = 512
    n2: int = 4096
    n3: int = 8192
    w4k: int = 256
    w8k: int = 512
    stride_s: int = 4
    layers_L: int = 12
    w16k: int = 1024
    s_meta: int = 8
    rho: float = 0.05
    anchor_cap: int = 512
    scale_c: float = 4.0

    def __post_init__(self):
        if not 0 < self.n1 < self.n2 < self.n3:
            raise ValueError(f"thresholds must satisfy 0 < n1 < n2 < n3, got {self.n1}, {self.n2}, {self.n3}")
        for name in ("w4k", "w8k", "stride_s", "layers_L", "w16k", "s_meta", "anchor_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")

    def mode_for(self, n: int) -> str:
        """Length bracket for ``n``; brackets are half-open ``(lo, hi]``."""
        if n < 1:
            raise ValueError("sequence length must be >= 1")
        if n <= self.n1:
            return "dense"
        if n <= self.n2:
            return "4k"
        if n <= self.n3:
            return "8k"
        return "16k+"

    def length_ranges(self) -> dict[str, tuple[int, float]]:
        return {
            "dense": (0, self.n1),
            "4k": (self.n1, self.n2),
            "8k": (self.n2, self.n3),
            "16k+": (self.n3, math.inf),
        }

    def global_span(self, n: int) -> int:
        """Effective global span ``min(n, c * n / log2 n)``; reporting only."""
        if n < 2:
            return n
        return int(min(n, self.scale_c * n / math.log2(n)))


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Row-sparse boolean ``n x n`` allow-set in CSR layout."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    mode: str = "custom"

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def rows(self) -> list[np.ndarray]:
        return [self.row(i) for i in range(self.n)]

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry (length ``nnz``)."""
        return np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.indptr)

    def codes(self) -> np.ndarray:
        """Globally sorted ``row * n + col`` codes of the stored entries."""
        return self.row_ids() * self.n + self.indices.astype(np.int64)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=bool)
        out[self.row_ids(), self.indices] = True
        return out

    def same_pattern(self, other: "AttentionMask") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def validate(self) -> None:
        if self.indptr.shape != (self.n + 1,) or self.indptr[0] != 0:
            raise ValueError("malformed indptr")
        if self.indices.size != self.nnz:
            raise ValueError("nnz does not match stored indices")
        if self.nnz and (self.indices.min() < 0 or self.indices.max() >= self.n):
            raise ValueError("column index out of range")
        lengths = self.row_lengths()
        if np.any(lengths < 1):
            raise ValueError("every row must be non-empty")
        steps = np.diff(self.indices.astype(np.int64))
        row_starts = self.indptr[1:-1]
        interior = np.ones(steps.size, dtype=bool)
        interior[row_starts[row_starts > 0] - 1] = False
        if np.any(steps[interior] <= 0):
            raise ValueError("rows must be strictly increasing")

    def dumps(self) -> str:
        """Text dump: ``n=<n> nnz=<nnz> mode=<tag>`` then ``<row>: <cols>`` per row."""
        lines = [f"n={self.n} nnz={self.nnz} mode={self.mode}"]
        for i in range(self.n):
            lines.append(f"{i}: " + " ".join(map(str, self.row(i).tolist())))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "AttentionMask":
        lines = text.strip("\n").split("\n")
        header = dict(tok.split("=", 1) for tok in lines[0].split())
        n = int(header["n"])
        rows = []
        for i, line in enumerate(lines[1:]):
            idx, _, cols = line.partition(":")
            if int(idx) != i:
                raise ValueError(f"row {i} out of order in mask dump")
            rows.append(np.array(cols.split(), dtype=np.int64))
        if len(rows) != n:
            raise ValueError(f"mask dump has {len(rows)} rows, header says {n}")
        mask = from_rows(n, rows, mode=header.get("mode", "custom"))
        if mask.nnz != int(header["nnz"]):
            raise ValueError("nnz in header does not match rows")
        return mask


def _index_dtype(n: int):
    return np.int32 if n < 2**31 - 1 else np.int64


def from_rows(n: int, rows: Sequence[Sequence[int]], mode: str = "custom") -> AttentionMask:
    """Build a mask from per-row column lists (sorted and deduplicated here)."""
    clean = [np.unique(np.asarray(r, dtype=np.int64)) for r in rows]
    lengths = np.array([len(r) for r in clean], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    indices = (np.concatenate(clean) if clean else np.zeros(0)).astype(_index_dtype(n))
    mask = AttentionMask(n, indptr, indices, mode)
    mask.validate()
    return mask


def from_dense(grid: np.ndarray, mode: str = "custom") -> AttentionMask:
    grid = np.asarray(grid, dtype=bool)
    n = grid.shape[0]
    rows, cols = np.nonzero(grid)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))]).astype(np.int64)
    return AttentionMask(n, indptr, cols.astype(_index_dtype(n)), mode)


def _from_candidates(
    n: int,
    cand: np.ndarray,
    full_rows: np.ndarray | None = None,
    mode: str = "custom",
) -> AttentionMask:
    """Assemble a mask from an ``n x c`` candidate table.

    Entries outside ``[0, n)`` are discarded, duplicates within a row are
    removed, and each row in ``full_rows`` is replaced by the whole range.
    """
    dt = _index_dtype(n)
    cand = np.asarray(cand)
    cand = np.where((cand >= 0) & (cand < n), cand, n).astype(np.int64 if dt is np.int64 else np.int32)
    cand.sort(axis=1)
    keep = cand < n
    keep[:, 1:] &= cand[:, 1:] != cand[:, :-1]
    counts = keep.sum(axis=1).astype(np.int64)
    full = np.zeros(n, dtype=bool)
    if full_rows is not None and len(full_rows):
        full[np.asarray(full_rows, dtype=np.int64)] = True
        counts[full] = n
        keep[full] = False
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.empty(int(indptr[-1]), dtype=dt)
    rank = np.cumsum(keep, axis=1) - 1
    r, c = np.nonzero(keep)
    indices[indptr[r] + rank[r, c]] = cand[r, c]
    del rank, r, c
    full_range = np.arange(n, dtype=dt)
    for i in np.flatnonzero(full):
        indices[indptr[i]:indptr[i] + n] = full_range
    return AttentionMask(n, indptr, indices, mode)


def mask_dense(n: int) -> AttentionMask:
    if n < 1:
        raise ValueError("mask_dense requires n >= 1")
    dt = _index_dtype(n)
    indptr = np.arange(0, n * n + 1, n, dtype=np.int64)
    indices = np.tile(np.arange(n, dtype=dt), n)
    return AttentionMask(n, indptr, indices, "dense")


def mask_local(n: int, w: int) -> AttentionMask:
    """Band mask: row ``i`` holds ``{j : |i - j| <= w}`` clipped to ``[0, n)``."""
    if n < 1 or w < 0:
        raise ValueError("mask_local requires n >= 1 and w >= 0")
    i = np.arange(n, dtype=np.int64)
    lo = np.maximum(0, i - w)
    hi = np.minimum(n - 1, i + w)
    counts = hi - lo + 1
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    # entry e in row r has column lo[r] + (e - indptr[r])
    rows = np.repeat(i, counts)
    indices = (lo[rows] + np.arange(indptr[-1]) - indptr[rows]).astype(_index_dtype(n))
    return AttentionMask(n, indptr, indices, "local")


def _dilated_offsets(w: int, stride: int, dilation: int) -> np.ndarray:
    step = stride * dilation
    kmax = w // (2 * step)
    return np.arange(-kmax, kmax + 1, dtype=np.int64) * step


def mask_dilated(n: int, w: int, stride: int, dilation: int) -> AttentionMask:
    """Row ``i`` holds ``i + k*stride*dilation`` for ``|k| <= w // (2*stride*dilation)``."""
    if n < 1 or w < 1 or stride < 1 or dilation < 1:
        raise ValueError("mask_dilated requires n, w, stride, dilation >= 1")
    offs = _dilated_offsets(w, stride, dilation)
    cand = np.arange(n, dtype=np.int64)[:, None] + offs[None, :]
    return _from_candidates(n, cand, mode="dilated")


def _check_anchors(n: int, anchors) -> np.ndarray:
    a = np.unique(np.asarray(anchors, dtype=np.int64))
    if a.size and (a[0] < 0 or a[-1] >= n):
        raise ValueError(f"anchor index out of range for n={n}")
    return a


def _with_anchors(n: int, base: np.ndarray, anchors: np.ndarray, mode: str) -> AttentionMask:
    # base: n x c candidate table; anchors appended to every row, anchor rows made full
    if anchors.size:
        cand = np.concatenate([base, np.broadcast_to(anchors, (n, anchors.size))], axis=1)
    else:
        cand = base
    return _from_candidates(n, cand, full_rows=anchors, mode=mode)


def _band(n: int, w: int) -> np.ndarray:
    w = min(w, n - 1)
    return np.arange(n, dtype=np.int64)[:, None] + np.arange(-w, w + 1, dtype=np.int64)[None, :]


def mask_global(n: int, anchors, local_w: int) -> AttentionMask:
    """Local band of half-width ``local_w`` plus symmetric global anchors."""
    if n < 1 or local_w < 0:
        raise ValueError("mask_global requires n >= 1 and local_w >= 0")
    a = _check_anchors(n, anchors)
    return _with_anchors(n, _band(n, local_w), a, "global")


def evenly_spaced(n: int, count: int) -> np.ndarray:
    """``floor(n*m/count)`` for ``m = 0..count-1``, deduplicated and sorted."""
    count = min(count, n)
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    m = np.arange(count, dtype=np.int64)
    return np.unique((n * m) // count)


def pick_anchors(n: int, rho: float, anchor_cap: int) -> np.ndarray:
    """Evenly spaced anchors; count ``min(ceil(rho*n), anchor_cap, n)``."""
    if n < 1:
        raise ValueError("pick_anchors requires n >= 1")
    count = min(_ceil(rho * n), anchor_cap, n)
    return evenly_spaced(n, count)


def mask_union(a: AttentionMask, b: AttentionMask) -> AttentionMask:
    if a.n != b.n:
        raise ValueError("cannot union masks of different sizes")
    codes = np.union1d(a.codes(), b.codes())
    n = a.n
    rows = codes // n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return AttentionMask(n, indptr, (codes % n).astype(_index_dtype(n)), a.mode)


def layer_dilation(layer_index: int) -> int:
    """Per-layer dilation ``2 ** (layer_index mod 4)``, cycling 1, 2, 4, 8."""
    return 2 ** (layer_index % 4)


def global_tokens(n: int) -> np.ndarray:
    """``ceil(sqrt(n))`` evenly spaced global tokens (4k and 8k brackets)."""
    return evenly_spaced(n, _ceil_sqrt(n))


def hsa_parts(cfg: HSAConfig, n: int, layer_index: int = 0):
    """Constituents of the mask for ``n``: ``(mode, local_part, global_part)``.

    ``local_part`` is the band/lattice component, ``global_part`` the
    symmetric anchor component (with only the diagonal as its local band).
    Both are ``None`` in the dense bracket. Their union is the full mask.
    """
    mode = cfg.mode_for(n)
    if not 0 <= layer_index < cfg.layers_L:
        raise ValueError(f"layer_index {layer_index} outside [0, {cfg.layers_L})")
    if mode == "dense":
        return mode, None, None
    if mode == "4k":
        local = mask_local(n, cfg.w4k)
        anchors = global_tokens(n)
    elif mode == "8k":
        local = mask_dilated(n, cfg.w8k, cfg.stride_s, layer_dilation(layer_index))
        anchors = global_tokens(n)
    else:
        local = mask_dilated(n, cfg.w16k, cfg.s_meta, 1)
        anchors = pick_anchors(n, cfg.rho, cfg.anchor_cap)
    return mode, local, mask_global(n, anchors, 0)


def build_hsa_mask(cfg: HSAConfig, n: int, layer_index: int = 0) -> AttentionMask:
    """Mask for sequence length ``n`` at layer ``layer_index``."""
    mode = cfg.mode_for(n)
    if not 0 <= layer_index < cfg.layers_L:
        raise ValueError(f"layer_index {layer_index} outside [0, {cfg.layers_L})")
    if mode == "dense":
        return mask_dense(n)
    if mode == "4k":
        base = _band(n, cfg.w4k)
        anchors = global_tokens(n)
    elif mode == "8k":
        offs = _dilated_offsets(cfg.w8k, cfg.stride_s, layer_dilation(layer_index))
        base = np.arange(n, dtype=np.int64)[:, None] + offs[None, :]
        anchors = global_tokens(n)
    else:
        offs = _dilated_offsets(cfg.w16k, cfg.s_meta, 1)
        base = np.arange(n, dtype=np.int64)[:, None] + offs[None, :]
        anchors = pick_anchors(n, cfg.rho, cfg.anchor_cap)
    return _with_anchors(n, base, anchors, mode)


@lru_cache(maxsize=64)
def cached_hsa_mask(cfg: HSAConfig, n: int, layer_index: int) -> AttentionMask:
    return build_hsa_mask(cfg, n, layer_index)


@lru_cache(maxsize=64)
def cached_hsa_parts(cfg: HSAConfig, n: int, layer_index: int):
    return hsa_parts(cfg, n, layer_index)


@dataclass
class ModeDecision:
    probs: np.ndarray
    active: str
    scores: np.ndarray = field(repr=False, default=None)


def mode_logits(h_bar: np.ndarray, phi: dict) -> np.ndarray:
    """Two-layer perceptron ``relu(h W1 + b1) W2 + b2`` producing 4 mode logits."""
    h_bar = np.asarray(h_bar, dtype=np.float64)
    if phi["w1"].shape[0] != h_bar.shape[-1]:
        raise ValueError(f"phi expects features of width {phi['w1'].shape[0]}, got {h_bar.shape[-1]}")
    hidden = np.maximum(h_bar @ phi["w1"] + phi["b1"], 0.0)
    return hidden @ phi["w2"] + phi["b2"]


def decide_mode(cfg: HSAConfig, n: int, h_bar: np.ndarray, phi: dict) -> ModeDecision:
    """Mode probabilities from the decision net, gated by the length brackets.

    The active mode maximises ``prob * [n in range]``; among equal scores the
    sparser (later) mode wins.
    """
    probs = softmax(mode_logits(h_bar, phi))
    ranges = cfg.length_ranges()
    gate = np.array([1.0 if lo < n <= hi else 0.0 for lo, hi in (ranges[m] for m in MODES)])
    if not gate.any():
        raise RuntimeError(f"no attention mode covers n={n}")
    scores = probs * gate
    best = np.flatnonzero(scores == scores.max())[-1]
    return ModeDecision(probs=probs, active=MODES[best], scores=scores)


def init_phi(rng, d: int, hidden: int = 16, scale: float = 0.1) -> dict:
    return {
        "w1": rng.normal((d, hidden)) * scale,
        "b1": np.zeros(hidden),
        "w2": rng.normal((hidden, len(MODES))) * scale,
        "b2": np.zeros(len(MODES)),
    }


def fit_exponent(lengths: Sequence[int], counts: Sequence[float]) -> float:
    """Least-squares slope of ``log count`` against ``log length``."""
    if len(lengths) < 3:
        raise ValueError("need at least 3 points to fit a scaling exponent")
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(counts, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def nnz_scaling_fit(
    cfg: HSAConfig,
    lengths: Sequence[int],
    mask_fn: Callable[[int], AttentionMask] | None = None,
) -> float:
    """Fitted log-log exponent of mask nnz over ``lengths``.

    With the default builder every length must sit in the ``16k+`` bracket.
    """
    if len(lengths) < 3:
        raise ValueError("need at least 3 lengths")
    if mask_fn is None:
        if any(n <= cfg.n3 for n in lengths):
            raise ValueError(f"all lengths must exceed n3={cfg.n3}")
        mask_fn = lambda n: build_hsa_mask(cfg, n, 0)  # noqa: E731
    counts = []
    for n in lengths:
        counts.append(mask_fn(n).nnz)
    return fit_exponent(lengths, counts)
