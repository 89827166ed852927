"""Numeric substrate: stable softmax, seeded Gaussian streams, gradient checking.

Everything runs in float64. ``NEG_INF`` is the sentinel for masked-out scores;
it is a true IEEE ``-inf`` rather than a large negative number, so masked
entries get exactly zero probability.
"""

from __future__ import annotations

import json
from typing import Callable

import numpy as np

NEG_INF = -np.inf


def softmax_row(v) -> np.ndarray:
    """Softmax of a 1-D vector, stabilised by max subtraction.

    ``-inf`` entries map to exactly 0. Raises ``ValueError`` when every entry
    is ``-inf`` (a row with nothing to attend to).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("softmax_row expects a non-empty 1-D vector")
    if np.any(np.isnan(v)) or np.any(v == np.inf):
        raise ValueError("softmax_row entries must be finite or -inf")
    finite = np.isfinite(v)
    if not finite.any():
        raise ValueError("empty attention row")
    m = v[finite].max()
    e = np.zeros_like(v)
    e[finite] = np.exp(v[finite] - m)
    return e / e.sum()


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row-wise softmax over a dense array (no -inf handling beyond numpy's)."""
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _to_json(obj):
    if isinstance(obj, dict):
        return {k: _to_json(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__u64__": [int(x) for x in obj]}
    return obj


def _from_json(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__u64__"}:
            return np.array(obj["__u64__"], dtype=np.uint64)
        return {k: _from_json(v) for k, v in obj.items()}
    return obj


class Rng:
    """Seeded, counter-based random stream.

    Backed by numpy's Philox-4x64 bit generator keyed by ``seed``. Disjoint
    streams for parallel shards come from :meth:`stream`, which re-keys the
    generator with ``(seed, index)`` so streams never overlap. The full state
    (key + counter) serialises to JSON for checkpoint/resume.

    Single-owner mutable state: pass it between threads, do not share it.
    """

    def __init__(self, seed: int = 0, _key: tuple[int, ...] | None = None):
        self.seed = int(seed)
        key = _key if _key is not None else (self.seed,)
        self._key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(list(self._key))
        self._bitgen = np.random.Philox(ss)
        self.gen = np.random.Generator(self._bitgen)

    def stream(self, index: int) -> "Rng":
        """Independent stream number ``index`` derived from this generator's key."""
        return Rng(self.seed, _key=self._key + (int(index),))

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def get_state(self) -> dict:
        """Plain-JSON state: uint64 arrays become lists of ints."""
        return {"seed": self.seed, "key": list(self._key), "bitgen": _to_json(self._bitgen.state)}

    def set_state(self, state: dict) -> None:
        self._bitgen.state = _from_json(state["bitgen"])

    def dumps(self) -> str:
        return json.dumps(self.get_state(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "Rng":
        state = json.loads(text)
        rng = cls(state["seed"], _key=tuple(state["key"]))
        rng.set_state(state)
        return rng


def gaussian(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """``rows x cols`` matrix of i.i.d. standard normals drawn from ``rng``."""
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian needs rows, cols >= 1, got {rows}x{cols}")
    return rng.normal((rows, cols))


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: np.ndarray,
    x: np.ndarray,
    h: float = 1e-4,
) -> float:
    """Max relative error between central differences of ``f`` and ``analytic_grad``.

    Relative error per entry is ``|numeric - analytic| / (|analytic| + 1e-8)``.
    ``x`` is perturbed in place and restored, so ``f`` may close over it.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != x.shape:
        raise ValueError(f"gradient shape {analytic_grad.shape} != x shape {x.shape}")
    if not x.flags.c_contiguous:
        raise ValueError("grad_check perturbs x in place; pass a C-contiguous array")
    flat = x.reshape(-1)
    ana = analytic_grad.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite f evaluation at flat index {i}")
        num = (fp - fm) / (2.0 * h)
        err = abs(num - ana[i]) / (abs(ana[i]) + 1e-8)
        worst = max(worst, err)
    return worst
