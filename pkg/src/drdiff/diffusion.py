"""Noise schedules, the closed-form forward process and the anchor-state loss.

Schedules are stored for ``t = 1..T``; ``alpha_bar(0) == 1`` denotes clean
data. All four kinds clip ``beta`` into ``(0, 0.999]``.

Loss norms are per-entry means: both the noise-prediction loss and each
anchor term are averaged over the ``n x d`` entries so they share a scale.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, gaussian

SCHEDULE_KINDS = ("linear", "exponential", "cosine", "sqrt")
BETA_MAX = 0.999
BETA_MIN = 1e-12
COSINE_S = 0.008
SQRT_S = 1e-4
DEGENERATE_ALPHA_BAR = 1e-12


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t):
        """``alpha_bar`` at integer timestep(s) ``t`` in ``[0, T]`` (``ab(0) == 1``)."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.T):
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        out = padded[t_arr]
        return float(out) if np.ndim(out) == 0 else out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,beta,alpha,alpha_bar\n")
        for t in range(self.T):
            buf.write(f"{t + 1},{float(self.beta[t])!r},{float(self.alpha[t])!r},{float(self.alpha_bar[t])!r}\n")
        return buf.getvalue()


def _from_alpha_bar(kind: str, T: int, ab: np.ndarray) -> NoiseSchedule:
    prev = np.concatenate([[1.0], ab[:-1]])
    beta = 1.0 - ab / prev
    return _from_beta(kind, T, beta)


def _from_beta(kind: str, T: int, beta: np.ndarray) -> NoiseSchedule:
    beta = np.clip(np.asarray(beta, dtype=np.float64), BETA_MIN, BETA_MAX)
    alpha = 1.0 - beta
    return NoiseSchedule(kind, T, beta, alpha, np.cumprod(alpha))


def make_schedule(kind: str = "sqrt", T: int = 2048) -> NoiseSchedule:
    """Build a schedule of ``T`` steps.

    * ``linear``: beta evenly spaced over ``[1e-4, 0.02]``
    * ``exponential``: beta geometrically spaced over ``[1e-4, 0.05]``
    * ``cosine``: ``alpha_bar(t) = f(t)/f(0)``, ``f(t) = cos^2((t/T + s)/(1 + s) * pi/2)``, ``s = 0.008``
    * ``sqrt``: ``alpha_bar(t) = 1 - sqrt(t/T + 1e-4)``

    The beta-spaced kinds scale both endpoints by ``1000/T`` (identity at
    ``T = 1000``) so the total injected noise, and hence ``alpha_bar(T)``, does
    not depend on ``T``.
    """
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    scale = 1000.0 / T
    t = np.arange(1, T + 1, dtype=np.float64)
    if kind == "linear":
        return _from_beta(kind, T, np.linspace(1e-4, 0.02, T) * scale)
    if kind == "exponential":
        return _from_beta(kind, T, np.geomspace(1e-4, 0.05, T) * scale)
    if kind == "cosine":
        f = lambda u: np.cos((u / T + COSINE_S) / (1 + COSINE_S) * np.pi / 2) ** 2  # noqa: E731
        return _from_alpha_bar(kind, T, f(t) / f(0.0))
    if kind == "sqrt":
        return _from_alpha_bar(kind, T, 1.0 - np.sqrt(t / T + SQRT_S))
    raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


@dataclass
class LatentSeq:
    z: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ValueError("latent must be an n x d matrix")


def _z(x) -> np.ndarray:
    return x.z if isinstance(x, LatentSeq) else np.asarray(x, dtype=np.float64)


def q_sample(z0, t: int, eps, sched: NoiseSchedule) -> LatentSeq:
    """``sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps``."""
    z0 = _z(z0)
    eps = np.asarray(eps, dtype=np.float64)
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must be in [1, {sched.T}], got {t}")
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    ab = sched.ab(t)
    return LatentSeq(np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps, t)


def q_step(z_prev, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """One Markov step ``z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps``."""
    b = sched.beta[t - 1]
    return np.sqrt(1.0 - b) * _z(z_prev) + np.sqrt(b) * np.asarray(eps)


def diffusion_loss(eps_true, eps_pred) -> float:
    eps_true = np.asarray(eps_true, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps_true.shape != eps_pred.shape:
        raise ValueError("shape mismatch in diffusion_loss")
    return float(np.mean((eps_true - eps_pred) ** 2))


def estimate_z0(zt: LatentSeq, eps_pred, sched: NoiseSchedule) -> np.ndarray:
    """Invert the forward process in one step: ``(z_t - sqrt(1-ab) eps) / sqrt(ab)``."""
    ab = sched.ab(zt.t)
    if ab < DEGENERATE_ALPHA_BAR:
        raise FloatingPointError(f"degenerate inversion: alpha_bar({zt.t}) = {ab:.3g}")
    return (zt.z - np.sqrt(1.0 - ab) * np.asarray(eps_pred)) / np.sqrt(ab)


def project_to_anchor(zt: LatentSeq, eps_pred, t_k: int, eps_prime, sched: NoiseSchedule) -> np.ndarray:
    """Estimated clean latent re-noised to timestep ``t_k`` with ``eps_prime``."""
    if not 0 < t_k < sched.T:
        raise ValueError(f"anchor timestep must lie in (0, {sched.T}), got {t_k}")
    ab_k = sched.ab(t_k)
    return np.sqrt(ab_k) * estimate_z0(zt, eps_pred, sched) + np.sqrt(1.0 - ab_k) * np.asarray(eps_prime)


def segment_skeleton(z0, segment_count: int) -> np.ndarray:
    """Replace every row by the mean of its segment.

    Segments have length ``n // segment_count``; the last one absorbs the
    remainder.
    """
    z0 = _z(z0)
    n = z0.shape[0]
    if not 1 <= segment_count <= n:
        raise ValueError(f"segment_count must lie in [1, {n}], got {segment_count}")
    size = n // segment_count
    seg = np.minimum(np.arange(n) // size, segment_count - 1)
    sums = np.zeros((segment_count, z0.shape[1]))
    np.add.at(sums, seg, z0)
    counts = np.bincount(seg, minlength=segment_count)
    return (sums / counts[:, None])[seg]


def default_segment_count(n: int) -> int:
    return max(1, n // 8)


def default_anchor_timesteps(T: int) -> list[int]:
    return [T // 4, T // 2, (3 * T) // 4]


@dataclass
class AnchorSet:
    timesteps: list[int]
    targets: list[np.ndarray]
    lambdas: list[float]
    eps_primes: list[np.ndarray] = field(default_factory=list)
    skeleton: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.timesteps) == len(self.targets) == len(self.lambdas)):
            raise ValueError("anchor timesteps, targets and lambdas must have equal length")
        if any(b <= a for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise ValueError("anchor timesteps must be strictly increasing")
        if any(lam < 0 for lam in self.lambdas):
            raise ValueError("anchor weights must be non-negative")


def build_anchor_targets(z0, sched: NoiseSchedule, timesteps, segment_count: int, rng: Rng,
                         lambdas=0.5) -> AnchorSet:
    """Noised segment-mean skeletons of ``z0`` at each anchor timestep.

    One ``eps_prime`` is drawn per anchor and kept on the returned set so the
    projection side of :func:`sas_loss` can reuse it.
    """
    z0 = _z(z0)
    skel = segment_skeleton(z0, segment_count)
    timesteps = [int(t) for t in timesteps]
    for t_k in timesteps:
        if not 0 < t_k < sched.T:
            raise ValueError(f"anchor timestep must lie in (0, {sched.T}), got {t_k}")
    if np.isscalar(lambdas):
        lambdas = [float(lambdas)] * len(timesteps)
    eps_primes = [gaussian(rng, *z0.shape) for _ in timesteps]
    targets = [
        np.sqrt(sched.ab(t_k)) * skel + np.sqrt(1.0 - sched.ab(t_k)) * e
        for t_k, e in zip(timesteps, eps_primes)
    ]
    return AnchorSet(timesteps, targets, list(lambdas), eps_primes, skel)


def sas_loss(zt: LatentSeq, eps_pred, anchors: AnchorSet, shared_eps_prime, sched: NoiseSchedule) -> float:
    """``sum_k lambda_k * mean((projection_k - target_k)^2)``."""
    loss, _ = sas_loss_and_grad(zt, eps_pred, anchors, shared_eps_prime, sched)
    return loss


def sas_loss_and_grad(zt: LatentSeq, eps_pred, anchors: AnchorSet, shared_eps_prime,
                      sched: NoiseSchedule):
    """Anchor loss and its gradient with respect to ``eps_pred``."""
    if len(shared_eps_prime) != len(anchors.timesteps):
        raise ValueError("need exactly one eps_prime per anchor")
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    ab_t = sched.ab(zt.t)
    dproj = -np.sqrt(1.0 - ab_t) / np.sqrt(ab_t)
    loss = 0.0
    grad = np.zeros_like(eps_pred)
    N = eps_pred.size
    for t_k, target, lam, e in zip(anchors.timesteps, anchors.targets, anchors.lambdas, shared_eps_prime):
        diff = project_to_anchor(zt, eps_pred, t_k, e, sched) - target
        loss += lam * float(np.mean(diff**2))
        grad += lam * (2.0 / N) * diff * np.sqrt(sched.ab(t_k)) * dproj
    return loss, grad
