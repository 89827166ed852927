"""Deterministic reduced-step reverse samplers.

``order=1`` is the DDIM update driven by the one-step clean-latent estimate.
``order=2`` is the second-order multistep solver in data-prediction form: the
clean-latent estimate is extrapolated linearly in ``lambda = log(sqrt(ab) /
sqrt(1 - ab))`` from the last two estimates to the midpoint of the current
step, then plugged into the same DDIM reconstruction. The first step and the
final step onto ``t = 0`` fall back to first order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion import AnchorSet, LatentSeq, NoiseSchedule, estimate_z0
from .numerics import Rng, gaussian

EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class SamplerConfig:
    steps_S: int
    timestep_grid: list[int]
    order: int = 2

    def __post_init__(self):
        g = list(self.timestep_grid)
        if len(g) < 2 or g[-1] != 0 or any(b >= a for a, b in zip(g, g[1:])):
            raise ValueError("timestep grid must be strictly decreasing and end at 0")
        if self.steps_S != len(g) - 1:
            raise ValueError("steps_S must equal len(timestep_grid) - 1")
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")


def make_grid(T: int, S: int, spacing: str = "uniform", sched: NoiseSchedule | None = None) -> list[int]:
    """Decreasing timestep grid from ``T`` to 0 with at most ``S`` steps.

    ``spacing="uniform"`` is uniform in ``t``; ``"log_alpha_bar"`` is uniform in
    ``log alpha_bar`` (needs ``sched``). Duplicate integer timesteps collapse.
    """
    if not 1 <= S <= T:
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    if spacing == "uniform":
        grid = np.rint(np.linspace(T, 0, S + 1)).astype(int)
    elif spacing == "log_alpha_bar":
        if sched is None:
            raise ValueError("log_alpha_bar spacing needs the schedule")
        log_ab = np.log(sched.ab(np.arange(T + 1)))
        targets = np.linspace(log_ab[-1], 0.0, S + 1)
        # log_ab is decreasing in t; search on its negation
        grid = np.searchsorted(-log_ab, -targets, side="left")
        grid = np.clip(grid, 0, T)
        grid[0], grid[-1] = T, 0
    else:
        raise ValueError(f"unknown grid spacing {spacing!r}")
    out = []
    for t in grid.tolist():
        if not out or t < out[-1]:
            out.append(t)
    return out


def make_config(T: int, S: int, order: int = 2, spacing: str = "uniform",
                sched: NoiseSchedule | None = None) -> SamplerConfig:
    grid = make_grid(T, S, spacing, sched)
    return SamplerConfig(len(grid) - 1, grid, order)


def _ddim_from_x0(z, x0, t_from: int, t_to: int, sched: NoiseSchedule) -> np.ndarray:
    ab_from = sched.ab(t_from)
    ab_to = sched.ab(t_to)
    eps = (z - np.sqrt(ab_from) * x0) / np.sqrt(1.0 - ab_from)
    return np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * eps


def ddim_step(zt: LatentSeq, eps_pred, t_from: int, t_to: int, sched: NoiseSchedule) -> LatentSeq:
    """``sqrt(ab_to) * z0_hat + sqrt(1 - ab_to) * eps_pred``."""
    if t_to > t_from:
        raise ValueError("ddim_step moves backwards in time: need t_to <= t_from")
    if t_to == t_from:
        return LatentSeq(zt.z.copy(), t_from)
    x0 = estimate_z0(LatentSeq(zt.z, t_from), eps_pred, sched)
    ab_to = sched.ab(t_to)
    return LatentSeq(np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * np.asarray(eps_pred), t_to)


def _lam(ab: float) -> float:
    return 0.5 * (np.log(ab) - np.log1p(-ab))


def multistep2_step(zt: LatentSeq, history: Sequence[tuple[np.ndarray, int]], t_to: int,
                    sched: NoiseSchedule) -> LatentSeq:
    """Second-order multistep update from the current state ``zt``.

    ``history`` holds ``(z0_estimate, t)`` pairs, oldest first; the last pair
    must belong to ``zt.t``. With one entry (or when landing on ``t = 0``) the
    update is first order.
    """
    if not history:
        raise ValueError("multistep2_step needs at least one history entry")
    x0_cur, t_cur = history[-1]
    if t_cur != zt.t:
        raise ValueError("last history entry must match the current timestep")
    if t_to == t_cur:
        return LatentSeq(zt.z.copy(), t_cur)
    if len(history) < 2 or t_to == 0:
        return LatentSeq(_ddim_from_x0(zt.z, x0_cur, t_cur, t_to, sched), t_to)
    x0_prev, t_prev = history[-2]
    lam_prev = _lam(sched.ab(t_prev))
    lam_cur = _lam(sched.ab(t_cur))
    lam_to = _lam(sched.ab(t_to))
    h = lam_to - lam_cur
    h_prev = lam_cur - lam_prev
    x0_mid = x0_cur + (h / (2.0 * h_prev)) * (x0_cur - x0_prev)
    return LatentSeq(_ddim_from_x0(zt.z, x0_mid, t_cur, t_to, sched), t_to)


def sample(eps_fn: EpsFn, n: int, d: int, cfg: SamplerConfig, sched: NoiseSchedule, rng: Rng,
           guidance: tuple[AnchorSet, float] | None = None, z_init: np.ndarray | None = None) -> np.ndarray:
    """Run the configured sampler from Gaussian noise down to ``t = 0``.

    ``eps_fn(z, t)`` returns the noise prediction. ``guidance=(anchors, eta)``
    optionally nudges the state toward each anchor target when the grid
    crosses its timestep (``z -= 2*eta*(z - target)``); off by default.
    """
    grid = cfg.timestep_grid
    if grid[0] > sched.T:
        raise ValueError("grid starts beyond the schedule length")
    z = gaussian(rng, n, d) if z_init is None else np.array(z_init, dtype=np.float64)
    history: list[tuple[np.ndarray, int]] = []
    for t_from, t_to in zip(grid, grid[1:]):
        state = LatentSeq(z, t_from)
        eps = eps_fn(z, t_from)
        x0 = estimate_z0(state, eps, sched)
        history.append((x0, t_from))
        if cfg.order == 1:
            z = _ddim_from_x0(z, x0, t_from, t_to, sched)
        else:
            z = multistep2_step(state, history[-2:], t_to, sched).z
        if guidance is not None:
            anchors, eta = guidance
            for t_k, target in zip(anchors.timesteps, anchors.targets):
                if t_from > t_k >= t_to:
                    z = z - 2.0 * eta * (z - target)
    return z


def gaussian_oracle(sched: NoiseSchedule) -> EpsFn:
    """Optimal noise predictor for unit-Gaussian data: ``sqrt(1 - ab_t) * z``."""
    return lambda z, t: np.sqrt(1.0 - sched.ab(t)) * z


def point_mass_oracle(z0: np.ndarray, sched: NoiseSchedule) -> EpsFn:
    """Exact noise for data concentrated on ``z0``."""
    return lambda z, t: (z - np.sqrt(sched.ab(t)) * z0) / np.sqrt(1.0 - sched.ab(t))
