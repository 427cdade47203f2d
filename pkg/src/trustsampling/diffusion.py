"""DDPM/DDIM arithmetic on 64-bit floats.

Timesteps are 1-based (``1..T``); ``alpha_cum_at(0)`` is defined as 1 so that
a DDIM step landing on clean data is well-defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep betas and their cumulative products.

    ``beta[i]`` and ``alpha_cum[i]`` hold the values for timestep ``i + 1``.
    """

    beta: np.ndarray
    alpha_cum: np.ndarray = field(init=False)
    kind: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size == 0:
            raise ValueError("beta must be a nonempty 1-D array")
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ValueError("every beta must lie in (0, 1)")
        alpha_cum = np.cumprod(1.0 - beta)
        if np.any(np.diff(alpha_cum) >= 0.0) or alpha_cum[-1] <= 0.0:
            raise ValueError("alpha_cum must be strictly decreasing and positive")
        beta.setflags(write=False)
        alpha_cum.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_cum", alpha_cum)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def alpha_cum_at(self, t: int) -> float:
        """Cumulative alpha at timestep ``t`` with ``alpha_cum_at(0) == 1``."""
        t = int(t)
        if t == 0:
            return 1.0
        _check_timestep(t, self.T)
        return float(self.alpha_cum[t - 1])


def linear_beta_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(beta, kind="linear", beta_start=float(beta_start), beta_end=float(beta_end))


def cosine_beta_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule (Nichol & Dhariwal); optional alternative to the linear default."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    beta = np.clip(1.0 - f[1:] / f[:-1], 1e-8, max_beta)
    return NoiseSchedule(beta, kind="cosine")


def make_schedule(kind: str, T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if kind == "linear":
        return linear_beta_schedule(T, beta_start, beta_end)
    if kind == "cosine":
        return cosine_beta_schedule(T)
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class StepGrid:
    """Decreasing DDIM sub-sequence ``tau_K > ... > tau_1``.

    ``pairs()`` yields ``(tau_k, tau_{k-1})`` from the noisiest step down,
    with ``tau_0 = 0``.
    """

    indices: tuple[int, ...]
    eta: float = 1.0

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("step grid must be nonempty")
        if any(a <= b for a, b in zip(idx, idx[1:])):
            raise ValueError("step grid indices must be strictly decreasing")
        if idx[-1] < 1:
            raise ValueError("step grid indices must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        object.__setattr__(self, "indices", idx)

    @property
    def K(self) -> int:
        return len(self.indices)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.indices, self.indices[1:] + (0,)))

    def validate_for(self, schedule: NoiseSchedule) -> None:
        if self.indices[0] > schedule.T:
            raise ValueError(f"grid reaches t={self.indices[0]} but schedule has T={schedule.T}")


def uniform_grid(T: int, K: int, eta: float = 1.0) -> StepGrid:
    """K timesteps evenly spaced over ``1..T``, always including ``T`` and ``1``."""
    if K < 1 or K > T:
        raise ValueError(f"need 1 <= K <= T, got K={K}, T={T}")
    if K == 1:
        return StepGrid((int(T),), eta)
    ts = np.rint(np.linspace(T, 1, K)).astype(int)
    return StepGrid(tuple(int(t) for t in ts), eta)


def _check_timestep(t: int, T: int) -> None:
    if not (1 <= t <= T):
        raise ValueError(f"timestep {t} outside 1..{T}")


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def forward_diffuse(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_dims(x0, eps)
    _check_timestep(t, s.T)
    a = s.alpha_cum_at(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps


def predict_x0(x_t, eps_pred, t: int, s: NoiseSchedule) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    _check_dims(x_t, eps_pred)
    _check_timestep(t, s.T)
    a = s.alpha_cum_at(t)
    return (x_t - math.sqrt(1.0 - a) * eps_pred) / math.sqrt(a)


def sigma_ddpm(step: tuple[int, int], s: NoiseSchedule, eta: float) -> float:
    t_cur, t_prev = step
    if t_prev >= t_cur:
        raise ValueError(f"step must decrease, got {step}")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    return sigma_from_alphas(s.alpha_cum_at(t_prev), s.alpha_cum_at(t_cur), eta)


def sigma_from_alphas(alpha_prev: float, alpha_cur: float, eta: float) -> float:
    """DDIM sigma for cumulative alphas of the destination and source levels."""
    ratio = 1.0 - alpha_cur / alpha_prev
    if ratio <= 0.0:
        return 0.0
    return eta * math.sqrt((1.0 - alpha_prev) / (1.0 - alpha_cur)) * math.sqrt(ratio)


def ddim_mean(x_t, eps_pred, step: tuple[int, int], sigma: float, s: NoiseSchedule) -> np.ndarray:
    t_cur, t_prev = step
    a_prev = s.alpha_cum_at(t_prev)
    coef2 = 1.0 - a_prev - sigma * sigma
    if coef2 < 0.0:
        # sigma**2 == 1 - a_prev can round slightly negative
        if coef2 < -1e-12:
            raise ValueError(f"sigma^2={sigma * sigma} exceeds 1 - alpha_prev={1.0 - a_prev}")
        coef2 = 0.0
    x0_hat = predict_x0(x_t, eps_pred, t_cur, s)
    return math.sqrt(a_prev) * x0_hat + math.sqrt(coef2) * np.asarray(eps_pred, dtype=np.float64)
