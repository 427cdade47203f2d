"""Budget-matched reference samplers: DPS, DSG and LGD-MC.

These are simplified reference reimplementations. Each DDIM step costs two
network passes: the base denoising pass at ``x_t`` and one guidance pass at
the DDIM mean, where a single gradient step is taken before noise is added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constraints import Constraint, guidance_gradient
from .diffusion import NoiseSchedule, StepGrid, ddim_mean, predict_x0, sigma_ddpm
from .trust import ChainStreams, SampleTrace, _check_finite, _dim_of, _normalized_step, _TraceBuilder

METHODS = ("dps", "dsg", "lgd_mc")


@dataclass(frozen=True)
class BaselineConfig:
    method: str
    grid: StepGrid
    guidance_scale: float = 1.0
    mc_particles: int | None = None
    mc_radius_scale: float | None = None
    seed: int = 0
    # dsg only: "sphere" scales by sqrt(d) * DDPM sigma, "constant" uses guidance_scale as is
    dsg_step: str = "sphere"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline {self.method!r}")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be nonnegative")
        has_mc = self.mc_particles is not None or self.mc_radius_scale is not None
        if self.method == "lgd_mc":
            if self.mc_particles is None or self.mc_radius_scale is None:
                raise ValueError("lgd_mc needs mc_particles and mc_radius_scale")
            if self.mc_particles < 1 or self.mc_radius_scale < 0:
                raise ValueError("mc_particles must be >= 1 and mc_radius_scale >= 0")
        elif has_mc:
            raise ValueError(f"mc_* fields only apply to lgd_mc, not {self.method}")
        if self.dsg_step not in ("sphere", "constant"):
            raise ValueError(f"unknown dsg_step {self.dsg_step!r}")

    @property
    def nfe_budget(self) -> int:
        return 2 * self.grid.K


def log_mean_exp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.mean(np.exp(a - m), axis=axis))


def mc_surrogate(con: Constraint, x0_hat: np.ndarray, radius: float, xi: np.ndarray):
    """Monte-Carlo smoothed loss ``-log mean_i exp(-L(x0_hat + radius * xi_i))``.

    ``x0_hat`` is ``(n, d)`` and ``xi`` is ``(n, P, d)``. Returns the surrogate
    ``(n,)`` and its gradient with respect to ``x0_hat`` ``(n, d)``.
    """
    n, P, d = xi.shape
    particles = x0_hat[:, None, :] + radius * xi
    flat = particles.reshape(n * P, d)
    losses = np.asarray(con.loss(flat)).reshape(n, P)
    grads = np.asarray(con.grad_x0(flat)).reshape(n, P, d)
    surrogate = -log_mean_exp(-losses, axis=1)
    shifted = -losses - np.max(-losses, axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=1, keepdims=True)
    return surrogate, np.einsum("np,npd->nd", weights, grads)


def _run(model, con: Constraint, s: NoiseSchedule, cfg: BaselineConfig, n_chains: int, update):
    d = _dim_of(model, con)
    grid = cfg.grid
    grid.validate_for(s)
    streams = ChainStreams.from_seed(cfg.seed, n_chains)
    tb = _TraceBuilder(n_chains, grid.K)
    tb.j_limit[:] = 1
    tb.j_used[:] = 1
    x = streams.normals(d)
    rows = np.arange(n_chains)
    for k, step in enumerate(grid.pairs()):
        t = step[0]
        tb.t[k] = t
        eps = np.atleast_2d(model.forward(x, t))
        tb.loss_before[:, k] = np.atleast_1d(con.loss(predict_x0(x, eps, t, s)))
        sigma = sigma_ddpm(step, s, grid.eta)
        mu = ddim_mean(x, eps, step, sigma, s)
        mu, loss, e = update(mu, step, streams)
        tb.loss_after[:, k] = loss
        tb.record_norms(k, rows, np.linalg.norm(e, axis=1))
        x = mu + sigma * streams.normals(d)
        _check_finite(x, f"t={t}")
    return x, tb.build()


def dps_sample(model, con: Constraint, s: NoiseSchedule, cfg: BaselineConfig, n_chains: int = 1):
    """One gradient step ``x <- x - zeta grad`` per DDIM step, ``zeta = scale / sqrt(L)``."""

    def update(mu, step, streams):
        grad, loss, e = guidance_gradient(model, con, mu, step[0], s)
        zeta = cfg.guidance_scale / (np.sqrt(loss) + 1e-8)
        return mu - zeta[:, None] * grad, loss, e

    return _run(model, con, s, cfg, n_chains, update)


def dsg_step_size(cfg: BaselineConfig, step, s: NoiseSchedule, dim: int) -> float:
    if cfg.dsg_step == "constant":
        return cfg.guidance_scale
    # radius of the spherical Gaussian shell of the DDPM posterior noise
    return cfg.guidance_scale * math.sqrt(dim) * sigma_ddpm(step, s, 1.0)


def dsg_sample(model, con: Constraint, s: NoiseSchedule, cfg: BaselineConfig, n_chains: int = 1):
    """One normalized gradient step per DDIM step with a sphere-radius step size."""

    def update(mu, step, streams):
        grad, loss, e = guidance_gradient(model, con, mu, step[0], s)
        out, _ = _normalized_step(mu, grad, dsg_step_size(cfg, step, s, mu.shape[1]))
        return out, loss, e

    return _run(model, con, s, cfg, n_chains, update)


def lgd_mc_radius(t: int, s: NoiseSchedule, scale: float) -> float:
    a = s.alpha_cum_at(t)
    return scale * math.sqrt((1.0 - a) / a)


def lgd_mc_sample(model, con: Constraint, s: NoiseSchedule, cfg: BaselineConfig, n_chains: int = 1):
    """DPS-style step on a Monte-Carlo smoothed loss over perturbed ``x0_hat`` particles.

    Particles share one ``x0_hat`` so the gradient still needs only one network pass.
    """
    P = int(cfg.mc_particles)

    def update(mu, step, streams):
        t = step[0]
        e, vjp = model.forward_with_vjp_fn(mu, t)
        e = np.atleast_2d(e)
        x0_hat = predict_x0(mu, e, t, s)
        # one child generator per step: the first m particles do not depend on P,
        # so runs that differ only in P share their leading particles
        xi = np.stack([np.random.default_rng(g.integers(2**63)).standard_normal((P, mu.shape[1]))
                       for g in streams.particles])
        surrogate, g0 = mc_surrogate(con, x0_hat, lgd_mc_radius(t, s, cfg.mc_radius_scale), xi)
        a = s.alpha_cum_at(t)
        grad = (g0 - math.sqrt(1.0 - a) * vjp(g0)) / math.sqrt(a)
        zeta = cfg.guidance_scale / (np.sqrt(surrogate) + 1e-8)
        return mu - zeta[:, None] * grad, surrogate, e

    return _run(model, con, s, cfg, n_chains, update)


SAMPLERS = {"dps": dps_sample, "dsg": dsg_sample, "lgd_mc": lgd_mc_sample}


def baseline_sample(model, con: Constraint, s: NoiseSchedule, cfg: BaselineConfig, n_chains: int = 1):
    return SAMPLERS[cfg.method](model, con, s, cfg, n_chains)


__all__ = [
    "BaselineConfig", "SampleTrace", "baseline_sample", "dps_sample", "dsg_sample", "lgd_mc_radius",
    "lgd_mc_sample", "log_mean_exp", "mc_surrogate",
]
