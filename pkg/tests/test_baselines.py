import math

import numpy as np
import pytest

from trustsampling.baselines import (
    BaselineConfig,
    baseline_sample,
    dsg_step_size,
    lgd_mc_radius,
    log_mean_exp,
    mc_surrogate,
)
from trustsampling.constraints import EqualityObservation
from trustsampling.denoiser import DenoiserModel
from trustsampling.diffusion import uniform_grid
from trustsampling.trust import SamplerConfig, TrustSchedule, ddim_sample, trust_sample


@pytest.fixture(scope="module")
def tiny():
    return DenoiserModel.init(2, hidden=(16, 16), time_embed_dim=8, seed=21)


@pytest.fixture(scope="module")
def pin():
    return EqualityObservation.from_mask([0], [0.8], 2)


GRID = uniform_grid(1000, 25)


def test_config_validation():
    with pytest.raises(ValueError):
        BaselineConfig("dpx", GRID)
    with pytest.raises(ValueError):
        BaselineConfig("dps", GRID, guidance_scale=-1.0)
    with pytest.raises(ValueError):
        BaselineConfig("lgd_mc", GRID, 1.0)
    with pytest.raises(ValueError):
        BaselineConfig("dps", GRID, 1.0, mc_particles=4, mc_radius_scale=0.1)
    with pytest.raises(ValueError):
        BaselineConfig("lgd_mc", GRID, 1.0, mc_particles=0, mc_radius_scale=0.1)
    with pytest.raises(ValueError):
        BaselineConfig("dsg", GRID, 1.0, dsg_step="ring")


@pytest.mark.parametrize("method,extra", [("dps", {}), ("dsg", {}),
                                          ("lgd_mc", {"mc_particles": 5, "mc_radius_scale": 0.1})])
def test_nfe_is_two_per_step(tiny, pin, schedule, method, extra):
    cfg = BaselineConfig(method, GRID, 0.1, seed=1, **extra)
    _, traces = baseline_sample(tiny, pin, schedule, cfg, 3)
    assert cfg.nfe_budget == 50
    assert all(tr.total_nfe == 50 for tr in traces)


@pytest.mark.parametrize("method,extra", [("dps", {}), ("dsg", {}),
                                          ("lgd_mc", {"mc_particles": 5, "mc_radius_scale": 0.1})])
def test_zero_scale_is_unguided(tiny, pin, schedule, method, extra):
    x, _ = baseline_sample(tiny, pin, schedule, BaselineConfig(method, GRID, 0.0, seed=4, **extra), 6)
    assert x.tobytes() == ddim_sample(tiny, schedule, GRID, 6, seed=4).tobytes()


@pytest.mark.parametrize("method,extra", [("dps", {}), ("dsg", {}),
                                          ("lgd_mc", {"mc_particles": 5, "mc_radius_scale": 0.1})])
def test_reproducible(tiny, pin, schedule, method, extra):
    cfg = BaselineConfig(method, GRID, 0.05, seed=9, **extra)
    a, _ = baseline_sample(tiny, pin, schedule, cfg, 4)
    b, _ = baseline_sample(tiny, pin, schedule, cfg, 4)
    assert a.tobytes() == b.tobytes()


def test_dsg_reduces_to_trust(tiny, pin, schedule):
    d, dt = baseline_sample(tiny, pin, schedule, BaselineConfig("dsg", GRID, 0.07, seed=3, dsg_step="constant"), 8)
    t, tt = trust_sample(tiny, pin, schedule, SamplerConfig(GRID, TrustSchedule.constant(1), w=0.07, seed=3), 8)
    assert d.tobytes() == t.tobytes()
    assert [x.total_nfe for x in dt] == [x.total_nfe for x in tt]


def test_dsg_sphere_step(schedule):
    cfg = BaselineConfig("dsg", GRID, 0.5)
    from trustsampling.diffusion import sigma_ddpm

    step = GRID.pairs()[3]
    assert dsg_step_size(cfg, step, schedule, 4) == pytest.approx(0.5 * 2 * sigma_ddpm(step, schedule, 1.0))


def test_dps_step_rule(tiny, pin, schedule):
    # one DDIM step: the guided mean differs from the unguided one by zeta * grad
    from trustsampling.constraints import guidance_gradient
    from trustsampling.diffusion import ddim_mean, sigma_ddpm
    from trustsampling.trust import ChainStreams

    grid = uniform_grid(1000, 1)
    x, _ = baseline_sample(tiny, pin, schedule, BaselineConfig("dps", grid, 0.2, seed=2), 1)
    streams = ChainStreams.from_seed(2, 1)
    xT = streams.normals(2)
    step = grid.pairs()[0]
    sigma = sigma_ddpm(step, schedule, 1.0)
    mu = ddim_mean(xT, tiny.forward(xT, 1000), step, sigma, schedule)
    g, loss, _ = guidance_gradient(tiny, pin, mu, 1000, schedule)
    expected = mu - (0.2 / (np.sqrt(loss) + 1e-8))[:, None] * g + sigma * streams.normals(2)
    np.testing.assert_allclose(x, expected, rtol=1e-12)


def test_lgd_radius():
    from trustsampling.diffusion import linear_beta_schedule

    s = linear_beta_schedule(1000)
    a = s.alpha_cum_at(300)
    assert lgd_mc_radius(300, s, 0.5) == pytest.approx(0.5 * math.sqrt((1 - a) / a))


def test_log_mean_exp_is_overflow_safe():
    a = np.array([[1000.0, 1000.0], [-1000.0, -1000.0 + math.log(3.0)]])
    np.testing.assert_allclose(log_mean_exp(a), [1000.0, -1000.0 + math.log(2.0)], rtol=1e-12)
    assert np.all(np.isfinite(log_mean_exp(np.array([[-np.inf, 0.0]]))))


def test_degenerate_surrogate_equals_plain_loss(pin, rng):
    x = rng.standard_normal((5, 2))
    surr, g0 = mc_surrogate(pin, x, 0.3, np.zeros((5, 1, 2)))
    np.testing.assert_allclose(surr, pin.loss(x), rtol=1e-14)
    np.testing.assert_allclose(g0, pin.grad_x0(x), rtol=1e-14)


def test_degenerate_lgd_equals_dps(tiny, pin, schedule):
    # one particle with zero radius collapses the surrogate to L(x0_hat)
    a, _ = baseline_sample(tiny, pin, schedule, BaselineConfig("lgd_mc", GRID, 0.05, 1, 0.0, seed=6), 4)
    b, _ = baseline_sample(tiny, pin, schedule, BaselineConfig("dps", GRID, 0.05, seed=6), 4)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_surrogate_bounds(pin, rng):
    x = rng.standard_normal((6, 2))
    xi = rng.standard_normal((6, 20, 2))
    surr, g0 = mc_surrogate(pin, x, 0.7, xi)
    losses = pin.loss((x[:, None, :] + 0.7 * xi).reshape(-1, 2)).reshape(6, 20)
    assert np.all(surr <= losses.max(axis=1) + math.log(20) + 1e-12)
    assert np.all(surr >= losses.min(axis=1) - 1e-12)
    assert np.all(surr <= losses.mean(axis=1) + 1e-12)  # Jensen: -log E exp(-L) <= E L
    # gradient matches finite differences of the surrogate
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (mc_surrogate(pin, x + e, 0.7, xi)[0] - mc_surrogate(pin, x - e, 0.7, xi)[0]) / (2 * h)
        np.testing.assert_allclose(g0[:, j], fd, rtol=1e-5, atol=1e-9)


def test_particle_sets_are_nested(tiny, pin, schedule):
    # at every step the P=1 draw is the first particle of the P=3 draw
    from trustsampling import baselines

    seen = {}
    orig = baselines.mc_surrogate

    def spy(con, x0_hat, radius, xi):
        seen.setdefault(xi.shape[1], []).append(xi.copy())
        return orig(con, x0_hat, radius, xi)

    baselines.mc_surrogate = spy
    try:
        for P in (1, 3):
            baseline_sample(tiny, pin, schedule, BaselineConfig("lgd_mc", GRID, 0.05, P, 0.1, seed=8), 2)
    finally:
        baselines.mc_surrogate = orig
    for a, b in zip(seen[1], seen[3]):
        np.testing.assert_array_equal(a[:, 0], b[:, 0])
