"""Trust sampling: DDIM with a trust-scheduled inner loop of normalized guidance steps.

All samplers here run a batch of independent chains. Chain ``i`` of seed ``s``
owns three random streams (initial state and step noise, schedule rounding,
Monte-Carlo particles) spawned from ``SeedSequence(s)``, so results per chain do
not depend on which other samplers share the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import Constraint, guidance_gradient
from .diffusion import NoiseSchedule, StepGrid, ddim_mean, predict_x0, sigma_ddpm

SCHEDULE_KINDS = ("constant", "linear", "stochastic_linear")
_FLOOR_SLACK = 1e-9


class SamplingError(FloatingPointError):
    """Raised when a sampler state stops being finite."""


# -- schedules -----------------------------------------------------------------------


@dataclass(frozen=True)
class TrustSchedule:
    """Cap on inner gradient iterations per inference step.

    ``start`` applies at the noisiest inference step and ``end`` at the
    cleanest; expected limits interpolate linearly in between. ``linear``
    realizes fractional expectations by error-diffusion rounding so the
    per-run total equals the expected total exactly; ``stochastic_linear``
    rounds each step up with probability equal to its fractional part.
    """

    kind: str
    start: float
    end: float

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown trust schedule kind {self.kind!r}")
        if self.start < 0 or self.end < 0:
            raise ValueError("trust schedule limits must be nonnegative")
        if self.kind == "constant" and self.start != self.end:
            raise ValueError("constant schedule requires start == end")
        if self.kind == "constant" and self.start != int(self.start):
            raise ValueError("constant schedule requires an integer limit")

    @classmethod
    def constant(cls, c: int) -> "TrustSchedule":
        return cls("constant", c, c)

    def expected(self, k: int, K: int, reversed: bool = False) -> float:
        if not 1 <= k <= K:
            raise ValueError(f"inference step {k} outside 1..{K}")
        if reversed:
            k = K - k + 1
        if K == 1:
            return float(self.start)
        return self.start + (self.end - self.start) * (k - 1) / (K - 1)

    def expected_total(self, K: int) -> float:
        return K * (self.start + self.end) / 2.0 if K > 1 else float(self.start)

    def validate(self, K: int) -> None:
        if self.kind == "linear":
            total = self.expected_total(K)
            if abs(total - round(total)) > 1e-9:
                raise ValueError(
                    f"linear schedule {self.start}->{self.end} over {K} steps has non-integer "
                    f"total {total}; use stochastic_linear")

    def _cumulative(self, k: int, K: int) -> float:
        # sum of expected limits over the first k steps (forward orientation)
        if K == 1:
            return float(self.start) * k
        return k * self.start + (self.end - self.start) * k * (k - 1) / (2.0 * (K - 1))

    def limits(self, K: int, rng: np.random.Generator | None = None, reversed: bool = False) -> np.ndarray:
        """Realized integer limits for inference steps ``1..K`` (noisiest first)."""
        self.validate(K)
        if self.kind == "constant":
            return np.full(K, int(self.start), dtype=np.int64)
        if self.kind == "linear":
            cum = np.array([math.floor(self._cumulative(k, K) + _FLOOR_SLACK) for k in range(K + 1)])
            out = np.diff(cum).astype(np.int64)
            return out[::-1].copy() if reversed else out
        if rng is None:
            raise ValueError("stochastic_linear schedule needs an rng")
        exp = np.array([self.expected(k, K, reversed) for k in range(1, K + 1)])
        base = np.floor(exp + _FLOOR_SLACK)
        frac = np.clip(exp - base, 0.0, 1.0)
        return (base + (rng.random(K) < frac)).astype(np.int64)

    def scaled_to_budget(self, K: int, budget: int) -> "TrustSchedule":
        """Same shape, rescaled so ``nfe_budget_for`` equals ``budget``."""
        total = self.expected_total(K)
        target = budget - K
        if target < 0:
            raise ValueError(f"budget {budget} is below the {K} base passes")
        if total == 0:
            return TrustSchedule("stochastic_linear", target / K, target / K)
        f = target / total
        start, end = self.start * f, self.end * f
        for kind in (self.kind, "stochastic_linear"):
            try:
                cand = TrustSchedule(kind, start, end)
                cand.validate(K)
                return cand
            except ValueError:
                continue
        raise AssertionError("stochastic_linear accepts any nonnegative limits")


def iteration_limit(schedule: TrustSchedule, k: int, K: int, rng: np.random.Generator | None = None,
                    reversed: bool = False) -> int:
    """Iteration cap for inference step ``k`` of ``K``."""
    if schedule.kind == "linear":
        return int(schedule.limits(K, reversed=reversed)[k - 1])
    e = schedule.expected(k, K, reversed)
    if schedule.kind == "constant":
        return int(e)
    base = math.floor(e + _FLOOR_SLACK)
    frac = min(max(e - base, 0.0), 1.0)
    if rng is None:
        raise ValueError("stochastic_linear schedule needs an rng")
    return int(base + (rng.random() < frac))


def nfe_budget_for(schedule: TrustSchedule, K: int):
    """Maximum expected network passes: one base pass per step plus the expected limits."""
    total = K + schedule.expected_total(K)
    return int(round(total)) if abs(total - round(total)) < 1e-9 else total


# -- config & traces ----------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    grid: StepGrid
    schedule: TrustSchedule
    w: float = 1.0
    eps_max: float | None = None
    seed: int = 0
    schedule_reversed: bool = False
    # hard per-chain cap on network passes; inner iterations stop when the
    # remaining base passes would no longer fit
    nfe_cap: int | None = None

    def __post_init__(self) -> None:
        if self.nfe_cap is not None and self.nfe_cap < self.grid.K:
            raise ValueError(f"nfe_cap {self.nfe_cap} is below the {self.grid.K} base passes")
        if not self.w > 0:
            raise ValueError("guidance step size w must be positive")
        if self.eps_max is not None and not self.eps_max > 0:
            raise ValueError("eps_max must be positive when enabled")
        self.schedule.validate(self.grid.K)

    @property
    def nfe_budget(self):
        return nfe_budget_for(self.schedule, self.grid.K)


@dataclass
class SampleTrace:
    """Per-inference-step record for one chain.

    ``loss_before`` is the loss at ``x0_hat(x_t)`` from the base pass;
    ``loss_after`` is the loss at the last state the inner loop evaluated
    (equal to ``loss_before`` when no inner pass ran). ``extra_nfe`` counts
    inner passes that only served a boundary check which ended the loop.
    """

    t: np.ndarray
    j_limit: np.ndarray
    j_used: np.ndarray
    boundary: np.ndarray
    loss_before: np.ndarray
    loss_after: np.ndarray
    eps_norms: list[tuple[float, ...]] = field(default_factory=list)

    @property
    def K(self) -> int:
        return int(self.t.size)

    @property
    def nfe_per_step(self) -> np.ndarray:
        return 1 + self.j_used + self.boundary.astype(np.int64)

    @property
    def total_nfe(self) -> int:
        return int(self.nfe_per_step.sum())

    def rows(self, chain: int = 0):
        for k in range(self.K):
            yield {
                "chain": chain, "step": k + 1, "t": int(self.t[k]),
                "j_limit": int(self.j_limit[k]), "j_used": int(self.j_used[k]),
                "boundary": int(self.boundary[k]),
                "loss_before": float(self.loss_before[k]), "loss_after": float(self.loss_after[k]),
                "nfe": int(self.nfe_per_step[k]),
            }


class _TraceBuilder:
    def __init__(self, n: int, K: int):
        self.n, self.K = n, K
        self.t = np.zeros(K, dtype=np.int64)
        self.j_limit = np.zeros((n, K), dtype=np.int64)
        self.j_used = np.zeros((n, K), dtype=np.int64)
        self.boundary = np.zeros((n, K), dtype=bool)
        self.loss_before = np.zeros((n, K))
        self.loss_after = np.zeros((n, K))
        self.norms: list[list[list[float]]] = [[[] for _ in range(K)] for _ in range(n)]

    def record_norms(self, k: int, rows: np.ndarray, norms: np.ndarray) -> None:
        for i, v in zip(rows.tolist(), norms.tolist()):
            self.norms[i][k].append(v)

    def build(self) -> list[SampleTrace]:
        return [
            SampleTrace(self.t.copy(), self.j_limit[i].copy(), self.j_used[i].copy(),
                        self.boundary[i].copy(), self.loss_before[i].copy(), self.loss_after[i].copy(),
                        [tuple(v) for v in self.norms[i]])
            for i in range(self.n)
        ]


# -- random streams ----------------------------------------------------------------------


@dataclass
class ChainStreams:
    noise: list[np.random.Generator]
    schedule: list[np.random.Generator]
    particles: list[np.random.Generator]

    @classmethod
    def from_seed(cls, seed: int, n: int) -> "ChainStreams":
        noise, sched, parts = [], [], []
        for child in np.random.SeedSequence(int(seed)).spawn(n):
            a, b, c = child.spawn(3)
            noise.append(np.random.default_rng(a))
            sched.append(np.random.default_rng(b))
            parts.append(np.random.default_rng(c))
        return cls(noise, sched, parts)

    def normals(self, d: int) -> np.ndarray:
        return np.stack([g.standard_normal(d) for g in self.noise])


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
        raise SamplingError(f"non-finite sampler state at {where} in chains {bad[:10].tolist()}")


def _normalized_step(x: np.ndarray, grad: np.ndarray, size) -> tuple[np.ndarray, np.ndarray]:
    """``x - size * grad / ||grad||`` row-wise; rows with zero gradient are left unchanged."""
    gn = np.linalg.norm(grad, axis=1)
    moved = gn > 0.0
    safe = np.where(moved, gn, 1.0)
    size = np.broadcast_to(np.asarray(size, dtype=np.float64), gn.shape)
    step = (size / safe)[:, None] * grad
    return np.where(moved[:, None], x - step, x), moved


def _dim_of(model, con: Constraint | None) -> int:
    d = model.dim
    if con is not None and con.dim != d:
        raise ValueError(f"model dimension {d} does not match constraint dimension {con.dim}")
    return d


# -- samplers ---------------------------------------------------------------------------


def ddim_sample(model, s: NoiseSchedule, grid: StepGrid, n_chains: int = 1, seed: int = 0,
                record_eps_norms: bool = False):
    """Unguided DDIM. Returns final samples, plus per-step eps norms ``(n, K)`` if requested."""
    grid.validate_for(s)
    streams = ChainStreams.from_seed(seed, n_chains)
    x = streams.normals(model.dim)
    norms = np.zeros((n_chains, grid.K))
    for k, step in enumerate(grid.pairs()):
        t = step[0]
        eps = np.atleast_2d(model.forward(x, t))
        norms[:, k] = np.linalg.norm(eps, axis=1)
        sigma = sigma_ddpm(step, s, grid.eta)
        x = ddim_mean(x, eps, step, sigma, s) + sigma * streams.normals(model.dim)
        _check_finite(x, f"t={t}")
    return (x, norms) if record_eps_norms else x


def epsilon_norm_stats(model, s: NoiseSchedule, grid: StepGrid, n_chains: int, seed: int = 0):
    """Mean and standard deviation of ``||eps_theta(x_t, t)||`` over unguided chains."""
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    _, norms = ddim_sample(model, s, grid, n_chains, seed, record_eps_norms=True)
    return float(norms.mean()), float(norms.std()), norms


def calibrate_epsilon_max(model, s: NoiseSchedule, grid: StepGrid, n_chains: int, seed: int = 0,
                          margin: float = 3.0) -> float:
    """Boundary threshold: mean predicted-noise norm plus ``margin`` standard deviations."""
    mean, std, _ = epsilon_norm_stats(model, s, grid, n_chains, seed)
    return mean + margin * std


def trust_sample(model, con: Constraint, s: NoiseSchedule, cfg: SamplerConfig, n_chains: int = 1):
    """Trust sampling with DDIM over ``n_chains`` chains seeded by ``cfg.seed``.

    Each inference step computes the DDIM mean, then repeats normalized steps
    ``x* <- x* - w g / ||g||`` on ``L(x0_hat(x*))`` while fewer than ``J`` steps
    were taken and ``||eps_theta(x*, t)|| < eps_max``; finally adds
    ``sigma_t`` noise. The boundary check reuses the eps from the same pass as
    the gradient, so a pass is wasted only when the check ends the loop.
    Returns ``(x0, traces)`` with one :class:`SampleTrace` per chain.
    """
    d = _dim_of(model, con)
    grid = cfg.grid
    grid.validate_for(s)
    K = grid.K
    streams = ChainStreams.from_seed(cfg.seed, n_chains)
    limits = np.stack([cfg.schedule.limits(K, g, cfg.schedule_reversed) for g in streams.schedule])
    tb = _TraceBuilder(n_chains, K)
    tb.j_limit[:] = limits
    x = streams.normals(d)
    all_rows = np.arange(n_chains)
    spent = np.zeros(n_chains, dtype=np.int64)

    for k, step in enumerate(grid.pairs()):
        t = step[0]
        tb.t[k] = t
        eps = np.atleast_2d(model.forward(x, t))
        base_loss = np.atleast_1d(con.loss(predict_x0(x, eps, t, s)))
        tb.loss_before[:, k] = base_loss
        tb.loss_after[:, k] = base_loss
        sigma = sigma_ddpm(step, s, grid.eta)
        xs = ddim_mean(x, eps, step, sigma, s)

        J = limits[:, k]
        spent += 1
        used = np.zeros(n_chains, dtype=np.int64)
        active = J > 0
        while active.any():
            if cfg.nfe_cap is not None:
                # one pass now plus one base pass for each later step must fit
                active &= spent + 1 + (K - 1 - k) <= cfg.nfe_cap
                if not active.any():
                    break
            rows = all_rows if active.all() else np.flatnonzero(active)
            sub = xs if rows is all_rows else xs[rows]
            grad, loss, e = guidance_gradient(model, con, sub, t, s)
            grad, e = np.atleast_2d(grad), np.atleast_2d(e)
            norms = np.linalg.norm(e, axis=1)
            tb.record_norms(k, rows, norms)
            tb.loss_after[rows, k] = loss
            go = np.ones(rows.size, dtype=bool)
            if cfg.eps_max is not None:
                go = norms < cfg.eps_max
                tb.boundary[rows[~go], k] = True
            stepped, _ = _normalized_step(sub, grad, cfg.w)
            if rows is all_rows and go.all():
                xs = stepped
            else:
                xs[rows[go]] = stepped[go]
            used[rows[go]] += 1
            spent[rows] += 1
            active[rows[~go]] = False
            active &= used < J
        tb.j_used[:, k] = used
        x = xs + sigma * streams.normals(d)
        _check_finite(x, f"t={t}")
    return x, tb.build()
