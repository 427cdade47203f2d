"""Desk-scale metrics: constraint violation, sliced Wasserstein, diversity, plus the Jensen suite."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .constraints import Constraint, JensenResult, jensen_gap_oracle


@dataclass
class MetricReport:
    method: str
    task: str
    seed: int
    seed_count: int
    n: int
    mean_violation: float
    sw2: float
    diversity: float
    diversity_gt: float
    mean_nfe: float
    runtime_seconds: float = float("nan")

    def __post_init__(self) -> None:
        if self.seed_count < 1:
            raise ValueError("seed_count must be >= 1")
        for name in ("mean_violation", "sw2", "diversity", "mean_nfe"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")

    @property
    def diversity_gap(self) -> float:
        return abs(self.diversity - self.diversity_gt)

    @property
    def diversity_gap_relative(self) -> float:
        return self.diversity_gap / self.diversity_gt if self.diversity_gt else float("inf")

    def as_dict(self) -> dict:
        return asdict(self)


def constraint_violation(samples, con: Constraint) -> float:
    """Root-mean-square over samples of each sample's RMS residual or hinge excess."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("need at least one sample")
    return float(math.sqrt(np.mean(con.loss(x))))


def _subsample(x, m, rng):
    if x.shape[0] == m:
        return x
    return x[np.sort(rng.choice(x.shape[0], size=m, replace=False))]


def random_directions(dim: int, n: int, rng) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(a, b, n_projections: int = 256, rng=None, directions=None) -> float:
    """Mean over random unit projections of the 1-D 2-Wasserstein distance.

    Unequal set sizes are subsampled (seeded) down to the smaller one.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sample sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    m = min(a.shape[0], b.shape[0])
    a, b = _subsample(a, m, rng), _subsample(b, m, rng)
    if directions is None:
        directions = random_directions(a.shape[1], n_projections, rng)
    pa = np.sort(a @ directions.T, axis=0)
    pb = np.sort(b @ directions.T, axis=0)
    return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))


def diversity(samples, n_pairs: int = 1000, rng=None) -> float:
    """Mean Euclidean distance over random pairs of distinct samples."""
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = x.shape[0]
    if n < 2:
        raise ValueError("diversity needs at least two samples")
    i = rng.integers(0, n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    return float(np.mean(np.linalg.norm(x[i] - x[j], axis=1)))


# -- Jensen suite --------------------------------------------------------------------------


def quadratic_loss(center: float, scale: float):
    return lambda x: scale * (x - center) ** 2


def clipped_linear_loss(threshold: float, slope: float = 1.0):
    return lambda x: slope * np.maximum(0.0, threshold - x)


def squared_hinge_loss(threshold: float, slope: float = 1.0):
    return lambda x: (slope * np.maximum(0.0, threshold - x)) ** 2


def two_point(center: float, half_width: float, p: float = 0.5):
    return np.array([center - half_width, center + half_width]), np.array([p, 1.0 - p])


def discretized_gaussian(mean: float, std: float, n: int = 41):
    if std == 0:
        return np.array([mean]), np.array([1.0])
    z = np.linspace(-4.0, 4.0, n)
    w = np.exp(-0.5 * z * z)
    return mean + std * z, w / w.sum()


def jensen_grid():
    """Documented grid of (label, loss, values, probs) cases."""
    losses = []
    for c in (-0.5, 0.0, 1.0):
        for k in (0.25, 1.0, 4.0):
            losses.append((f"quadratic(c={c},k={k})", quadratic_loss(c, k)))
    for a in (-0.5, 0.0, 0.7):
        losses.append((f"clipped_linear(a={a})", clipped_linear_loss(a)))
        losses.append((f"squared_hinge(a={a})", squared_hinge_loss(a, 2.0)))
    posteriors = []
    for m in (-1.0, 0.0, 0.5):
        posteriors.append((f"point(m={m})", np.array([m]), np.array([1.0])))
        for h in (0.05, 0.3, 1.0):
            for p in (0.5, 0.2):
                v, w = two_point(m, h, p)
                posteriors.append((f"two_point(m={m},h={h},p={p})", v, w))
        for sd in (0.1, 0.5):
            v, w = discretized_gaussian(m, sd)
            posteriors.append((f"gauss(m={m},sd={sd})", v, w))
    for lname, loss in losses:
        for pname, v, w in posteriors:
            yield f"{lname} x {pname}", loss, v, w


@dataclass
class JensenCase:
    label: str
    result: JensenResult
    passed: bool


def run_jensen_suite(cases=None, rtol: float = 1e-9) -> list[JensenCase]:
    """Check ``(a/2) Var <= E[f] - f(E x) <= (b/2) Var`` on every case; failures are report entries."""
    out = []
    for label, loss, values, probs in (jensen_grid() if cases is None else cases):
        res = jensen_gap_oracle(loss, values, probs)
        out.append(JensenCase(label, res, res.holds(rtol)))
    return out
