"""Guidance losses ``L(x0, y)`` and the chain-rule gradient through ``x0_hat``.

Every constraint accepts either a single sample of shape ``(d,)`` (returning a
scalar loss) or a batch of shape ``(n, d)`` (returning ``(n,)`` losses).
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion import NoiseSchedule, predict_x0


def _as_batch(x0):
    x = np.asarray(x0, dtype=np.float64)
    return np.atleast_2d(x), x.ndim == 1


class Constraint(ABC):
    """A nonnegative, almost-everywhere differentiable loss on clean samples."""

    dim: int

    @abstractmethod
    def _loss(self, x: np.ndarray) -> np.ndarray:
        """Losses for a batch ``(n, d)``."""

    @abstractmethod
    def _grad(self, x: np.ndarray) -> np.ndarray:
        """Gradients for a batch ``(n, d)``."""

    def _check(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.dim:
            raise ValueError(f"constraint expects dimension {self.dim}, got {x.shape[-1]}")

    def loss(self, x0):
        x, single = _as_batch(x0)
        self._check(x)
        out = self._loss(x)
        return float(out[0]) if single else out

    def grad_x0(self, x0) -> np.ndarray:
        x, single = _as_batch(x0)
        self._check(x)
        out = self._grad(x)
        return out[0] if single else out

    def violation(self, x0):
        """Per-sample RMS residual (equality) or RMS hinge excess (inequality)."""
        return np.sqrt(self.loss(x0))

    def density(self, x0):
        """Unnormalized likelihood proxy ``exp(-L)``."""
        return np.exp(-np.asarray(self.loss(x0)))


# -- equality --------------------------------------------------------------------------


class EqualityObservation(Constraint):
    """Mean squared error between ``A x0`` and the observation ``y``."""

    def __init__(self, matrix, target):
        A = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        y = np.atleast_1d(np.asarray(target, dtype=np.float64))
        if A.shape[0] != y.shape[0]:
            raise ValueError(f"operator has {A.shape[0]} rows but target has {y.shape[0]} entries")
        self.matrix = A
        self.target = y
        self.dim = A.shape[1]

    @classmethod
    def from_mask(cls, indices: Sequence[int], target, dim: int) -> "EqualityObservation":
        indices = [int(i) for i in indices]
        if any(i < 0 or i >= dim for i in indices):
            raise ValueError(f"mask indices {indices} out of range for dim {dim}")
        A = np.zeros((len(indices), dim))
        A[np.arange(len(indices)), indices] = 1.0
        return cls(A, target)

    def residual(self, x0):
        x, single = _as_batch(x0)
        self._check(x)
        r = x @ self.matrix.T - self.target
        return r[0] if single else r

    def _loss(self, x):
        r = x @ self.matrix.T - self.target
        return np.mean(r * r, axis=1)

    def _grad(self, x):
        r = x @ self.matrix.T - self.target
        return (2.0 / self.matrix.shape[0]) * r @ self.matrix


def equality_loss(x0, obs: EqualityObservation):
    return obs.loss(x0)


def averaging_operator(dim: int, factor: int, channels: int = 1) -> np.ndarray:
    """Block-averaging "downsample" over frames of ``channels`` interleaved coordinates."""
    if dim % channels:
        raise ValueError("dim must be a multiple of channels")
    frames = dim // channels
    if frames % factor:
        raise ValueError(f"{frames} frames not divisible by factor {factor}")
    rows = []
    for start in range(0, frames, factor):
        for c in range(channels):
            row = np.zeros(dim)
            for f in range(start, start + factor):
                row[f * channels + c] = 1.0 / factor
            rows.append(row)
    return np.array(rows)


def gaussian_blur_operator(frames: int, channels: int, sigma: float, radius: int | None = None) -> np.ndarray:
    """Temporal Gaussian blur over interleaved per-frame coordinates, edge-renormalized."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(math.ceil(3 * sigma)) if radius is None else int(radius)
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    dim = frames * channels
    A = np.zeros((dim, dim))
    for f in range(frames):
        src = f + offsets
        ok = (src >= 0) & (src < frames)
        wts = kernel[ok] / kernel[ok].sum()
        for c in range(channels):
            A[f * channels + c, src[ok] * channels + c] = wts
    return A


# -- inequality ------------------------------------------------------------------------


class InequalityConstraint:
    """Requirement ``c(x0) >= a`` for a differentiable scalar ``c``."""

    def __init__(self, c: Callable, grad_c: Callable, threshold: float):
        self._c = c
        self._grad_c = grad_c
        self.threshold = float(threshold)

    def c(self, x: np.ndarray) -> np.ndarray:
        return self._c(x)

    def grad_c(self, x: np.ndarray) -> np.ndarray:
        return self._grad_c(x)

    def hinge(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(0.0, self.threshold - self.c(x))


class LinearInequality(InequalityConstraint):
    """``w . x0 >= a``; a coordinate lower bound when ``w`` is one-hot."""

    def __init__(self, weights, threshold: float):
        self.weights = np.asarray(weights, dtype=np.float64)
        super().__init__(lambda x: x @ self.weights,
                         lambda x: np.broadcast_to(self.weights, x.shape).copy(), threshold)

    @classmethod
    def coordinate(cls, index: int, dim: int, threshold: float) -> "LinearInequality":
        w = np.zeros(dim)
        w[index] = 1.0
        return cls(w, threshold)


class SphereExclusion(InequalityConstraint):
    """Keep the point ``x0[indices]`` at least ``radius`` away from ``center``."""

    def __init__(self, indices: Sequence[int], center, radius: float):
        self.indices = np.asarray(indices, dtype=int)
        self.center = np.asarray(center, dtype=np.float64)
        if self.center.shape != self.indices.shape:
            raise ValueError("center and indices must have the same length")
        super().__init__(self._dist, self._dist_grad, radius)

    def _dist(self, x):
        return np.linalg.norm(x[:, self.indices] - self.center, axis=1)

    def _dist_grad(self, x):
        diff = x[:, self.indices] - self.center
        norm = np.linalg.norm(diff, axis=1, keepdims=True)
        g = np.zeros_like(x)
        # gradient undefined at the center; use zero there
        g[:, self.indices] = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
        return g


class AngularMomentumInequality(InequalityConstraint):
    """Mean 2-D angular momentum of a point trajectory about its centroid.

    With positions ``p_f`` relative to the centroid and finite-difference
    velocities ``v_f = p_{f+1} - p_f``, ``c = mean_f cross(p_f, v_f)``.
    Coordinates are interleaved per frame; ``axes`` picks the two used.
    """

    def __init__(self, frames: int, channels: int, threshold: float, axes=(0, 1)):
        self.frames = int(frames)
        self.channels = int(channels)
        self.axes = tuple(int(a) for a in axes)
        super().__init__(self._value, self._value_grad, threshold)

    def _points(self, x):
        pts = x.reshape(x.shape[0], self.frames, self.channels)[:, :, self.axes]
        return pts - pts.mean(axis=1, keepdims=True)

    def _value(self, x):
        p = self._points(x)
        v = p[:, 1:] - p[:, :-1]
        cross = p[:, :-1, 0] * v[:, :, 1] - p[:, :-1, 1] * v[:, :, 0]
        # p_f x (p_{f+1} - p_f) = p_f x p_{f+1}
        return cross.mean(axis=1)

    def _value_grad(self, x):
        p = self._points(x)
        m = self.frames - 1
        g = np.zeros_like(p)
        # d/dp of mean_f (p_f,0 p_{f+1},1 - p_f,1 p_{f+1},0)
        g[:, :-1, 0] += p[:, 1:, 1] / m
        g[:, 1:, 1] += p[:, :-1, 0] / m
        g[:, :-1, 1] -= p[:, 1:, 0] / m
        g[:, 1:, 0] -= p[:, :-1, 1] / m
        # centering is a linear projection; its adjoint subtracts the mean
        g -= g.mean(axis=1, keepdims=True)
        out = np.zeros((x.shape[0], self.frames, self.channels))
        out[:, :, self.axes] = g
        return out.reshape(x.shape)


class InequalityLoss(Constraint):
    """Mean of squared hinges ``max(0, a_i - c_i(x0))^2`` over all parts."""

    def __init__(self, parts: Sequence[InequalityConstraint], dim: int):
        if not parts:
            raise ValueError("inequality loss needs at least one part")
        self.parts = list(parts)
        self.dim = int(dim)

    def _loss(self, x):
        return np.mean([p.hinge(x) ** 2 for p in self.parts], axis=0)

    def _grad(self, x):
        g = np.zeros_like(x)
        for p in self.parts:
            h = p.hinge(x)
            # hinge == 0 on the satisfied side, including the kink
            g -= (2.0 * h)[:, None] * p.grad_c(x)
        return g / len(self.parts)

    def satisfied(self, x0):
        x, single = _as_batch(x0)
        ok = np.all([p.c(x) >= p.threshold for p in self.parts], axis=0)
        return bool(ok[0]) if single else ok


def inequality_loss(x0, parts: Sequence[InequalityConstraint]):
    if not parts:
        raise ValueError("inequality loss needs at least one part")
    x = np.asarray(x0, dtype=np.float64)
    return InequalityLoss(parts, x.shape[-1]).loss(x)


class CompositeConstraint(Constraint):
    """Arithmetic mean of several constraints' losses."""

    def __init__(self, parts: Sequence[Constraint]):
        if not parts:
            raise ValueError("composite needs at least one part")
        dims = {p.dim for p in parts}
        if len(dims) != 1:
            raise ValueError(f"parts disagree on dimension: {sorted(dims)}")
        self.parts = list(parts)
        self.dim = dims.pop()

    def _loss(self, x):
        return np.mean([p._loss(x) for p in self.parts], axis=0)

    def _grad(self, x):
        return np.mean([p._grad(x) for p in self.parts], axis=0)


class ZeroConstraint(Constraint):
    """Identically-zero loss; guidance through it is a no-op."""

    def __init__(self, dim: int):
        self.dim = int(dim)

    def _loss(self, x):
        return np.zeros(x.shape[0])

    def _grad(self, x):
        return np.zeros_like(x)


# -- guidance through the denoiser -------------------------------------------------------


def guidance_gradient(model, con: Constraint, x_prime, t: int, s: NoiseSchedule):
    """Gradient of ``L(x0_hat(x'), y)`` with respect to ``x'``.

    Uses one network pass: ``eps`` and its input VJP share activations. Returns
    ``(grad, loss, eps_pred)``.
    """
    eps, vjp = model.forward_with_vjp_fn(x_prime, t)
    x0_hat = predict_x0(x_prime, eps, t, s)
    loss = con.loss(x0_hat)
    g0 = con.grad_x0(x0_hat)
    a = s.alpha_cum_at(t)
    grad = (g0 - math.sqrt(1.0 - a) * vjp(g0)) / math.sqrt(a)
    return grad, loss, eps


# -- Jensen-gap oracle -------------------------------------------------------------------


@dataclass(frozen=True)
class JensenResult:
    gap: float
    lower: float
    upper: float
    variance: float
    curvature_min: float
    curvature_max: float

    def holds(self, rtol: float = 1e-9) -> bool:
        scale = max(abs(self.gap), abs(self.lower), abs(self.upper), 1e-300)
        tol = rtol * scale
        return self.lower - tol <= self.gap <= self.upper + tol


def _scalar_loss_fn(con):
    if isinstance(con, Constraint):
        if con.dim != 1:
            raise ValueError("Jensen oracle needs a scalar (dim 1) constraint")
        return lambda x: np.asarray(con.loss(np.asarray(x, dtype=np.float64)[:, None]))
    return lambda x: np.asarray(con(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def jensen_gap_oracle(con, values, probs=None, n_scan: int = 4001, widen: float = 0.1) -> JensenResult:
    """Jensen gap of ``f = exp(-L)`` over a discrete scalar posterior, with curvature bounds.

    ``con`` is a dim-1 :class:`Constraint` or a vectorized scalar loss callable.
    ``f''`` is bracketed by a central-difference scan over the support hull
    widened by ``widen`` of its span.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("posterior must be over scalar values")
    p = np.full(x.size, 1.0 / x.size) if probs is None else np.asarray(probs, dtype=np.float64)
    if p.shape != x.shape or np.any(p < 0) or not math.isclose(p.sum(), 1.0, rel_tol=1e-12):
        raise ValueError("probs must be a nonnegative vector summing to 1, aligned with values")
    loss = _scalar_loss_fn(con)

    def f(z):
        return np.exp(-loss(z))

    mean = float(p @ x)
    var = float(p @ (x - mean) ** 2)
    gap = float(p @ f(x) - f(np.array([mean]))[0])

    lo, hi = float(x.min()), float(x.max())
    span = hi - lo
    lo, hi = lo - widen * span, hi + widen * span
    if span > 0:
        grid = np.linspace(lo, hi, n_scan)
        # stencils tile the hull so a kink's curvature mass is never skipped
        h = grid[1] - grid[0]
    else:
        grid, h = np.array([lo]), 1e-4
    f2 = (f(grid + h) - 2.0 * f(grid) + f(grid - h)) / (h * h)
    a, b = float(f2.min()), float(f2.max())
    return JensenResult(gap, 0.5 * a * var, 0.5 * b * var, var, a, b)
