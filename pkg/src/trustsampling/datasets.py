"""Seeded synthetic datasets and constraint tasks built on them.

Dataset text format::

    # {"dim": 2, "kind": "gaussian_mixture", "n": 100, "params": {...}, "seed": 0}
    x_1 x_2 ... x_d        (one sample per row, %.17g)

Trajectory samples interleave per-frame coordinates: ``[x_0, h_0, x_1, h_1, ...]``
with the last coordinate of each frame being height.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constraints import (
    AngularMomentumInequality, CompositeConstraint, Constraint, EqualityObservation, InequalityLoss,
    LinearInequality, SphereExclusion, averaging_operator, gaussian_blur_operator,
)

DATASET_KINDS = ("gaussian_mixture", "swiss_roll", "trajectory", "point_mass")

DEFAULT_PARAMS = {
    "gaussian_mixture": {"k": 8, "radius": 4.0, "std": 0.1},
    "swiss_roll": {"noise": 0.05, "scale": 1.0},
    "trajectory": {"frames": 32, "dims": 2, "lengthscale": 6.0},
    "point_mass": {"center": [1.0, -1.0]},
}


class DatasetError(ValueError):
    """Invalid dataset specification or malformed dataset file."""


class InfeasibleTaskError(ValueError):
    """No sample or analytic point satisfies the requested constraint."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    n: int
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if self.n < 1:
            raise DatasetError("n must be >= 1")
        merged = {**DEFAULT_PARAMS[self.kind], **(self.params or {})}
        object.__setattr__(self, "params", merged)

    @property
    def dim(self) -> int:
        p = self.params
        if self.kind == "trajectory":
            return int(p["frames"]) * int(p["dims"])
        if self.kind == "point_mass":
            return len(p["center"])
        return 2


def _mixture(spec: DatasetSpec, rng):
    k, radius, std = int(spec.params["k"]), float(spec.params["radius"]), float(spec.params["std"])
    if k < 1 or radius < 0 or std < 0:
        raise DatasetError("mixture needs k >= 1, radius >= 0, std >= 0")
    comp = rng.integers(0, k, size=spec.n)
    centers = mixture_centers(k, radius)
    return centers[comp] + std * rng.standard_normal((spec.n, 2))


def mixture_centers(k: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _swiss_roll(spec: DatasetSpec, rng):
    noise, scale = float(spec.params["noise"]), float(spec.params["scale"])
    if noise < 0 or scale <= 0:
        raise DatasetError("swiss_roll needs noise >= 0 and scale > 0")
    u = 1.5 * np.pi * (1.0 + 2.0 * rng.random(spec.n))
    pts = np.stack([u * np.cos(u), u * np.sin(u)], axis=1) / (3.0 * np.pi)
    return scale * (pts + noise * rng.standard_normal((spec.n, 2)))


def _trajectory(spec: DatasetSpec, rng):
    F, D, ell = int(spec.params["frames"]), int(spec.params["dims"]), float(spec.params["lengthscale"])
    if F < 2 or D < 2 or ell <= 0:
        raise DatasetError("trajectory needs frames >= 2, dims >= 2, lengthscale > 0")
    f = np.arange(F, dtype=np.float64)
    cov = np.exp(-0.5 * ((f[:, None] - f[None, :]) / ell) ** 2) + 1e-8 * np.eye(F)
    L = np.linalg.cholesky(cov)
    n = spec.n
    out = np.empty((n, F, D))
    # horizontal-like coordinates: drift plus smooth wobble
    start = 0.2 * rng.standard_normal((n, D - 1))
    speed = rng.uniform(0.5, 1.5, size=(n, D - 1))
    wobble = 0.1 * np.einsum("fg,ngc->nfc", L, rng.standard_normal((n, F, D - 1)))
    out[:, :, :-1] = start[:, None, :] + speed[:, None, :] * (f / (F - 1))[None, :, None] + wobble
    # height: positive baseline plus a smooth bump process
    base = rng.uniform(0.2, 0.5, size=n)
    bump = 0.25 * (L @ rng.standard_normal((F, n))).T
    out[:, :, -1] = base[:, None] + np.abs(bump)
    return out.reshape(n, F * D)


def _point_mass(spec: DatasetSpec, rng):
    c = np.asarray(spec.params["center"], dtype=np.float64)
    return np.tile(c, (spec.n, 1))


_GENERATORS = {
    "gaussian_mixture": _mixture,
    "swiss_roll": _swiss_roll,
    "trajectory": _trajectory,
    "point_mass": _point_mass,
}


def generate(spec: DatasetSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    return _GENERATORS[spec.kind](spec, rng)


def split_heldout(data: np.ndarray, frac: float = 0.1, seed: int = 0):
    """Seeded ``(train, heldout)`` split; ``heldout`` keeps at least one sample."""
    n = data.shape[0]
    n_held = max(1, int(round(frac * n))) if n > 1 else 0
    perm = np.random.default_rng(seed).permutation(n)
    return data[np.sort(perm[n_held:])], data[np.sort(perm[:n_held])]


def save_dataset(path, data: np.ndarray, spec: DatasetSpec | None = None) -> None:
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    header = {"dim": int(data.shape[1]), "n": int(data.shape[0])}
    if spec is not None:
        header.update(kind=spec.kind, params=spec.params, seed=spec.seed)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        np.savetxt(fh, data, fmt="%.17g")


def load_dataset(path):
    """Returns ``(data, header)``."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise DatasetError(f"{path}: missing header line")
        try:
            header = json.loads(first[2:])
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: bad header: {exc}") from exc
        try:
            data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise DatasetError(f"{path}: bad rows: {exc}") from exc
    if data.shape != (header.get("n"), header.get("dim")):
        raise DatasetError(f"{path}: header says {header.get('n')}x{header.get('dim')}, rows are {data.shape}")
    return data, header


# -- tasks -----------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    name: str
    constraint: dict
    heldout_index: int | None = None


@dataclass
class Task:
    name: str
    constraint: Constraint
    witness: np.ndarray
    reference: np.ndarray | None = None


def _frames_channels(c: dict, dim: int) -> tuple[int, int]:
    channels = int(c.get("channels", 2))
    if dim % channels:
        raise ValueError(f"dim {dim} is not a multiple of {channels} channels")
    return dim // channels, channels


def _resolve_target(c: dict, A: np.ndarray, ref: np.ndarray | None):
    tgt = c.get("target", "heldout")
    if isinstance(tgt, str):
        if tgt != "heldout":
            raise ValueError(f"unknown target source {tgt!r}")
        if ref is None:
            raise ValueError("target 'heldout' needs a held-out reference sample")
        return A @ ref
    return np.asarray(tgt, dtype=np.float64)


def build_constraint(c: dict, dim: int, ref: np.ndarray | None = None) -> Constraint:
    """Constraint from its config description; ``ref`` supplies held-out targets."""
    kind = c.get("kind")
    if kind == "mask":
        obs = EqualityObservation.from_mask(c["indices"], np.zeros(len(c["indices"])), dim)
        return EqualityObservation(obs.matrix, _resolve_target(c, obs.matrix, ref))
    if kind == "linear":
        A = np.asarray(c["matrix"], dtype=np.float64)
        return EqualityObservation(A, _resolve_target(c, A, ref))
    if kind == "average":
        A = averaging_operator(dim, int(c["factor"]), int(c.get("channels", 1)))
        return EqualityObservation(A, _resolve_target(c, A, ref))
    if kind == "blur":
        frames, channels = _frames_channels(c, dim)
        A = gaussian_blur_operator(frames, channels, float(c["sigma"]), c.get("radius"))
        return EqualityObservation(A, _resolve_target(c, A, ref))
    if kind == "endpoints":
        frames, channels = _frames_channels(c, dim)
        last = (frames - 1) * channels
        parts = [
            build_constraint({"kind": "mask", "indices": list(range(channels)), "target": c.get("start", "heldout")}, dim, ref),
            build_constraint({"kind": "mask", "indices": list(range(last, last + channels)), "target": c.get("end", "heldout")}, dim, ref),
        ]
        return CompositeConstraint(parts)
    if kind == "min_height":
        frames, channels = _frames_channels(c, dim)
        sel = c.get("frames", "middle")
        sel = [frames // 2] if sel == "middle" else [int(f) for f in sel]
        h = int(c.get("height_channel", channels - 1))
        parts = [LinearInequality.coordinate(f * channels + h, dim, float(c["threshold"])) for f in sel]
        return InequalityLoss(parts, dim)
    if kind == "lower_bound":
        parts = [LinearInequality.coordinate(int(i), dim, float(c["threshold"])) for i in c["indices"]]
        return InequalityLoss(parts, dim)
    if kind == "obstacle":
        frames, channels = _frames_channels(c, dim)
        centers = np.atleast_2d(np.asarray(c["centers"], dtype=np.float64))
        radii = np.broadcast_to(np.asarray(c["radii"], dtype=np.float64), (centers.shape[0],))
        if centers.shape[1] != channels:
            raise ValueError("obstacle centers must have one coordinate per channel")
        parts = [SphereExclusion(list(range(f * channels, (f + 1) * channels)), ctr, r)
                 for f in range(frames) for ctr, r in zip(centers, radii)]
        return InequalityLoss(parts, dim)
    if kind == "angular_momentum":
        frames, channels = _frames_channels(c, dim)
        return InequalityLoss([AngularMomentumInequality(frames, channels, float(c["threshold"]))], dim)
    if kind == "composite":
        return CompositeConstraint([build_constraint(p, dim, ref) for p in c["parts"]])
    raise ValueError(f"unknown constraint kind {kind!r}")


def _satisfied(con: Constraint, x: np.ndarray) -> np.ndarray:
    return np.atleast_1d(con.loss(x)) < 1e-6


def make_task(task: TaskSpec, heldout: np.ndarray, rng: np.random.Generator | None = None,
              dataset: np.ndarray | None = None) -> Task:
    """Build the task's constraint with targets read off a held-out sample, plus a feasibility witness.

    Equality targets come from ``heldout[heldout_index]`` (drawn from ``rng`` if
    unset), which is then its own witness. Otherwise the first sample of
    ``heldout`` then ``dataset`` with loss below 1e-6 is the witness.
    """
    heldout = np.atleast_2d(np.asarray(heldout, dtype=np.float64))
    dim = heldout.shape[1]
    idx = task.heldout_index
    if idx is None:
        idx = int((rng or np.random.default_rng(0)).integers(heldout.shape[0]))
    ref = heldout[idx]
    con = build_constraint(task.constraint, dim, ref)
    if _satisfied(con, ref[None])[0]:
        return Task(task.name, con, ref.copy(), ref.copy())
    pools = [heldout] + ([np.atleast_2d(dataset)] if dataset is not None else [])
    for pool in pools:
        ok = np.flatnonzero(_satisfied(con, pool))
        if ok.size:
            return Task(task.name, con, pool[ok[0]].copy(), ref.copy())
    raise InfeasibleTaskError(f"task {task.name!r}: no sample satisfies the constraint")
