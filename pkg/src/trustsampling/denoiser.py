"""Time-conditioned MLP noise predictor with exact input vector-Jacobian products.

The network maps ``concat(x_t, embed(t))`` through smooth hidden layers to an
``eps`` prediction of the same dimension as ``x_t``. Everything is float64 and
backpropagated by hand so the guidance gradient can flow through the full
network.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"TSCKPT01"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (sorted keys)
    rest      float64 LE weights: for each layer in order, W (in x out,
              row-major) then b (out,)
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, make_schedule

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TSCKPT01"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or inconsistent checkpoint files."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _silu(z):
    return z * _sigmoid(z)


def _silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of raw integer timesteps, shape ``(n, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=1)
    return emb


@dataclass
class DenoiserModel:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    time_embed_dim: int = 32
    activation: str = "silu"

    def __post_init__(self) -> None:
        self.layer_dims = [int(v) for v in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise ValueError("need at least an input and an output width")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.layer_dims[0] != self.dim + self.time_embed_dim:
            raise ValueError("first layer width must equal d + time_embed_dim")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("weights do not match layer_dims")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} has shape {W.shape}/{b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def dim(self) -> int:
        return self.layer_dims[-1]

    @classmethod
    def init(cls, dim: int, hidden=(128, 128, 128, 128), time_embed_dim: int = 32,
             activation: str = "silu", seed: int = 0) -> "DenoiserModel":
        rng = np.random.default_rng(seed)
        dims = [dim + time_embed_dim, *hidden, dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(dims, weights, biases, time_embed_dim, activation)

    @classmethod
    def zeros(cls, dim: int, hidden=(128, 128, 128, 128), time_embed_dim: int = 32,
              activation: str = "silu") -> "DenoiserModel":
        dims = [dim + time_embed_dim, *hidden, dim]
        return cls(dims, [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
                   [np.zeros(b) for b in dims[1:]], time_embed_dim, activation)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(list(self.layer_dims), [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.time_embed_dim, self.activation)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    # -- evaluation -----------------------------------------------------------------

    def _inputs(self, x_t, t):
        x = np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[-1] != self.dim:
            raise ValueError(f"expected input dimension {self.dim}, got {x2.shape[-1]}")
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            t_arr = np.full(x2.shape[0], int(t_arr))
        emb = time_embedding(t_arr, self.time_embed_dim)
        return np.concatenate([x2, emb], axis=1), single

    def _run(self, h):
        act, _ = ACTIVATIONS[self.activation]
        pre = []
        acts = [h]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if i == last:
                return z, pre, acts
            pre.append(z)
            h = act(z)
            acts.append(h)
        raise AssertionError("unreachable")

    def _backward(self, pre, g):
        """Pull ``g`` (grad wrt output) back to the input of the first layer."""
        _, dact = ACTIVATIONS[self.activation]
        for i in range(len(self.weights) - 1, 0, -1):
            g = (g @ self.weights[i].T) * dact(pre[i - 1])
        return g @ self.weights[0].T

    def forward(self, x_t, t) -> np.ndarray:
        """Predicted noise for ``x_t`` of shape ``(d,)`` or ``(n, d)``."""
        h, single = self._inputs(x_t, t)
        out, _, _ = self._run(h)
        return out[0] if single else out

    __call__ = forward

    def vjp_input(self, x_t, t, cotangent) -> np.ndarray:
        """``cotangent^T d eps / d x_t`` (spatial input only)."""
        eps, vjp = self.forward_and_vjp(x_t, t, cotangent)
        return vjp

    def forward_and_vjp(self, x_t, t, cotangent):
        """Forward pass plus input VJP sharing one set of activations."""
        h, single = self._inputs(x_t, t)
        out, pre, _ = self._run(h)
        g = np.atleast_2d(np.asarray(cotangent, dtype=np.float64))
        if g.shape != out.shape:
            raise ValueError(f"cotangent shape {g.shape} does not match output {out.shape}")
        gin = self._backward(pre, g)[:, : self.dim]
        if single:
            return out[0], gin[0]
        return out, gin

    def forward_with_vjp_fn(self, x_t, t):
        """Forward pass returning eps and a closure computing input VJPs.

        Lets callers evaluate a loss on the output before choosing the cotangent
        without paying for a second network pass.
        """
        h, single = self._inputs(x_t, t)
        out, pre, _ = self._run(h)

        def vjp(cotangent):
            g = np.atleast_2d(np.asarray(cotangent, dtype=np.float64))
            gin = self._backward(pre, g)[:, : self.dim]
            return gin[0] if single else gin

        return (out[0] if single else out), vjp

    def parameter_grads(self, h, target):
        """Mean-squared error against ``target`` and its parameter gradients."""
        _, dact = ACTIVATIONS[self.activation]
        out, pre, acts = self._run(h)
        diff = out - target
        loss = float(np.mean(diff * diff))
        g = 2.0 * diff / diff.size
        gW = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gW[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * dact(pre[i - 1])
        return loss, gW, gb


# -- training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 512
    learning_rate: float = 1e-3
    seed: int = 0
    dataset_id: str = ""
    hidden: tuple[int, ...] = (128, 128, 128, 128)
    time_embed_dim: int = 32
    activation: str = "silu"
    lr_decay: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.lr_decay not in ("cosine", "none"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class TrainResult:
    model: DenoiserModel
    loss_history: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        # mean of the last 5% of steps; single-batch losses are noisy
        n = max(1, len(self.loss_history) // 20)
        return float(np.mean(self.loss_history[-n:]))


def train(dataset, schedule: NoiseSchedule, cfg: TrainConfig, model: DenoiserModel | None = None) -> TrainResult:
    """Fit ``eps_theta`` by minimizing ``E ||eps - eps_theta(x_t, t)||^2`` with Adam."""
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (n, d) array")
    n, d = data.shape
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = DenoiserModel.init(d, cfg.hidden, cfg.time_embed_dim, cfg.activation,
                                   seed=int(rng.integers(2**63)))
    else:
        model = model.copy()
    if model.dim != d:
        raise ValueError(f"model dimension {model.dim} does not match data dimension {d}")

    params = model.parameters()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    sqrt_a = np.sqrt(schedule.alpha_cum)
    sqrt_1ma = np.sqrt(1.0 - schedule.alpha_cum)
    history = []
    for step in range(total):
        idx = rng.integers(0, n, size=cfg.batch_size)
        t = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, d))
        x_t = sqrt_a[t - 1, None] * data[idx] + sqrt_1ma[t - 1, None] * eps
        h, _ = model._inputs(x_t, t)
        loss, gW, gb = model.parameter_grads(h, eps)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite training loss at step {step} (lr={cfg.learning_rate})")
        history.append(loss)
        if cfg.lr_decay == "cosine":
            lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))
        else:
            lr = cfg.learning_rate
        if lr == 0.0:
            continue
        grads = []
        for a, b in zip(gW, gb):
            grads += [a, b]
        c1 = 1.0 - cfg.beta1 ** (step + 1)
        c2 = 1.0 - cfg.beta2 ** (step + 1)
        for p, g, v1, v2 in zip(params, grads, m1, m2):
            v1 *= cfg.beta1
            v1 += (1.0 - cfg.beta1) * g
            v2 *= cfg.beta2
            v2 += (1.0 - cfg.beta2) * g * g
            p -= lr * (v1 / c1) / (np.sqrt(v2 / c2) + cfg.adam_eps)
        if step % 2000 == 0:
            log.debug("step %d/%d loss %.5f", step, total, loss)
    return TrainResult(model, history)


def smoothed(history, window: int = 200) -> np.ndarray:
    """Trailing moving average used to inspect loss curves."""
    h = np.asarray(history, dtype=np.float64)
    if h.size < window:
        window = max(1, h.size)
    kernel = np.ones(window) / window
    return np.convolve(h, kernel, mode="valid")


# -- checkpoints ----------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: DenoiserModel
    schedule: NoiseSchedule
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, model: DenoiserModel, schedule: NoiseSchedule, metadata: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "T": schedule.T,
        "schedule_kind": schedule.kind,
        "beta_start": schedule.beta_start,
        "beta_end": schedule.beta_end,
        "layer_dims": list(model.layer_dims),
        "time_embed_dim": model.time_embed_dim,
        "activation": model.activation,
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = model.flat_parameters().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    dims = [int(v) for v in header["layer_dims"]]
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    body = raw[16 + hlen:]
    if len(body) != 8 * expected:
        raise CheckpointError(
            f"{path}: layer_dims {dims} need {expected} weights, payload holds {len(body) / 8:g}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    weights, biases, pos = [], [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos:pos + a * b].reshape(a, b).copy())
        pos += a * b
        biases.append(flat[pos:pos + b].copy())
        pos += b
    try:
        model = DenoiserModel(dims, weights, biases, int(header["time_embed_dim"]), header["activation"])
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    schedule = make_schedule(header["schedule_kind"], int(header["T"]),
                             header["beta_start"], header["beta_end"])
    return Checkpoint(model, schedule, header.get("metadata", {}))


def closed_form_point_mass_eps(x_t, t: int, center, s: NoiseSchedule) -> np.ndarray:
    """Exact optimal eps for data concentrated at ``center``."""
    a = s.alpha_cum_at(t)
    return (np.asarray(x_t, dtype=np.float64) - math.sqrt(a) * np.asarray(center)) / math.sqrt(1.0 - a)


__all__ = [
    "Checkpoint", "CheckpointError", "DenoiserModel", "TrainConfig", "TrainResult",
    "TrainingDivergedError", "closed_form_point_mass_eps", "load_checkpoint",
    "save_checkpoint", "smoothed", "time_embedding", "train",
]
