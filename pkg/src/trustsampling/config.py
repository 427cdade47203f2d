"""Experiment configuration: YAML schema, validation and object construction.

See README.md ("Experiment config") for the full schema. Input paths
(``dataset.path``) resolve relative to the config file; ``output_dir`` and
``checkpoint`` resolve relative to the working directory and ``output_dir``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .baselines import BaselineConfig
from .datasets import DatasetError, DatasetSpec, TaskSpec
from .denoiser import TrainConfig
from .diffusion import NoiseSchedule, StepGrid, make_schedule, uniform_grid
from .trust import SamplerConfig, TrustSchedule, nfe_budget_for

METHOD_KINDS = ("trust", "dps", "dsg", "lgd_mc", "ddim")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


class BudgetExceeded(RuntimeError):
    """A method needs more network evaluations than the budget allows."""


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return d[key]


@dataclass
class MethodConfig:
    name: str
    kind: str
    steps: int | None = None
    schedule: TrustSchedule | None = None
    w: float = 1.0
    eps_max: float | str | None = None
    schedule_reversed: bool = False
    guidance_scale: float = 1.0
    mc_particles: int | None = None
    mc_radius_scale: float | None = None
    dsg_step: str = "sphere"

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        where = f"method {d.get('name', '?')!r}"
        kind = _require(d, "kind", where)
        if kind not in METHOD_KINDS:
            raise ConfigError(f"{where}: unknown kind {kind!r} (expected one of {METHOD_KINDS})")
        sched = None
        if kind == "trust":
            sd = _require(d, "schedule", where)
            try:
                sched = TrustSchedule(sd.get("kind", "constant"), float(sd["start"]), float(sd.get("end", sd["start"])))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{where}: bad schedule: {exc}") from exc
        eps_max = d.get("eps_max")
        if isinstance(eps_max, str) and eps_max != "calibrated":
            raise ConfigError(f"{where}: eps_max must be a number, null or 'calibrated'")
        m = cls(
            name=str(d.get("name", kind)), kind=kind, steps=d.get("steps"), schedule=sched,
            w=float(d.get("w", 1.0)), eps_max=eps_max, schedule_reversed=bool(d.get("schedule_reversed", False)),
            guidance_scale=float(d.get("guidance_scale", 1.0)), mc_particles=d.get("mc_particles"),
            mc_radius_scale=d.get("mc_radius_scale"), dsg_step=d.get("dsg_step", "sphere"),
        )
        return m


@dataclass
class ExperimentConfig:
    name: str
    output_dir: Path
    dataset: dict
    diffusion: dict
    train: TrainConfig
    sampling: dict
    calibration: dict
    tasks: list[TaskSpec]
    methods: list[MethodConfig]
    seeds: list[int]
    n: int
    nfe_budget: int | None
    evaluation: dict
    checkpoint: str = "model.ckpt"
    base_dir: Path = field(default_factory=Path)

    # -- derived objects ---------------------------------------------------------

    def noise_schedule(self) -> NoiseSchedule:
        d = self.diffusion
        return make_schedule(d.get("schedule", "linear"), int(d.get("T", 1000)),
                             float(d.get("beta_start", 1e-4)), float(d.get("beta_end", 0.02)))

    def dataset_spec(self) -> DatasetSpec | None:
        d = self.dataset
        if "path" in d:
            return None
        return DatasetSpec(d["kind"], int(d["n"]), int(d.get("seed", 0)), dict(d.get("params", {})))

    def dataset_path(self) -> Path | None:
        p = self.dataset.get("path")
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def checkpoint_path(self) -> Path:
        p = Path(self.checkpoint)
        return p if p.is_absolute() else self.output_dir / p

    def grid(self, steps: int | None = None) -> StepGrid:
        T = int(self.diffusion.get("T", 1000))
        return uniform_grid(T, int(steps or self.sampling.get("steps", 200)), float(self.sampling.get("eta", 1.0)))

    def method(self, name: str) -> MethodConfig:
        for m in self.methods:
            if m.name == name:
                return m
        raise ConfigError(f"no method named {name!r}; have {[m.name for m in self.methods]}")

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"no task named {name!r}; have {[t.name for t in self.tasks]}")

    def steps_for(self, m: MethodConfig, budget: int | None = None) -> int:
        budget = self.nfe_budget if budget is None else budget
        if m.steps is not None:
            return int(m.steps)
        if m.kind in ("dps", "dsg", "lgd_mc") and budget is not None:
            return budget // 2
        if m.kind == "ddim" and budget is not None:
            return min(budget, int(self.diffusion.get("T", 1000)))
        return int(self.sampling.get("steps", 200))

    def sampler_config(self, m: MethodConfig, seed: int, eps_max=None, budget: int | None = None,
                       no_boundary: bool = False, schedule_reversed: bool = False):
        """Sampler config for ``m``; ``eps_max`` resolves a 'calibrated' entry."""
        budget = self.nfe_budget if budget is None else budget
        grid = self.grid(self.steps_for(m, budget))
        if m.kind == "trust":
            sched = m.schedule
            if budget is not None and grid.K > budget:
                raise BudgetExceeded(f"method {m.name!r} takes {grid.K} steps, over budget {budget}")
            if budget is not None and nfe_budget_for(sched, grid.K) > budget:
                sched = sched.scaled_to_budget(grid.K, budget)
            em = m.eps_max
            if em == "calibrated":
                em = eps_max
            if no_boundary:
                em = None
            return SamplerConfig(grid, sched, m.w, None if em is None else float(em), seed,
                                 m.schedule_reversed or schedule_reversed, nfe_cap=budget)
        if m.kind == "ddim":
            return grid
        return BaselineConfig(m.kind, grid, m.guidance_scale, m.mc_particles, m.mc_radius_scale, seed, m.dsg_step)

    def declared_budget(self, m: MethodConfig, budget: int | None = None):
        budget = self.nfe_budget if budget is None else budget
        cfg = self.sampler_config(m, 0, eps_max=1.0, budget=budget)
        if m.kind == "ddim":
            return cfg.K
        return cfg.nfe_budget


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw, base_dir=path.parent, overrides=overrides)


def config_from_dict(raw: dict, base_dir=Path("."), overrides: dict | None = None) -> ExperimentConfig:
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    base_dir = Path(base_dir)
    ds = dict(_require(raw, "dataset", "config"))
    if "path" not in ds:
        _require(ds, "kind", "dataset")
        _require(ds, "n", "dataset")
    tcfg = dict(raw.get("train", {}))
    model = dict(raw.get("model", {}))
    try:
        train = TrainConfig(
            epochs=int(tcfg.get("epochs", 200)), batch_size=int(tcfg.get("batch_size", 512)),
            learning_rate=float(tcfg.get("learning_rate", 1e-3)), seed=int(tcfg.get("seed", 0)),
            dataset_id=str(ds.get("path", ds.get("kind"))),
            hidden=tuple(model.get("hidden", (128, 128, 128, 128))),
            time_embed_dim=int(model.get("time_embed_dim", 32)), activation=model.get("activation", "silu"),
            lr_decay=tcfg.get("lr_decay", "cosine"),
        )
        tasks = [TaskSpec(str(_require(t, "name", "task")), dict(_require(t, "constraint", "task")),
                          t.get("heldout_index")) for t in raw.get("tasks", [])]
        methods = [MethodConfig.from_dict(m) for m in raw.get("methods", [])]
    except (TypeError, ValueError, DatasetError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate method names: {names}")
    out = Path(raw.get("output_dir", "runs/" + str(raw.get("name", "experiment"))))
    cfg = ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        output_dir=out,
        dataset=ds, diffusion=dict(raw.get("diffusion", {})), train=train,
        sampling=dict(raw.get("sampling", {})), calibration=dict(raw.get("calibration", {})),
        tasks=tasks, methods=methods, seeds=[int(s) for s in raw.get("seeds", [0])],
        n=int(raw.get("n", 64)), nfe_budget=None if raw.get("nfe_budget") is None else int(raw["nfe_budget"]),
        evaluation=dict(raw.get("evaluation", {})), checkpoint=str(raw.get("checkpoint", "model.ckpt")),
        base_dir=base_dir,
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> list[str]:
    """Check cross-field consistency; returns human-readable budget lines."""
    try:
        cfg.noise_schedule()
        if cfg.dataset_spec() is not None:
            cfg.dataset_spec()
        lines = []
        for m in cfg.methods:
            declared = cfg.declared_budget(m)
            if cfg.nfe_budget is not None and declared > cfg.nfe_budget:
                raise ConfigError(f"method {m.name!r} declares {declared} NFEs, over budget {cfg.nfe_budget}")
            lines.append(f"{m.name} ({m.kind}): steps={cfg.steps_for(m)} nfe_budget={declared}")
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.n < 1:
        raise ConfigError("n must be >= 1")
    return lines
