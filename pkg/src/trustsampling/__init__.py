"""Trust sampling: constraint-guided diffusion sampling with trust-scheduled inner optimization."""

from .baselines import BaselineConfig, baseline_sample, dps_sample, dsg_sample, lgd_mc_sample
from .constraints import (
    AngularMomentumInequality,
    CompositeConstraint,
    Constraint,
    EqualityObservation,
    InequalityLoss,
    LinearInequality,
    SphereExclusion,
    guidance_gradient,
    jensen_gap_oracle,
)
from .datasets import DatasetSpec, TaskSpec, generate, make_task, split_heldout
from .denoiser import DenoiserModel, TrainConfig, load_checkpoint, save_checkpoint, train
from .diffusion import NoiseSchedule, StepGrid, forward_diffuse, make_schedule, predict_x0, uniform_grid
from .evaluation import MetricReport, constraint_violation, diversity, run_jensen_suite, sliced_wasserstein
from .trust import (
    SampleTrace,
    SamplerConfig,
    TrustSchedule,
    calibrate_epsilon_max,
    ddim_sample,
    iteration_limit,
    nfe_budget_for,
    trust_sample,
)

__version__ = "0.1.0"

__all__ = [
    "AngularMomentumInequality", "BaselineConfig", "CompositeConstraint", "Constraint", "DatasetSpec",
    "DenoiserModel", "EqualityObservation", "InequalityLoss", "LinearInequality", "MetricReport",
    "NoiseSchedule", "SampleTrace", "SamplerConfig", "SphereExclusion", "StepGrid", "TaskSpec", "TrainConfig",
    "TrustSchedule", "baseline_sample", "calibrate_epsilon_max", "constraint_violation", "ddim_sample",
    "diversity", "dps_sample", "dsg_sample", "forward_diffuse", "generate", "guidance_gradient",
    "iteration_limit", "jensen_gap_oracle", "lgd_mc_sample", "load_checkpoint", "make_schedule", "make_task",
    "nfe_budget_for", "predict_x0", "run_jensen_suite", "save_checkpoint", "sliced_wasserstein",
    "split_heldout", "train", "trust_sample", "uniform_grid",
]
