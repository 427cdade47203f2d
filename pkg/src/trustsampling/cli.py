"""Command-line runner: ``trustsampling {train,calibrate,sample,benchmark,validate}``.

Exit status: 0 on success, 2 for configuration or missing-file errors, 3 when
training or sampling produces non-finite values, 4 when a method exceeds its
NFE budget. Every output is a deterministic function of config and seed;
wall-clock timings are only written with ``--timing``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig, baseline_sample
from .config import BudgetExceeded, ConfigError, ExperimentConfig, MethodConfig, load_config, validate
from .datasets import DatasetError, InfeasibleTaskError, generate, load_dataset, make_task, split_heldout
from .denoiser import CheckpointError, TrainingDivergedError, load_checkpoint, save_checkpoint, train
from .evaluation import constraint_violation, diversity, sliced_wasserstein
from .trust import SamplerConfig, SamplingError, calibrate_epsilon_max, ddim_sample, epsilon_norm_stats, trust_sample

log = logging.getLogger("trustsampling")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BUDGET = 0, 2, 3, 4
METRIC_COLUMNS = ("method", "task", "seed", "n", "mean_nfe", "violation", "sw2", "diversity", "runtime_s")
TRACE_COLUMNS = ("chain", "step", "t", "j_limit", "j_used", "boundary", "loss_before", "loss_after", "nfe")
GROUND_TRUTH = "ground_truth"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_samples(path: Path, x: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        np.savetxt(fh, np.atleast_2d(x), fmt="%.17g")


def _stream_seed(*parts) -> int:
    """Stable 32-bit seed from strings and ints, independent of hash randomization."""
    return zlib.crc32("/".join(str(p) for p in parts).encode("utf-8"))


# -- shared loading ----------------------------------------------------------------------


def load_data(cfg: ExperimentConfig):
    """``(train, heldout)`` arrays for the configured dataset."""
    path = cfg.dataset_path()
    if path is not None:
        data, _ = load_dataset(path)
    else:
        data = generate(cfg.dataset_spec())
    frac = float(cfg.dataset.get("heldout_fraction", 0.1))
    return split_heldout(data, frac, int(cfg.dataset.get("split_seed", cfg.dataset.get("seed", 0))))


def resolve_eps_max(cfg: ExperimentConfig, ckpt, m: MethodConfig) -> float | None:
    if m.kind != "trust" or m.eps_max != "calibrated":
        return None
    c = cfg.calibration
    grid = cfg.grid(cfg.steps_for(m))
    return calibrate_epsilon_max(ckpt.model, ckpt.schedule, grid, int(c.get("n_chains", 256)),
                                 int(c.get("seed", 0)), float(c.get("margin", 3.0)))


def run_method(cfg: ExperimentConfig, ckpt, m: MethodConfig, task, n: int, seed: int, budget=None,
               no_boundary=False, schedule_reversed=False, eps_max=None):
    """Samples and per-chain traces (``None`` for plain DDIM) for one method."""
    if eps_max is None:
        eps_max = resolve_eps_max(cfg, ckpt, m)
    scfg = cfg.sampler_config(m, seed, eps_max=eps_max, budget=budget, no_boundary=no_boundary,
                              schedule_reversed=schedule_reversed)
    if isinstance(scfg, SamplerConfig):
        return trust_sample(ckpt.model, task.constraint, ckpt.schedule, scfg, n)
    if isinstance(scfg, BaselineConfig):
        return baseline_sample(ckpt.model, task.constraint, ckpt.schedule, scfg, n)
    return ddim_sample(ckpt.model, ckpt.schedule, scfg, n, seed), None


def chain_nfe(traces, cfg: ExperimentConfig, m: MethodConfig, n: int, budget=None) -> np.ndarray:
    if traces is None:
        return np.full(n, cfg.steps_for(m, budget), dtype=np.int64)
    return np.array([tr.total_nfe for tr in traces], dtype=np.int64)


def build_task(cfg: ExperimentConfig, name: str, heldout, train_data, seed: int):
    spec = cfg.task(name)
    rng = np.random.default_rng(_stream_seed("task", name, seed))
    return make_task(spec, heldout, rng, train_data)


# -- commands ------------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, args) -> int:
    tcfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    train_data, _ = load_data(cfg)
    s = cfg.noise_schedule()
    log.info("training on %d samples of dim %d", *train_data.shape)
    res = train(train_data, s, tcfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    meta = {"name": cfg.name, "dataset": tcfg.dataset_id, "epochs": tcfg.epochs, "batch_size": tcfg.batch_size,
            "learning_rate": tcfg.learning_rate, "seed": tcfg.seed, "final_loss": res.final_loss}
    ckpt_path = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_path()
    save_checkpoint(ckpt_path, res.model, s, meta)
    _write_csv(out / "train_loss.csv", ("step", "loss"),
               ({"step": i, "loss": v} for i, v in enumerate(res.loss_history)))
    print(f"checkpoint {ckpt_path} final_loss {res.final_loss:.6f}")
    return EXIT_OK


def _load_ckpt(cfg: ExperimentConfig, args):
    return load_checkpoint(Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_path())


def cmd_calibrate(cfg: ExperimentConfig, args) -> int:
    ckpt = _load_ckpt(cfg, args)
    c = cfg.calibration
    n_chains = args.n_chains or int(c.get("n_chains", 256))
    seed = int(c.get("seed", 0)) if args.seed is None else args.seed
    margin = float(c.get("margin", 3.0))
    grid = cfg.grid()
    mean, std, _ = epsilon_norm_stats(ckpt.model, ckpt.schedule, grid, n_chains, seed)
    result = {"eps_max": mean + margin * std, "mean": mean, "std": std, "margin": margin,
              "n_chains": n_chains, "seed": seed, "steps": grid.K}
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "eps_max.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    print(f"eps_max {result['eps_max']:.6f} (mean {mean:.6f} std {std:.6f} margin {margin})")
    return EXIT_OK


def cmd_sample(cfg: ExperimentConfig, args) -> int:
    ckpt = _load_ckpt(cfg, args)
    if not (args.method or cfg.methods) or not (args.task or cfg.tasks):
        raise ConfigError("sample needs at least one method and one task")
    m = cfg.method(args.method or cfg.methods[0].name)
    task_name = args.task or cfg.tasks[0].name
    seed = cfg.seeds[0] if args.seed is None else args.seed
    n = args.n or cfg.n
    train_data, heldout = load_data(cfg)
    task = build_task(cfg, task_name, heldout, train_data, seed)
    budget = args.nfe_budget if args.nfe_budget is not None else cfg.nfe_budget
    x, traces = run_method(cfg, ckpt, m, task, n, seed, budget, args.no_boundary, args.schedule_reversed)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{m.name}_{task_name}_s{seed}"
    _write_samples(out / f"samples_{stem}.txt", x)
    if traces is not None:
        rows = (r for i, tr in enumerate(traces) for r in tr.rows(i))
        _write_csv(out / f"traces_{stem}.csv", TRACE_COLUMNS, rows)
    nfe = chain_nfe(traces, cfg, m, n, budget)
    print(f"{stem}: violation {constraint_violation(x, task.constraint):.6g} "
          f"total_nfe mean {nfe.mean():.2f} max {nfe.max()}")
    if budget is not None and nfe.max() > budget:
        raise BudgetExceeded(f"{m.name}: a chain used {nfe.max()} NFEs, budget {budget}")
    return EXIT_OK


@dataclass(frozen=True)
class Cell:
    method: str
    task: str
    seed: int


def _eval_cell(cfg: ExperimentConfig, ckpt, cell: Cell, data, eps_cache: dict, opts) -> dict:
    train_data, heldout = data
    task = build_task(cfg, cell.task, heldout, train_data, cell.seed)
    ev = cfg.evaluation
    rng = np.random.default_rng(_stream_seed("eval", cell.task, cell.seed))
    ref_size = min(int(ev.get("reference_size", heldout.shape[0])), heldout.shape[0])
    ref = heldout[np.sort(rng.choice(heldout.shape[0], ref_size, replace=False))]
    dirs = rng.standard_normal((int(ev.get("n_projections", 256)), heldout.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    div_seed = _stream_seed("diversity", cell.task, cell.seed)
    n_pairs = int(ev.get("n_pairs", 1000))

    start = time.perf_counter()
    if cell.method == GROUND_TRUTH:
        x = train_data[np.random.default_rng(div_seed).choice(train_data.shape[0], opts.n, replace=False)]
        nfe = np.zeros(opts.n)
    else:
        m = cfg.method(cell.method)
        x, traces = run_method(cfg, ckpt, m, task, opts.n, cell.seed, opts.budget, opts.no_boundary,
                               opts.schedule_reversed, eps_cache.get(cell.method))
        nfe = chain_nfe(traces, cfg, m, opts.n, opts.budget)
        if opts.budget is not None and nfe.max() > opts.budget:
            raise BudgetExceeded(f"{cell}: a chain used {nfe.max()} NFEs, budget {opts.budget}")
    elapsed = time.perf_counter() - start
    return {
        "method": cell.method, "task": cell.task, "seed": cell.seed, "n": opts.n,
        "mean_nfe": float(nfe.mean()),
        "violation": constraint_violation(x, task.constraint),
        "sw2": sliced_wasserstein(x, ref, directions=dirs),
        "diversity": diversity(x, n_pairs, np.random.default_rng(div_seed)),
        "runtime_s": elapsed if opts.timing else float("nan"),
    }


_WORKER: dict = {}


def _worker_init(cfg, ckpt_path, eps_cache, opts):
    _WORKER.update(cfg=cfg, ckpt=load_checkpoint(ckpt_path), eps=eps_cache, opts=opts,
                   data=load_data(cfg))


def _worker_run(cell: Cell) -> dict:
    w = _WORKER
    return _eval_cell(w["cfg"], w["ckpt"], cell, w["data"], w["eps"], w["opts"])


@dataclass(frozen=True)
class _Opts:
    n: int
    budget: int | None
    no_boundary: bool
    schedule_reversed: bool
    timing: bool


def cmd_benchmark(cfg: ExperimentConfig, args) -> int:
    ckpt_path = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_path()
    ckpt = load_checkpoint(ckpt_path)
    budget = args.nfe_budget if args.nfe_budget is not None else cfg.nfe_budget
    for line in validate_budgets(cfg, budget):
        print(line)
    seeds = cfg.seeds if args.seed is None else [args.seed]
    methods = [m.name for m in cfg.methods] if not args.method else [args.method]
    tasks = [t.name for t in cfg.tasks] if not args.task else [args.task]
    opts = _Opts(args.n or cfg.n, budget, args.no_boundary, args.schedule_reversed, args.timing)
    eps_cache = {m.name: resolve_eps_max(cfg, ckpt, m) for m in cfg.methods if m.name in methods}
    cells = [Cell(m, t, s) for t in tasks for s in seeds for m in methods]
    if not args.no_ground_truth:
        cells += [Cell(GROUND_TRUTH, t, s) for t in tasks for s in seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers, initializer=_worker_init,
                                 initargs=(cfg, ckpt_path, eps_cache, opts)) as pool:
            rows = list(pool.map(_worker_run, cells))
    else:
        data = load_data(cfg)
        rows = [_eval_cell(cfg, ckpt, c, data, eps_cache, opts) for c in cells]
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    (out / "plot_metrics.py").write_text(PLOT_SCRIPT, encoding="utf-8")
    for r in rows:
        print(f"{r['method']:>14} {r['task']:>12} seed {r['seed']:>4}: violation {r['violation']:.4g} "
              f"sw2 {r['sw2']:.4g} diversity {r['diversity']:.4g} nfe {r['mean_nfe']:.1f}")
    if budget is not None:
        over = [r for r in rows if r["mean_nfe"] > budget]
        if over:
            raise BudgetExceeded(f"{len(over)} rows exceed the {budget}-NFE budget")
    return EXIT_OK


def validate_budgets(cfg: ExperimentConfig, budget=None) -> list[str]:
    lines = []
    for m in cfg.methods:
        declared = cfg.declared_budget(m, budget)
        if budget is not None and declared > budget:
            raise BudgetExceeded(f"method {m.name!r} declares {declared} NFEs, over budget {budget}")
        lines.append(f"{m.name} ({m.kind}): steps={cfg.steps_for(m, budget)} nfe_budget={declared}")
    return lines


def cmd_validate(cfg: ExperimentConfig, args) -> int:
    validate(cfg)
    path = cfg.dataset_path()
    if path is not None and not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    budget = args.nfe_budget if args.nfe_budget is not None else cfg.nfe_budget
    print(f"config {cfg.name!r}: {len(cfg.methods)} methods, {len(cfg.tasks)} tasks, seeds {cfg.seeds}")
    for line in validate_budgets(cfg, budget):
        print("  " + line)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_path()
    print(f"  checkpoint {ckpt}: {'present' if ckpt.is_file() else 'missing (run train)'}")
    return EXIT_OK


PLOT_SCRIPT = '''"""Plot metrics.csv written by `trustsampling benchmark`. Requires matplotlib."""
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib.pyplot as plt

path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).with_name("metrics.csv")
rows = list(csv.DictReader(path.open()))
metrics = ("violation", "sw2", "diversity", "mean_nfe")
tasks = sorted({r["task"] for r in rows})
fig, axes = plt.subplots(len(tasks), len(metrics), figsize=(4 * len(metrics), 3 * len(tasks)), squeeze=False)
for i, task in enumerate(tasks):
    by_method = defaultdict(list)
    for r in rows:
        if r["task"] == task:
            by_method[r["method"]].append(r)
    names = sorted(by_method)
    for j, metric in enumerate(metrics):
        vals = [[float(r[metric]) for r in by_method[m]] for m in names]
        axes[i][j].boxplot(vals)
        axes[i][j].set_xticks(range(1, len(names) + 1), names, rotation=30, fontsize=8)
        axes[i][j].set_title(f"{task}: {metric}")
fig.tight_layout()
out = path.with_suffix(".png")
fig.savefig(out, dpi=120)
print(out)
'''


COMMANDS = {"train": cmd_train, "calibrate": cmd_calibrate, "sample": cmd_sample,
            "benchmark": cmd_benchmark, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--seed", type=int, help="override the seed (train seed, calibration seed, or the seed list)")
    common.add_argument("--out", help="override output_dir")
    common.add_argument("--nfe-budget", type=int, help="override nfe_budget")
    common.add_argument("--no-boundary", action="store_true", help="disable the eps_max boundary check")
    common.add_argument("--schedule-reversed", action="store_true", help="apply schedule start at the least noisy step")
    common.add_argument("--checkpoint", help="checkpoint path (default: output_dir/<checkpoint>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trustsampling", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the denoiser")
    c = sub.add_parser("calibrate", parents=[common], help="estimate eps_max from unguided chains")
    c.add_argument("--n-chains", type=int)
    s = sub.add_parser("sample", parents=[common], help="draw guided samples for one method and task")
    s.add_argument("--task")
    s.add_argument("--method")
    s.add_argument("--n", type=int)
    b = sub.add_parser("benchmark", parents=[common], help="metrics for every (method, task, seed)")
    b.add_argument("--task")
    b.add_argument("--method")
    b.add_argument("--n", type=int)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--timing", action="store_true", help="record wall-clock runtime_s (not reproducible)")
    b.add_argument("--no-ground-truth", action="store_true", help="skip the ground-truth reference rows")
    sub.add_parser("validate", parents=[common], help="check a config and print per-method budgets")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.output_dir = Path(args.out)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DatasetError, CheckpointError, InfeasibleTaskError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BudgetExceeded as exc:
        print(f"error: budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
