"""Seeded experiment runner: datasets, models, metrics, reports.

One ExperimentConfig describes a cell of the benchmark tables: an
experiment, a model flavour (constrained / unconstrained / unconstrained
on transformed outputs), an inference mode, noise and drop settings, and a
replicate count.  Replicates are embarrassingly parallel; every replicate
derives its own RNG streams from (seed, replicate, purpose), so reports
are bit-identical across worker counts.
"""

from __future__ import annotations

import hashlib
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .constraints import ConstraintSpec
from .datasets import (
    DP_TRANSFORM,
    FreeFallParams,
    LogsinParams,
    OscillatorParams,
    PendulumParams,
    SimDataset,
    TriangleParams,
    dp_constraint_row,
    gen_damped_oscillator,
    gen_free_fall,
    gen_harmonic_oscillator,
    gen_logsin,
    gen_triangle,
    load_double_pendulum,
    read_pendulum_csv,
)
from .errors import InputError, SumGPError, TrainingError
from .gaussian import TaskedDataset
from .model import FittedGP, ModelSpec
from .posegram import (
    AnchorPoint,
    lift_to_gram,
    project_pose_to_lengths,
    recover_coordinates,
    triangle_constraints,
)
from .seeding import rng_for
from .training import TrainConfig, train
from .transforms import (
    BacktransformContext,
    apply_transform,
    backtransform,
    backtransform_intervals,
    branch_levels,
    extend_with_virtual,
    find_branch_crossings,
    make_virtual_measurements,
)

EXPERIMENTS = ("ho", "dho", "ff", "logsin", "triangle", "dp")
MODEL_KINDS = ("constrained", "unconstrained", "transformed-unconstrained")

# lr, iterations, scheduler_steps, scheduler_factor per experiment;
# the double pendulum trains its two model flavours on different schedules
SCHEDULES = {
    "ho": (0.1, 200, 100, 0.5),
    "dho": (0.1, 200, 100, 0.5),
    "ff": (0.1, 200, 100, 0.5),
    "logsin": (0.1, 200, 100, 0.5),
    "triangle": (0.1, 2000, 800, 0.2),
    "dp": (0.1, 2000, 800, 0.2),
    "dp-unconstrained": (0.1, 2000, 500, 0.5),
}

DEFAULT_NOISE = {"ho": 0.1, "dho": 0.1, "ff": 0.1, "logsin": 0.1, "triangle": 1e-4, "dp": 0.0}
DEFAULT_INFERENCE = {"ho": "laplace", "dho": "laplace", "ff": "laplace",
                     "logsin": "laplace", "triangle": "exact", "dp": "exact"}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: str = "constrained"
    inference: str = ""
    noise_sigma_n: float = -1.0
    drop_prob_fd: float = 0.0
    replicates: int = 50
    seed: int = 0
    learning_rate: float = -1.0
    iterations: int = -1
    scheduler_steps: int = -1
    scheduler_factor: float = -1.0
    max_restarts: int = 10
    out_dir: str = ""
    dp_csv: str = ""
    dp_segment_length: int = 200
    dp_train_points: int = 15
    workers: int = 0
    figures: bool = False
    trace: bool = False
    dataset_overrides: tuple = ()

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise InputError(f"unknown experiment {self.experiment!r}")
        if self.model not in MODEL_KINDS:
            raise InputError(f"unknown model kind {self.model!r}")
        if self.model == "transformed-unconstrained" and self.experiment != "triangle":
            raise InputError("transformed-unconstrained is only defined for the triangle")
        if self.experiment == "dp" and not self.dp_csv:
            raise InputError("the double-pendulum experiment needs dp_csv")
        if self.inference and self.inference != "exact" and (
            self.model != "constrained" or self.experiment in ("triangle", "dp")
        ):
            raise InputError("laplace / vi apply to the constrained model of the "
                             "transformed experiments only")
        if self.replicates < 1:
            raise InputError("replicates must be positive")

    @property
    def effective_inference(self) -> str:
        if self.model != "constrained":
            return "exact"
        return self.inference or DEFAULT_INFERENCE[self.experiment]

    @property
    def effective_noise(self) -> float:
        return DEFAULT_NOISE[self.experiment] if self.noise_sigma_n < 0 else self.noise_sigma_n

    def train_config(self, flavour: str = "main") -> TrainConfig:
        key = self.experiment
        if self.experiment == "dp" and flavour != "constrained-main":
            key = "dp-unconstrained"
        lr, iters, steps, factor = SCHEDULES[key]
        extra = self.experiment == "logsin" and flavour == "constrained-main"
        if flavour == "constrained-main" and self.effective_inference == "vi":
            # the variational distribution adds O(n^2) parameters and has no
            # published schedule; stretch the base one
            iters, steps = 10 * iters, 10 * steps
        iters = iters if self.iterations < 0 else self.iterations
        return TrainConfig(
            learning_rate=lr if self.learning_rate < 0 else self.learning_rate,
            iterations=iters,
            scheduler_steps=min(steps if self.scheduler_steps < 0 else self.scheduler_steps,
                                iters),
            scheduler_factor=factor if self.scheduler_factor < 0 else self.scheduler_factor,
            max_restarts=self.max_restarts,
            extra_guards=extra,
        )

    def digest(self) -> str:
        payload = repr(sorted(asdict(self).items())).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


@dataclass
class ReplicateResult:
    index: int
    rmse: float = math.nan
    delta_c: float = math.nan
    clamp_events: int = 0
    restarts: int = 0
    runtime_s: float = 0.0
    failed: bool = False
    error: str = ""
    curves: Optional[dict] = None
    traces: Optional[dict] = None


@dataclass
class Report:
    config: ExperimentConfig
    results: list

    @property
    def ok(self) -> list:
        return [r for r in self.results if not r.failed]

    @property
    def n_failed(self) -> int:
        return len(self.results) - len(self.ok)

    def aggregate(self) -> dict:
        rmse = np.array([r.rmse for r in self.ok])
        dc = np.array([r.delta_c for r in self.ok])
        return {
            "n": len(self.ok),
            "n_failed": self.n_failed,
            "rmse_mean": float(rmse.mean()) if rmse.size else math.nan,
            "rmse_std": float(rmse.std(ddof=1)) if rmse.size > 1 else 0.0,
            "dc_mean": float(dc.mean()) if dc.size else math.nan,
            "dc_std": float(dc.std(ddof=1)) if dc.size > 1 else 0.0,
        }


def compute_metrics(pred_orig, truth, constraint: ConstraintSpec, transform, x_test):
    """RMSE against noiseless truth plus mean absolute constraint violation
    of original-space predictions pushed through the nonlinearities."""
    pred = np.asarray(pred_orig, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise InputError(f"prediction grid {pred.shape} does not match truth {truth.shape}")
    rmse = float(np.sqrt(np.nanmean((pred - truth) ** 2)))
    from .transforms import forward_value

    viol = []
    for i, x in enumerate(np.asarray(x_test).reshape(len(pred), -1)[:, 0]):
        f = np.atleast_2d(np.asarray(constraint.coeff_fn(x)))
        s = np.atleast_1d(np.asarray(constraint.target_fn(x)))
        h_vals = np.array([
            forward_value(t.kind, pred[i, t.source]) for t in transform.tasks
        ])
        viol.append(np.abs(f @ h_vals - s).mean())
    return rmse, float(np.mean(viol))


def _make_sim(cfg: ExperimentConfig, rep: int) -> SimDataset:
    rng = rng_for(cfg.seed, rep, "data")
    overrides = dict(cfg.dataset_overrides)
    sigma, fd = cfg.effective_noise, cfg.drop_prob_fd
    if cfg.experiment == "ho":
        return gen_harmonic_oscillator(
            OscillatorParams(noise_sigma_n=sigma, drop_prob_fd=fd, **overrides), rng)
    if cfg.experiment == "dho":
        return gen_damped_oscillator(
            OscillatorParams(noise_sigma_n=sigma, drop_prob_fd=fd,
                             damping_b=overrides.pop("damping_b", 0.1), **overrides), rng)
    if cfg.experiment == "ff":
        return gen_free_fall(
            FreeFallParams(noise_sigma_n=sigma, drop_prob_fd=fd, **overrides), rng)
    if cfg.experiment == "logsin":
        return gen_logsin(LogsinParams(noise_sigma_n=sigma, drop_prob_fd=fd, **overrides), rng)
    if cfg.experiment == "triangle":
        return gen_triangle(TriangleParams(noise_sigma_n=sigma, **overrides), rng)
    if cfg.experiment == "dp":
        seg_rng = rng_for(cfg.seed, rep, "segment")
        path = cfg.dp_csv
        if os.path.isdir(path):
            files = sorted(f for f in os.listdir(path) if f.endswith(".csv"))
            if not files:
                raise InputError(f"no csv files in {path}")
            path = os.path.join(path, files[seg_rng.integers(len(files))])
        n_frames = read_pendulum_csv(path).shape[0]
        length = cfg.dp_segment_length
        lo = n_frames // 2
        hi = n_frames - length
        if hi < lo:
            raise InputError("trajectory too short for the requested segment length")
        start = int(seg_rng.integers(lo, hi + 1))
        return load_double_pendulum(path, PendulumParams(), (start, length),
                                    n_train=cfg.dp_train_points)
    raise InputError(cfg.experiment)


def _dense_grid(sim: SimDataset, factor: int = 10) -> np.ndarray:
    xs = np.concatenate([sim.train.inputs[:, 0], sim.test.inputs[:, 0]])
    return np.linspace(xs.min(), xs.max(), max(2, factor * sim.test.n_points))


def _fit_unconstrained(sim, cfg, rep, tasks=None, purpose="aux-init", flavour="aux"):
    tasks = list(tasks) if tasks is not None else list(range(sim.train.n_tasks))
    sub = TaskedDataset(
        sim.train.inputs,
        sim.train.observations[:, tasks],
        task_names=tuple(np.asarray(sim.train.task_names or [])[tasks])
        if sim.train.task_names else (),
    )
    spec = ModelSpec(n_tasks=len(tasks))
    fit = train(spec, sub, cfg.train_config(flavour), rng_for(cfg.seed, rep, purpose))
    return fit, tasks


def _unconstrained_replicate(cfg, rep, sim):
    fit, _ = _fit_unconstrained(sim, cfg, rep, purpose="init", flavour="main")
    x_test = sim.test.inputs[:, 0]
    pred = fit.model.predict(x_test)
    means = pred.mean.numpy().reshape(sim.test.n_points, sim.train.n_tasks)
    rmse, dc = compute_metrics(means, sim.test.ground_truth, sim.constraint,
                               sim.transform, x_test)
    curves = None
    if cfg.figures:
        sd = np.sqrt(np.clip(pred.cov.numpy().diagonal(), 0, None)).reshape(means.shape)
        curves = {
            "x": x_test, "mean": means, "lower": means - 2 * sd, "upper": means + 2 * sd,
            "truth": sim.test.ground_truth, "train_x": sim.train.inputs[:, 0],
            "train_y": sim.train.observations, "virtual": [],
            "task_names": sim.train.task_names,
        }
    traces = {"main": fit.trace} if cfg.trace else None
    return ReplicateResult(index=rep, rmse=rmse, delta_c=dc, restarts=fit.restarts_used,
                           curves=curves, traces=traces)


def _constrained_replicate(cfg, rep, sim):
    tf = sim.transform
    # step 1: separately learned auxiliaries drive virtual measurements
    # and the backtransformation
    aux_fit, aux_tasks = _fit_unconstrained(sim, cfg, rep, tasks=tf.step_one_tasks)
    dense_x = _dense_grid(sim)
    aux_dense = aux_fit.model.predict_mean(dense_x)
    aux_means = {raw: aux_dense[:, k] for k, raw in enumerate(aux_tasks)}

    crossings = {}
    for t in tf.tasks:
        if t.aux_source is not None and t.aux_source in aux_means and not t.is_aux_copy:
            curve = aux_means[t.aux_source]
            crossings[t.aux_source] = find_branch_crossings(
                dense_x, curve, branch_levels(t.kind, curve))
    records = make_virtual_measurements(crossings, tf)

    # step 2: constrained GP on transformed data plus virtual measurements
    data_t = extend_with_virtual(apply_transform(sim.train, tf), records)
    spec = ModelSpec(
        n_tasks=tf.n_transformed,
        kinds=tuple(t.kind if isinstance(t.kind, str) else "identity" for t in tf.tasks),
        constraint=sim.constraint,
        inference=cfg.effective_inference,
    )
    fit = train(spec, data_t, cfg.train_config("constrained-main"),
                rng_for(cfg.seed, rep, "init"))
    x_test = sim.test.inputs[:, 0]
    pred = fit.model.predict(x_test)
    means_t = pred.mean.numpy().reshape(sim.test.n_points, tf.n_transformed)

    # step 3: backtransform with the step-1 auxiliaries
    ctx = BacktransformContext(dense_x, aux_means, initial_branch=tf.initial_branch)
    res = backtransform(means_t, x_test, ctx, tf)
    orig = res.values
    for raw in range(sim.train.n_tasks):
        if np.isnan(orig[:, raw]).all() and raw in aux_means:
            orig[:, raw] = np.interp(x_test, dense_x, aux_means[raw])

    rmse, dc = compute_metrics(orig, sim.test.ground_truth,
                               _metric_constraint(cfg, sim), tf, x_test)
    curves = None
    if cfg.figures:
        sd = np.sqrt(np.clip(pred.cov.numpy().diagonal(), 0, None)).reshape(means_t.shape)
        lo, hi = backtransform_intervals(means_t - 2 * sd, means_t + 2 * sd, x_test, ctx, tf)
        lo, hi = np.where(np.isnan(lo), orig, lo), np.where(np.isnan(hi), orig, hi)
        curves = {
            "x": x_test, "mean": orig, "lower": lo, "upper": hi,
            "truth": sim.test.ground_truth, "train_x": sim.train.inputs[:, 0],
            "train_y": sim.train.observations,
            "virtual": [(r.x, r.task, r.value) for r in records],
            "task_names": sim.train.task_names,
        }
    traces = {"aux": aux_fit.trace, "main": fit.trace} if cfg.trace else None
    return ReplicateResult(index=rep, rmse=rmse, delta_c=dc,
                           clamp_events=res.square_clamps + res.arcsin_clamps,
                           restarts=fit.restarts_used, curves=curves, traces=traces)


def _metric_constraint(cfg, sim) -> ConstraintSpec:
    """Constraint used for scoring; the double pendulum scores against the
    energy averaged over the whole segment rather than the train subset."""
    if cfg.experiment == "dp":
        e_full = sim.meta["energy_estimate_full"]
        row = np.asarray(sim.constraint.coeff_fn(0.0))
        return ConstraintSpec.constant(row, [e_full])
    return sim.constraint


def _triangle_replicate(cfg, rep, sim):
    anchor = AnchorPoint(sim.meta["anchor"])
    l12, l13, l23 = sim.meta["lengths_sq"]
    spec_c = triangle_constraints(l12, l13, l23, anchor)
    x_test = sim.test.inputs[:, 0]
    n_test = sim.test.n_points

    if cfg.model == "unconstrained":
        fit, _ = _fit_unconstrained(sim, cfg, rep, purpose="init", flavour="main")
        coords = fit.model.predict_mean(x_test)
    else:
        lifted_rows = []
        for i in range(sim.train.n_points):
            z = np.column_stack([sim.train.observations[i].reshape(3, 2).T,
                                 np.asarray(anchor.position)])
            lifted_rows.append(lift_to_gram(z))
        data_t = TaskedDataset(sim.train.inputs, np.asarray(lifted_rows))
        spec = ModelSpec(
            n_tasks=10,
            constraint=spec_c if cfg.model == "constrained" else None,
            inference="exact",
        )
        fit = train(spec, data_t, cfg.train_config("constrained-main"),
                    rng_for(cfg.seed, rep, "init"))
        gram_means = fit.model.predict_mean(x_test)
        coords = np.zeros((n_test, 6))
        # the anchor pins rotation but not reflection, so seed the first
        # pose's orientation from the nearest training observation and
        # chain continuity from there
        nearest = int(np.argmin(np.abs(sim.train.inputs[:, 0] - x_test[0])))
        prev = np.column_stack([sim.train.observations[nearest].reshape(3, 2).T,
                                np.asarray(anchor.position)])
        enforce = cfg.model == "constrained"
        for i in range(n_test):
            rec = recover_coordinates(gram_means[i], anchor, prev=prev)
            if enforce:
                rec = project_pose_to_lengths(rec, (l12, l13, l23))
            prev = rec
            coords[i] = rec[:, :3].T.reshape(-1)

    rmse = float(np.sqrt(np.mean((coords - sim.test.ground_truth) ** 2)))
    viols = []
    f_rows = np.asarray(spec_c.coeff_fn(0.0))
    s = np.asarray(spec_c.target_fn(0.0))
    for i in range(n_test):
        z = np.column_stack([coords[i].reshape(3, 2).T, np.asarray(anchor.position)])
        viols.append(np.abs(f_rows @ lift_to_gram(z) - s).mean())
    curves = None
    if cfg.figures:
        curves = {
            "x": x_test, "mean": coords, "lower": coords, "upper": coords,
            "truth": sim.test.ground_truth, "train_x": sim.train.inputs[:, 0],
            "train_y": sim.train.observations, "virtual": [],
            "task_names": sim.train.task_names,
        }
    traces = {"main": fit.trace} if cfg.trace else None
    return ReplicateResult(index=rep, rmse=rmse, delta_c=float(np.mean(viols)),
                           restarts=fit.restarts_used, curves=curves, traces=traces)


def run_replicate(cfg: ExperimentConfig, rep: int) -> ReplicateResult:
    torch.set_num_threads(1)
    start = time.perf_counter()
    try:
        sim = _make_sim(cfg, rep)
        if cfg.experiment == "triangle":
            out = _triangle_replicate(cfg, rep, sim)
        elif cfg.model == "unconstrained":
            out = _unconstrained_replicate(cfg, rep, sim)
        else:
            out = _constrained_replicate(cfg, rep, sim)
    except (TrainingError, SumGPError) as err:
        out = ReplicateResult(index=rep, failed=True, error=f"{type(err).__name__}: {err}")
    out.runtime_s = time.perf_counter() - start
    return out


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Run all replicates (worker pool when workers > 1) and aggregate."""
    reps = range(cfg.replicates)
    workers = cfg.workers or 1
    if workers > 1 and cfg.replicates > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_replicate, [cfg] * cfg.replicates, reps))
    else:
        results = [run_replicate(cfg, r) for r in reps]
    return Report(config=cfg, results=results)


def emit_outputs(report: Report, out_dir: str) -> list:
    """Write report.csv, table.md and per-replicate figures; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    agg = report.aggregate()

    csv_path = os.path.join(out_dir, "report.csv")
    try:
        with open(csv_path, "w") as fh:
            fh.write("row,replicate,rmse,delta_c,clamp_events,restarts,runtime_s,status\n")
            for r in report.results:
                status = "failed" if r.failed else "ok"
                fh.write(f"data,{r.index},{r.rmse!r},{r.delta_c!r},{r.clamp_events},"
                         f"{r.restarts},{r.runtime_s:.3f},{status}\n")
            fh.write(f"mean,{agg['n']},{agg['rmse_mean']!r},{agg['dc_mean']!r},,,,\n")
            fh.write(f"std,{agg['n']},{agg['rmse_std']!r},{agg['dc_std']!r},,,,\n")
    except OSError as err:
        raise InputError(f"cannot write report to {csv_path}: {err}") from err
    paths.append(csv_path)

    md_path = os.path.join(out_dir, "table.md")
    cfg = report.config
    with open(md_path, "w") as fh:
        fh.write(f"| {cfg.experiment} {cfg.model} ({cfg.effective_inference}) | "
                 f"sigma_n={cfg.effective_noise} f_d={cfg.drop_prob_fd} | "
                 f"n={agg['n']} (failed {agg['n_failed']}) | config {cfg.digest()} |\n")
        fh.write("|---|---|---|---|\n")
        fh.write(f"| RMSE | {agg['rmse_mean']:.4g} +- {agg['rmse_std']:.2g} | "
                 f"abs(dC) | {agg['dc_mean']:.4g} +- {agg['dc_std']:.2g} |\n")
    paths.append(md_path)

    for r in report.results:
        if r.traces:
            for name, rows in r.traces.items():
                t_path = os.path.join(out_dir, f"trace_{r.index}_{name}.csv")
                with open(t_path, "w") as fh:
                    fh.write("iter,lml,lr,lengthscale\n")
                    for row in rows:
                        fh.write(f"{int(row[0])},{row[1]!r},{row[2]!r},{row[3]!r}\n")
                paths.append(t_path)
        if r.curves is None:
            continue
        paths.append(_draw_replicate(r, out_dir))
    return paths


def _draw_replicate(result: ReplicateResult, out_dir: str) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    c = result.curves
    n_tasks = c["mean"].shape[1]
    fig, axes = plt.subplots(1, n_tasks, figsize=(4 * n_tasks, 3.2), squeeze=False)
    for j, ax in enumerate(axes[0]):
        ax.fill_between(c["x"], c["lower"][:, j], c["upper"][:, j], alpha=0.25, lw=0)
        ax.plot(c["x"], c["mean"][:, j], label="posterior mean")
        ax.plot(c["x"], c["truth"][:, j], "k--", lw=1, label="truth")
        obs = c["train_y"][:, j] if j < c["train_y"].shape[1] else None
        if obs is not None:
            ok = np.isfinite(obs)
            ax.plot(np.asarray(c["train_x"])[ok], obs[ok], ".", ms=6, label="data")
        for x_v, task, val in c["virtual"]:
            if task == j:
                ax.plot([x_v], [val], "s", ms=6, color="tab:red")
        names = c.get("task_names") or ()
        ax.set_title(names[j] if j < len(names) else f"task {j + 1}")
    axes[0, 0].legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, f"figure_{result.index}.svg")
    fig.savefig(path)
    plt.close(fig)
    return path
