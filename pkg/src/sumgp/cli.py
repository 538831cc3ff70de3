"""Command line harness.

Subcommands:
  run        one experiment cell from a flat key=value config file
  gen        write a synthetic dataset to CSV
  dp-ingest  convert a double-pendulum recording into the 8-task layout
  table      sweep a sigma/drop grid, constrained vs unconstrained
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .bench import ExperimentConfig, emit_outputs, run_experiment
from .datasets import (
    GENERATORS,
    PendulumParams,
    dp_constraint_row,
    load_double_pendulum,
    read_pendulum_csv,
    write_dataset_csv,
)
from .errors import InputError, SumGPError

_BOOL_KEYS = {"figures", "trace"}
_INT_KEYS = {"replicates", "seed", "iterations", "scheduler_steps", "max_restarts",
             "workers", "dp_segment_length", "dp_train_points"}
_FLOAT_KEYS = {"noise_sigma_n", "drop_prob_fd", "learning_rate", "scheduler_factor"}


def parse_config_file(path: str) -> dict:
    """Flat `key = value` lines; `dataset.<name>` keys become overrides."""
    values, overrides = {}, {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{ln}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key.startswith("dataset."):
                overrides[key[8:]] = float(raw)
            elif key in _BOOL_KEYS:
                values[key] = raw.lower() in ("1", "true", "yes", "on")
            elif key in _INT_KEYS:
                values[key] = int(raw)
            elif key in _FLOAT_KEYS:
                values[key] = float(raw)
            else:
                values[key] = raw
    if overrides:
        values["dataset_overrides"] = tuple(sorted(overrides.items()))
    return values


def _cmd_run(args) -> int:
    values = parse_config_file(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out:
        values["out_dir"] = args.out
    if args.trace:
        values["trace"] = True
    if args.workers is not None:
        values["workers"] = args.workers
    cfg = ExperimentConfig(**values)
    report = run_experiment(cfg)
    agg = report.aggregate()
    print(f"{cfg.experiment} {cfg.model} ({cfg.effective_inference}) "
          f"sigma_n={cfg.effective_noise} f_d={cfg.drop_prob_fd} n={agg['n']}"
          f"{' failed=' + str(agg['n_failed']) if agg['n_failed'] else ''}")
    print(f"  RMSE   {agg['rmse_mean']:.4g} +- {agg['rmse_std']:.2g}")
    print(f"  |dC|   {agg['dc_mean']:.4g} +- {agg['dc_std']:.2g}")
    if cfg.out_dir:
        for path in emit_outputs(report, cfg.out_dir):
            print(f"  wrote {path}")
    return 0


def _cmd_gen(args) -> int:
    if args.dataset not in GENERATORS:
        raise InputError(f"unknown dataset {args.dataset!r}; choose from {sorted(GENERATORS)}")
    sim = GENERATORS[args.dataset](args.noise, args.drop, args.seed)
    write_dataset_csv(args.out, sim.train)
    print(f"wrote {args.out} ({sim.train.n_points} points, {sim.train.n_tasks} tasks)")
    return 0


def _cmd_dp_ingest(args) -> int:
    start, length = (int(v) for v in args.segment.split(":"))
    params = PendulumParams(frame_rate=args.frame_rate, mass_ratio=args.mass_ratio)
    sim = load_double_pendulum(args.csv, params, (start, length),
                               n_train=args.train_points)
    full = np.vstack([sim.train.observations, sim.test.observations])
    order = np.argsort(np.concatenate([sim.train.inputs[:, 0], sim.test.inputs[:, 0]]))
    from .gaussian import TaskedDataset

    merged = TaskedDataset(
        np.sort(np.concatenate([sim.train.inputs[:, 0], sim.test.inputs[:, 0]])),
        full[order],
        task_names=sim.train.task_names,
    )
    write_dataset_csv(args.out, merged)
    print(f"wrote {args.out}; energy estimate {sim.meta['energy_estimate']:.6g} "
          f"(full segment {sim.meta['energy_estimate_full']:.6g})")
    if args.diagnostic:
        _dp_energy_plot(args, params)
        print(f"wrote {args.diagnostic}")
    return 0


def _dp_energy_plot(args, params: PendulumParams) -> None:
    """Windowed mean of the energy expression over the full recording."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .datasets import DP_TRANSFORM, load_double_pendulum

    frames = read_pendulum_csv(args.csv)
    sim = load_double_pendulum(args.csv, params, (0, frames.shape[0]), n_train=2)
    y = np.vstack([sim.train.observations, sim.test.observations])
    t = np.concatenate([sim.train.inputs[:, 0], sim.test.inputs[:, 0]])
    order = np.argsort(t)
    t, y = t[order], y[order]
    row = dp_constraint_row(params)
    from .transforms import forward_value

    energy = sum(row[i] * forward_value(task.kind, y[:, task.source])
                 for i, task in enumerate(DP_TRANSFORM.tasks))
    window = max(5, len(energy) // 200)
    kernel = np.ones(window) / window
    smooth = np.convolve(energy, kernel, mode="valid")
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(t, energy, alpha=0.3, lw=0.5, label="per-frame energy")
    ax.plot(t[window - 1:], smooth, lw=1.5, label=f"windowed mean ({window})")
    ax.set_xlabel("scaled time")
    ax.set_ylabel("energy expression")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.diagnostic)
    plt.close(fig)


def _cmd_table(args) -> int:
    grid = {"sigma": [], "fd": [0.0]}
    for clause in args.grid.split(";"):
        if not clause.strip():
            continue
        key, _, vals = clause.partition("=")
        grid[key.strip()] = [float(v) for v in vals.split(",") if v.strip()]
    if not grid["sigma"]:
        raise InputError("grid needs at least sigma=...")
    rows = []
    for sigma in grid["sigma"]:
        for fd in grid["fd"]:
            entry = {"sigma": sigma, "fd": fd}
            for model in ("constrained", "unconstrained"):
                cfg = ExperimentConfig(
                    experiment=args.experiment, model=model, noise_sigma_n=sigma,
                    drop_prob_fd=fd, replicates=args.replicates, seed=args.seed,
                    workers=args.workers, dp_csv=args.dp_csv,
                )
                agg = run_experiment(cfg).aggregate()
                tag = "c" if model == "constrained" else "u"
                entry.update({
                    f"rmse_{tag}": agg["rmse_mean"], f"rmse_{tag}_std": agg["rmse_std"],
                    f"dc_{tag}": agg["dc_mean"], f"dc_{tag}_std": agg["dc_std"],
                    f"n_{tag}": agg["n"],
                })
                print(f"sigma={sigma} fd={fd} {model}: RMSE {agg['rmse_mean']:.4g} "
                      f"|dC| {agg['dc_mean']:.4g}")
            rows.append(entry)
    cols = list(rows[0].keys())
    with open(args.out, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for entry in rows:
            fh.write(",".join(repr(entry[c]) for c in cols) + "\n")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sumgp",
                                     description="Sum-constrained multitask GP benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment cell from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default="")
    p_run.add_argument("--trace", action="store_true")
    p_run.add_argument("--workers", type=int, default=None)
    p_run.set_defaults(func=_cmd_run)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset CSV")
    p_gen.add_argument("--dataset", required=True)
    p_gen.add_argument("--noise", type=float, default=0.1)
    p_gen.add_argument("--drop", type=float, default=0.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_gen)

    p_dp = sub.add_parser("dp-ingest", help="ingest a double-pendulum recording")
    p_dp.add_argument("--csv", required=True)
    p_dp.add_argument("--frame-rate", type=float, default=500.0)
    p_dp.add_argument("--mass-ratio", type=float, default=6.5)
    p_dp.add_argument("--segment", required=True, help="start:length")
    p_dp.add_argument("--train-points", type=int, default=15)
    p_dp.add_argument("--out", required=True)
    p_dp.add_argument("--diagnostic", default="", help="optional energy plot SVG")
    p_dp.set_defaults(func=_cmd_dp_ingest)

    p_tab = sub.add_parser("table", help="sweep a noise/drop grid")
    p_tab.add_argument("--experiment", required=True)
    p_tab.add_argument("--grid", required=True, help='e.g. "sigma=0.05,0.1;fd=0,0.2"')
    p_tab.add_argument("--replicates", type=int, default=50)
    p_tab.add_argument("--seed", type=int, default=0)
    p_tab.add_argument("--workers", type=int, default=0)
    p_tab.add_argument("--dp-csv", default="")
    p_tab.add_argument("--out", required=True)
    p_tab.set_defaults(func=_cmd_table)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SumGPError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
