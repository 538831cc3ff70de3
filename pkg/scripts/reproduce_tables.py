#!/usr/bin/env python3
"""Regenerate the benchmark table cells at desk scale.

Runs constrained and unconstrained models for the chosen experiments and
writes one markdown summary plus per-cell report CSVs.

    python3 scripts/reproduce_tables.py --out results/ --replicates 50
    python3 scripts/reproduce_tables.py --experiments ho ff --replicates 10
"""

import argparse
import os
import sys
import time

from sumgp.bench import ExperimentConfig, emit_outputs, run_experiment

CELLS = {
    "ho": dict(noise=0.1),
    "dho": dict(noise=0.1),
    "ff": dict(noise=0.05),
    "logsin": dict(noise=0.1),
    "triangle": dict(noise=1e-4, extra_models=("transformed-unconstrained",)),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--experiments", nargs="*", default=list(CELLS))
    parser.add_argument("--replicates", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=min(2, os.cpu_count() or 1))
    parser.add_argument("--out", default="results")
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    lines = ["| experiment | model | RMSE | abs(dC) | n (failed) | seconds |",
             "|---|---|---|---|---|---|"]
    for name in args.experiments:
        cell = CELLS[name]
        models = ("constrained", "unconstrained") + cell.get("extra_models", ())
        for model in models:
            cfg = ExperimentConfig(
                experiment=name, model=model, noise_sigma_n=cell["noise"],
                replicates=args.replicates, seed=args.seed, workers=args.workers,
            )
            start = time.time()
            report = run_experiment(cfg)
            agg = report.aggregate()
            emit_outputs(report, os.path.join(args.out, f"{name}_{model}"))
            lines.append(
                f"| {name} | {model} | {agg['rmse_mean']:.4g} +- {agg['rmse_std']:.2g} "
                f"| {agg['dc_mean']:.4g} +- {agg['dc_std']:.2g} "
                f"| {agg['n']} ({agg['n_failed']}) | {time.time() - start:.0f} |"
            )
            print(lines[-1])
    summary = os.path.join(args.out, "summary.md")
    with open(summary, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {summary}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
