import io
import math
import os

import numpy as np
import pytest
import torch

from sumgp.bench import (
    ExperimentConfig,
    Report,
    ReplicateResult,
    compute_metrics,
    emit_outputs,
    run_experiment,
    run_replicate,
)
from sumgp.cli import main, parse_config_file
from sumgp.constraints import ConstraintSpec
from sumgp.errors import InputError
from sumgp.transforms import TaskTransform, TransformSpec

torch.set_num_threads(1)

HO_TRANSFORM = TransformSpec(
    tasks=(
        TaskTransform(0, "square", aux_source=0),
        TaskTransform(1, "square", aux_source=1),
        TaskTransform(0, "identity", is_aux_copy=True),
        TaskTransform(1, "identity", is_aux_copy=True),
    ),
    virtual_policy="zero",
)


class TestComputeMetrics:
    def test_perfect_prediction(self):
        x = np.linspace(0, 10, 50)
        z, v = np.sqrt(1.6) * np.sin(x), np.sqrt(1.6) * np.cos(x)
        truth = np.stack([z, v], axis=1)
        spec = ConstraintSpec.from_terms(4, {0: 0.5, 1: 0.5}, 0.8)
        rmse, dc = compute_metrics(truth, truth, spec, HO_TRANSFORM, x)
        assert rmse == 0.0
        assert dc == pytest.approx(0.0, abs=1e-12)

    def test_constant_offset_rmse(self):
        x = np.linspace(0, 1, 100)
        truth = np.zeros((100, 2))
        pred = truth.copy()
        pred[:, 0] += 0.1
        spec = ConstraintSpec.constant([[1.0, 1.0]], [0.0])
        tf = TransformSpec.identity(2)
        rmse, _ = compute_metrics(pred, truth, spec, tf, x)
        assert rmse == pytest.approx(0.1 / math.sqrt(2))

    def test_energy_shift_gives_delta(self):
        x = np.linspace(0, 10, 40)
        z, v = np.sqrt(1.6) * np.sin(x), np.sqrt(1.6) * np.cos(x)
        delta = 0.07
        scale = math.sqrt(1.0 + delta / 0.8)
        pred = np.stack([z * scale, v * scale], axis=1)
        spec = ConstraintSpec.from_terms(4, {0: 0.5, 1: 0.5}, 0.8)
        _, dc = compute_metrics(pred, np.stack([z, v], 1), spec, HO_TRANSFORM, x)
        assert dc == pytest.approx(delta, abs=1e-10)

    def test_grid_mismatch_rejected(self):
        spec = ConstraintSpec.constant([[1.0]], [0.0])
        with pytest.raises(InputError):
            compute_metrics(np.zeros((3, 1)), np.zeros((4, 1)), spec,
                            TransformSpec.identity(1), np.zeros(3))


class TestExperimentConfig:
    def test_transformed_unconstrained_triangle_only(self):
        with pytest.raises(InputError):
            ExperimentConfig(experiment="ho", model="transformed-unconstrained")
        ExperimentConfig(experiment="triangle", model="transformed-unconstrained")

    def test_dp_requires_csv(self):
        with pytest.raises(InputError):
            ExperimentConfig(experiment="dp")

    def test_vi_only_for_constrained_transformed(self):
        with pytest.raises(InputError):
            ExperimentConfig(experiment="ho", model="unconstrained", inference="vi")
        with pytest.raises(InputError):
            ExperimentConfig(experiment="triangle", inference="laplace")

    def test_training_schedules(self):
        ho = ExperimentConfig(experiment="ho").train_config("constrained-main")
        assert (ho.learning_rate, ho.iterations, ho.scheduler_steps, ho.scheduler_factor) \
            == (0.1, 200, 100, 0.5)
        tri = ExperimentConfig(experiment="triangle").train_config("constrained-main")
        assert (tri.learning_rate, tri.iterations, tri.scheduler_steps, tri.scheduler_factor) \
            == (0.1, 2000, 800, 0.2)
        dp_c = ExperimentConfig(experiment="dp", dp_csv="x.csv").train_config("constrained-main")
        assert (dp_c.scheduler_steps, dp_c.scheduler_factor) == (800, 0.2)
        dp_u = ExperimentConfig(experiment="dp", dp_csv="x.csv").train_config("main")
        assert (dp_u.scheduler_steps, dp_u.scheduler_factor) == (500, 0.5)

    def test_logsin_guards_on_constrained_only(self):
        cfg = ExperimentConfig(experiment="logsin")
        assert cfg.train_config("constrained-main").extra_guards
        assert not cfg.train_config("main").extra_guards
        assert not ExperimentConfig(experiment="ho").train_config("constrained-main").extra_guards

    def test_default_inference(self):
        assert ExperimentConfig(experiment="ho").effective_inference == "laplace"
        assert ExperimentConfig(experiment="triangle").effective_inference == "exact"
        assert ExperimentConfig(experiment="ho", model="unconstrained").effective_inference == "exact"


FAST = dict(iterations=25, replicates=2, seed=3)


class TestRunExperiment:
    def test_deterministic_reports(self):
        cfg = ExperimentConfig(experiment="ho", model="constrained", **FAST)
        a, b = run_experiment(cfg), run_experiment(cfg)
        for ra, rb in zip(a.results, b.results):
            assert ra.rmse == rb.rmse and ra.delta_c == rb.delta_c

    def test_failed_replicates_reported_not_hidden(self):
        cfg = ExperimentConfig(experiment="ho", **FAST)
        rep = Report(config=cfg, results=[
            ReplicateResult(index=0, rmse=0.5, delta_c=0.1),
            ReplicateResult(index=1, failed=True, error="x"),
        ])
        agg = rep.aggregate()
        assert agg["n"] == 1 and agg["n_failed"] == 1
        assert agg["rmse_mean"] == 0.5


class TestEmitOutputs:
    def test_empty_report_header_only(self, tmp_path):
        cfg = ExperimentConfig(experiment="ho", **FAST)
        rep = Report(config=cfg, results=[])
        emit_outputs(rep, str(tmp_path))
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        data_rows = [l for l in lines if l.startswith("data")]
        assert lines[0].startswith("row,replicate")
        assert data_rows == []

    def test_two_replicates_produce_figures_and_aggregates(self, tmp_path):
        cfg = ExperimentConfig(experiment="ho", model="unconstrained", figures=True,
                               trace=True, **FAST)
        rep = run_experiment(cfg)
        paths = emit_outputs(rep, str(tmp_path))
        svgs = [p for p in paths if p.endswith(".svg")]
        traces = [p for p in paths if "trace_" in p]
        assert len(svgs) == 2
        assert len(traces) == 2
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        data = [l.split(",") for l in lines if l.startswith("data,")]
        mean_row = next(l.split(",") for l in lines if l.startswith("mean,"))
        std_row = next(l.split(",") for l in lines if l.startswith("std,"))
        rmses = np.array([float(r[2]) for r in data])
        assert float(mean_row[2]) == pytest.approx(rmses.mean(), rel=1e-12)
        assert float(std_row[2]) == pytest.approx(rmses.std(ddof=1), rel=1e-12)
        trace_lines = open(traces[0]).read().splitlines()
        assert trace_lines[0] == "iter,lml,lr,lengthscale"
        assert len(trace_lines) == 1 + 25

    def test_table_md_written(self, tmp_path):
        cfg = ExperimentConfig(experiment="ho", model="unconstrained", **FAST)
        emit_outputs(run_experiment(cfg), str(tmp_path))
        text = (tmp_path / "table.md").read_text()
        assert "RMSE" in text and "ho unconstrained" in text


class TestCli:
    def test_parse_config_file(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(
            "experiment = ho\nmodel = constrained\nnoise_sigma_n = 0.05\n"
            "replicates = 3  # comment\nfigures = true\ndataset.energy_E = 1.2\n"
        )
        values = parse_config_file(str(path))
        assert values["experiment"] == "ho"
        assert values["noise_sigma_n"] == 0.05
        assert values["replicates"] == 3
        assert values["figures"] is True
        assert values["dataset_overrides"] == (("energy_E", 1.2),)

    def test_gen_command(self, tmp_path):
        out = tmp_path / "data.csv"
        assert main(["gen", "--dataset", "ho", "--noise", "0.1", "--seed", "1",
                     "--out", str(out)]) == 0
        text = out.read_text().splitlines()
        assert text[0].startswith("# tasks=z,v")
        assert text[1] == "x,y1,y2"
        assert len(text) == 2 + 20

    def test_dp_ingest_command(self, tmp_path):
        src = tmp_path / "raw.csv"
        rows = ["ax,ay,gx,gy,bx,by"]
        t = np.arange(300) / 500.0
        for i in range(300):
            rows.append(f"0,0,{0.05*np.cos(3*t[i])},{0.05*np.sin(3*t[i])},"
                        f"{0.1*np.cos(3*t[i])},{0.1*np.sin(3*t[i])}")
        src.write_text("\n".join(rows))
        out = tmp_path / "tasks.csv"
        assert main(["dp-ingest", "--csv", str(src), "--segment", "0:200",
                     "--out", str(out)]) == 0
        header = out.read_text().splitlines()[0]
        assert "z_bx" in header and "v_gy" in header

    def test_run_command_with_config(self, tmp_path, capsys):
        path = tmp_path / "cfg.txt"
        path.write_text("experiment = ho\nmodel = unconstrained\nreplicates = 1\n"
                        "iterations = 20\n")
        assert main(["run", "--config", str(path), "--seed", "5"]) == 0
        out = capsys.readouterr().out
        assert "RMSE" in out and "|dC|" in out

    def test_unknown_dataset_fails_cleanly(self, tmp_path, capsys):
        assert main(["gen", "--dataset", "nope", "--out", str(tmp_path / "x"),
                     ]) == 2
        assert "error:" in capsys.readouterr().err
