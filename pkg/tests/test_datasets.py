import io
import math

import numpy as np
import pytest

from sumgp.datasets import (
    DP_TRANSFORM,
    FreeFallParams,
    LogsinParams,
    OscillatorParams,
    PendulumParams,
    TriangleParams,
    damped_oscillator_energy,
    dp_constraint_row,
    energy_estimate,
    gen_damped_oscillator,
    gen_free_fall,
    gen_harmonic_oscillator,
    gen_logsin,
    gen_triangle,
    load_double_pendulum,
    logsin_curves,
    read_dataset_csv,
    write_dataset_csv,
)
from sumgp.errors import IngestError, InputError
from sumgp.gaussian import TaskedDataset
from sumgp.transforms import apply_transform


def constraint_residual(sim, data):
    """Max |F h(y) - S| of noiseless data under the generator's own spec."""
    y_t = apply_transform(
        TaskedDataset(data.inputs, data.ground_truth), sim.transform).observations
    worst = 0.0
    for i, x in enumerate(data.inputs[:, 0]):
        f = np.asarray(sim.constraint.coeff_fn(x))
        s = np.asarray(sim.constraint.target_fn(x))
        worst = max(worst, float(np.abs(f @ y_t[i] - s).max()))
    return worst


class TestHarmonicOscillator:
    def test_initial_conditions(self):
        sim = gen_harmonic_oscillator(OscillatorParams(noise_sigma_n=0.0), seed=0)
        assert sim.train.ground_truth[0, 0] == pytest.approx(0.0)
        assert sim.train.ground_truth[0, 1] == pytest.approx(math.sqrt(1.6))

    def test_pre_noise_constraint_residual_zero(self):
        sim = gen_harmonic_oscillator(OscillatorParams(), seed=1)
        assert constraint_residual(sim, sim.train) <= 1e-12
        assert constraint_residual(sim, sim.test) <= 1e-12

    def test_no_drops_by_default(self):
        sim = gen_harmonic_oscillator(OscillatorParams(drop_prob_fd=0.0), seed=2)
        assert not sim.train.missing.any()

    def test_grids(self):
        sim = gen_harmonic_oscillator(OscillatorParams(), seed=3)
        assert sim.train.n_points == 20
        assert sim.test.n_points == 100
        assert sim.train.inputs[0, 0] == 0.0 and sim.train.inputs[-1, 0] == 10.0
        assert sim.test.inputs[0, 0] == pytest.approx(-0.1)

    def test_seed_determinism(self):
        a = gen_harmonic_oscillator(OscillatorParams(), seed=9)
        b = gen_harmonic_oscillator(OscillatorParams(), seed=9)
        np.testing.assert_array_equal(a.train.observations, b.train.observations)

    def test_drop_mask_never_empties_a_point(self):
        sim = gen_harmonic_oscillator(OscillatorParams(drop_prob_fd=0.6), seed=4)
        assert np.isfinite(sim.train.observations).any(axis=1).all()


class TestDampedOscillator:
    def test_zero_damping_reduces_to_harmonic(self):
        p = OscillatorParams(noise_sigma_n=0.0)
        ho = gen_harmonic_oscillator(p, seed=0)
        dho = gen_damped_oscillator(OscillatorParams(noise_sigma_n=0.0, damping_b=1e-12), seed=0)
        np.testing.assert_allclose(dho.train.ground_truth, ho.train.ground_truth, atol=1e-10)

    def test_energy_nonincreasing(self):
        p = OscillatorParams(damping_b=0.1)
        e = damped_oscillator_energy(p, np.linspace(0, 10, 200))
        assert (np.diff(e) <= 1e-12).all()

    def test_target_matches_generator_energy(self):
        sim = gen_damped_oscillator(OscillatorParams(damping_b=0.1), seed=1)
        for t in (0.0, 3.7, 10.0):
            got = np.asarray(sim.constraint.target_fn(t))[0]
            assert got == pytest.approx(float(damped_oscillator_energy(sim.meta["params"], t)[0]), abs=1e-12)

    def test_pre_noise_constraint_residual_zero(self):
        sim = gen_damped_oscillator(OscillatorParams(damping_b=0.1), seed=2)
        assert constraint_residual(sim, sim.train) <= 1e-12


class TestFreeFall:
    def test_initial_conditions_original_units(self):
        p = FreeFallParams()
        assert p.v0 == pytest.approx(20.0)
        sim = gen_free_fall(FreeFallParams(noise_sigma_n=0.0), seed=0)
        np.testing.assert_allclose(sim.train.ground_truth[0] * p.data_scale_a, [0.0, 20.0],
                                   atol=1e-12)

    def test_pre_noise_constraint_residual_zero(self):
        sim = gen_free_fall(FreeFallParams(), seed=1)
        assert constraint_residual(sim, sim.train) <= 1e-10
        assert constraint_residual(sim, sim.test) <= 1e-10

    def test_velocity_zero_crossing_location(self):
        p = FreeFallParams()
        t_cross = p.v0 / p.g
        assert t_cross == pytest.approx(2.0387, abs=1e-4)
        sim = gen_free_fall(FreeFallParams(noise_sigma_n=0.0), seed=2)
        v = sim.test.ground_truth[:, 1]
        t = sim.test.inputs[:, 0]
        k = np.argmax(v < 0)
        assert t[k - 1] <= t_cross <= t[k]


class TestLogsin:
    def test_curves_at_zero(self):
        f = logsin_curves(np.array([0.0]))
        assert f[0, 0] == pytest.approx(2 * math.exp(-5) + math.exp(-5) + 0.2)
        assert f[0, 1] == 0.0

    def test_target_consistency(self):
        sim = gen_logsin(LogsinParams(), seed=0)
        assert constraint_residual(sim, sim.train) <= 1e-12

    def test_f2_crosses_minus_half_pi_once(self):
        x = np.linspace(-1.2, 2, 1000)
        f2 = -x ** 3 / 2
        crossings = np.sum(np.diff(np.sign(f2 + math.pi / 2)) != 0)
        assert crossings == 1
        assert (math.pi ** (1 / 3)) == pytest.approx(1.4646, abs=1e-4)

    def test_noise_rejection_keeps_f1_positive(self):
        sim = gen_logsin(LogsinParams(noise_sigma_n=0.3), seed=1)
        col = sim.train.observations[:, 0]
        assert (col[np.isfinite(col)] > 0).all()


class TestTriangle:
    def test_corner_at_alpha_zero(self):
        sim = gen_triangle(TriangleParams(noise_sigma_n=0.0), seed=0)
        np.testing.assert_allclose(sim.train.ground_truth[0, :2], [5.0, 5.0], atol=1e-12)

    def test_edge_lengths_rigid(self):
        sim = gen_triangle(TriangleParams(noise_sigma_n=0.0), seed=1)
        for row in sim.test.ground_truth:
            z = row.reshape(3, 2)
            l12 = ((z[0] - z[1]) ** 2).sum()
            l13 = ((z[0] - z[2]) ** 2).sum()
            assert l12 == pytest.approx(16.0, abs=1e-10)
            assert l13 == pytest.approx(23.36, abs=1e-10)

    def test_lengths_sq_metadata(self):
        sim = gen_triangle(TriangleParams(), seed=2)
        np.testing.assert_allclose(sim.meta["lengths_sq"], [16.0, 23.36, 4.16], atol=1e-12)


def circular_motion_csv(n=400, rate=500.0, radius=0.05, omega=3.0):
    t = np.arange(n) / rate
    gx, gy = radius * np.cos(omega * t), radius * np.sin(omega * t)
    bx, by = 2 * radius * np.cos(omega * t), 2 * radius * np.sin(omega * t)
    rows = ["anchor_x,anchor_y,green_x,green_y,blue_x,blue_y"]
    for i in range(n):
        rows.append(f"0.0,0.0,{gx[i]},{gy[i]},{bx[i]},{by[i]}")
    return io.StringIO("\n".join(rows)), t


class TestDoublePendulumIngestion:
    def test_finite_difference_matches_analytic(self):
        p = PendulumParams()
        buf, t = circular_motion_csv()
        sim = load_double_pendulum(buf, p, segment=(0, 400))
        # paper-blue marker = source-green columns; interior points are
        # central differences, accurate to O(dt^2)
        all_t = np.sort(np.concatenate([sim.train.inputs[:, 0], sim.test.inputs[:, 0]]))
        all_y = np.vstack([sim.train.observations, sim.test.observations])
        order = np.argsort(np.concatenate([sim.train.inputs[:, 0], sim.test.inputs[:, 0]]))
        v_bx = all_y[order, 4] / p.scale_vel
        t_orig = all_t / p.scale_time
        analytic = -0.05 * 3.0 * np.sin(3.0 * t_orig)
        dt = 1 / 500.0
        np.testing.assert_allclose(v_bx[1:-1], analytic[1:-1], atol=10 * dt ** 2)

    def test_constant_position_zero_velocity(self):
        rows = ["0,0,0.01,0.02,0.03,0.04"] * 50
        buf = io.StringIO("a,b,c,d,e,f\n" + "\n".join(rows))
        sim = load_double_pendulum(buf, PendulumParams(), segment=(0, 50))
        np.testing.assert_allclose(
            np.vstack([sim.train.observations, sim.test.observations])[:, 4:], 0.0, atol=1e-12)

    def test_mass_ratio_coefficients(self):
        p = PendulumParams()
        row = dp_constraint_row(p)
        assert p.mass_blue == pytest.approx(6.5)
        assert p.mass_green == 1.0
        assert row[0] / row[1] == pytest.approx(6.5)
        assert row[2] / row[4] == pytest.approx(6.5)

    def test_segment_out_of_bounds(self):
        buf, _ = circular_motion_csv(n=100)
        with pytest.raises(InputError):
            load_double_pendulum(buf, PendulumParams(), segment=(50, 100))

    def test_malformed_rows_reported(self):
        buf = io.StringIO("a,b,c,d,e,f\n1,2,3,4,5,6\n1,2,oops,4,5,6\n")
        with pytest.raises(IngestError, match="row"):
            load_double_pendulum(buf, PendulumParams(), segment=(0, 2))


class TestEnergyEstimate:
    def test_noiseless_oscillator_energy(self):
        sim = gen_harmonic_oscillator(OscillatorParams(noise_sigma_n=0.0), seed=0)
        row = np.array([0.5, 0.5, 0.0, 0.0])
        assert energy_estimate(sim.train, row, sim.transform) == pytest.approx(0.8, abs=1e-12)

    def test_single_point(self):
        ds = TaskedDataset([0.0], [[1.0, 2.0]])
        from sumgp.transforms import TaskTransform, TransformSpec
        tf = TransformSpec(tasks=(TaskTransform(0, "square", aux_source=0),
                                  TaskTransform(1, "square", aux_source=1)))
        got = energy_estimate(ds, [0.5, 0.5], tf)
        assert got == pytest.approx(0.5 * 1 + 0.5 * 4)

    def test_mean_near_true_energy_over_seeds(self):
        vals = []
        for seed in range(50):
            sim = gen_harmonic_oscillator(OscillatorParams(noise_sigma_n=0.1), seed=seed)
            vals.append(energy_estimate(sim.train, [0.5, 0.5, 0, 0], sim.transform))
        # squaring noise biases each term up by sigma^2/2 per output
        se = np.std(vals) / np.sqrt(len(vals))
        assert abs(np.mean(vals) - (0.8 + 0.01)) <= 3 * se + 1e-3


class TestCsvRoundtrip:
    def test_roundtrip_with_missing(self, tmp_path):
        sim = gen_harmonic_oscillator(OscillatorParams(drop_prob_fd=0.3), seed=5)
        path = tmp_path / "ho.csv"
        write_dataset_csv(path, sim.train)
        back = read_dataset_csv(path)
        np.testing.assert_array_equal(np.isfinite(back.observations),
                                      np.isfinite(sim.train.observations))
        np.testing.assert_allclose(back.observations[np.isfinite(back.observations)],
                                   sim.train.observations[np.isfinite(sim.train.observations)])
        assert back.task_names == ("z", "v")
