import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sumgp.constraints import (
    ConstraintSpec,
    build_total_constraint,
    condition_constant_kronecker,
    condition_gaussian,
    nullspace_task_covariance,
)
from sumgp.errors import InputError, NumericError
from sumgp.gaussian import GaussianDist


def random_gaussian(rng, n):
    a = rng.standard_normal((n, n))
    return GaussianDist(rng.standard_normal(n), a @ a.T + 0.5 * np.eye(n))


def random_full_rank_rows(rng, n_rows, n):
    while True:
        f = rng.standard_normal((n_rows, n))
        if np.linalg.matrix_rank(f) == n_rows:
            return f


class TestConditionGaussian:
    def test_hand_evaluated_two_dim(self):
        out = condition_gaussian(GaussianDist([0.0, 0.0], np.eye(2)), [[1.0, 1.0]], [2.0])
        np.testing.assert_allclose(out.mean.numpy(), [1.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(out.cov.numpy(), [[0.5, -0.5], [-0.5, 0.5]], atol=1e-12)

    def test_hand_evaluated_two_dim_by_sampling(self):
        out = condition_gaussian(GaussianDist([0.0, 0.0], np.eye(2)), [[1.0, 1.0]], [2.0])
        samples = out.sample(np.random.default_rng(0), 2000)
        np.testing.assert_allclose(samples.sum(axis=1), 2.0, atol=1e-7)

    def test_identity_fixture(self):
        # conditioning I4 on half-sum zero: printed projector entries 0.5/-0.5/1
        out = condition_gaussian(GaussianDist(np.zeros(4), np.eye(4)), [[0.5, 0.5, 0.0, 0.0]], [0.0])
        expected = np.array([
            [0.5, -0.5, 0.0, 0.0],
            [-0.5, 0.5, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        np.testing.assert_allclose(out.cov.numpy(), expected, atol=1e-12)

    def test_correlated_fixture(self):
        # task 1-3 correlation 0.5 propagates into the printed constrained matrix
        cov0 = np.array([
            [1.0, 0.0, 0.5, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.5, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        out = condition_gaussian(GaussianDist(np.zeros(4), cov0), [[0.5, 0.5, 0.0, 0.0]], [0.0])
        expected = np.array([
            [0.5, -0.5, 0.25, 0.0],
            [-0.5, 0.5, -0.25, 0.0],
            [0.25, -0.25, 0.875, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        np.testing.assert_allclose(out.cov.numpy(), expected, atol=1e-12)

    def test_reconditioning_rejected(self):
        d = random_gaussian(np.random.default_rng(1), 4)
        f, s = [[1.0, 0.5, 0.0, -1.0]], [0.3]
        once = condition_gaussian(d, f, s)
        with pytest.raises(NumericError, match="constraint rows"):
            condition_gaussian(once, f, s)

    @given(
        n=st.integers(2, 20),
        n_f=st.integers(1, 3),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=60, deadline=None)
    def test_constraint_exactness_property(self, n, n_f, seed):
        n_f = min(n_f, n - 1)
        rng = np.random.default_rng(seed)
        d = random_gaussian(rng, n)
        f = random_full_rank_rows(rng, n_f, n)
        s = rng.standard_normal(n_f)
        out = condition_gaussian(d, f, s)
        resid = np.abs(f @ out.mean.numpy() - s).max()
        assert resid <= 1e-9 * (1.0 + np.abs(s).max())
        gram = f @ out.cov.numpy() @ f.T
        assert np.abs(gram).max() <= 1e-9 * np.abs(d.cov.numpy()).max()
        # symmetry / PSD preservation
        c = out.cov.numpy()
        assert np.abs(c - c.T).max() <= 1e-10 * max(np.abs(c).max(), 1.0)
        w = np.linalg.eigvalsh(0.5 * (c + c.T))
        assert w.min() >= -1e-8 * max(c.diagonal().max(), 1.0)

    def test_sample_level_fulfillment(self):
        rng = np.random.default_rng(2)
        d = random_gaussian(rng, 6)
        f = random_full_rank_rows(rng, 2, 6)
        s = rng.standard_normal(2)
        out = condition_gaussian(d, f, s)
        samples = out.sample(np.random.default_rng(3), 1000)
        viol = np.abs(samples @ f.T - s)
        assert viol.max() <= 1e-6 * (1.0 + np.abs(s).max())


class TestBuildTotalConstraint:
    def test_single_point_passthrough(self):
        spec = ConstraintSpec.constant([[1.0, 2.0]], [3.0])
        f_tot, s_tot = build_total_constraint(spec, [np.array([0.0])])
        np.testing.assert_allclose(f_tot.numpy(), [[1.0, 2.0]])
        np.testing.assert_allclose(s_tot.numpy(), [3.0])

    def test_two_points_block_diagonal(self):
        spec = ConstraintSpec.constant([[1.0, 2.0]], [3.0])
        f_tot, s_tot = build_total_constraint(spec, [0.0, 1.0])
        expected = np.array([[1.0, 2.0, 0.0, 0.0], [0.0, 0.0, 1.0, 2.0]])
        np.testing.assert_allclose(f_tot.numpy(), expected)
        np.testing.assert_allclose(s_tot.numpy(), [3.0, 3.0])

    def test_varying_targets_evaluated_per_point(self):
        spec = ConstraintSpec.varying(2, lambda x: [[0.5, 0.5]], lambda x: [float(x) ** 2])
        _, s_tot = build_total_constraint(spec, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(s_tot.numpy(), [1.0, 4.0, 9.0])

    def test_failing_spec_names_point(self):
        def bad(x):
            if x > 0.5:
                raise ValueError("boom")
            return [[1.0, 0.0]]

        spec = ConstraintSpec.varying(2, bad, lambda x: [0.0])
        with pytest.raises(InputError, match="point 1"):
            build_total_constraint(spec, [0.0, 1.0])

    def test_more_constraints_than_tasks_rejected(self):
        with pytest.raises(InputError):
            ConstraintSpec.constant(np.eye(4, 3), np.zeros(4))

    def test_from_terms_zero_pads(self):
        spec = ConstraintSpec.from_terms(4, {0: 0.5, 1: 0.5}, 0.8)
        np.testing.assert_allclose(spec.coeff_fn(0.0), [[0.5, 0.5, 0.0, 0.0]])
        np.testing.assert_allclose(spec.target_fn(0.0), [0.8])


class TestConstantKroneckerFastPath:
    def test_no_constraint_returns_kron_prior(self):
        rng = np.random.default_rng(4)
        k = random_gaussian(rng, 3).cov.numpy()
        sig_t = random_gaussian(rng, 2).cov.numpy()
        mu_t = np.array([0.5, -1.0])
        out = condition_constant_kronecker(mu_t, sig_t, np.zeros((0, 2)), np.zeros(0), 1.0, k)
        np.testing.assert_allclose(out.mean.numpy(), np.tile(mu_t, 3))
        np.testing.assert_allclose(out.cov.numpy(), np.kron(k, sig_t), atol=1e-12)

    def _general_path(self, mu_t, sig_t, f, s, a, k):
        n = k.shape[0]
        mean = np.kron(np.full(n, a), mu_t)
        cov = np.kron(k, sig_t)
        spec = ConstraintSpec.constant(f, s)
        f_tot, s_tot = build_total_constraint(spec, list(range(n)))
        return condition_gaussian(GaussianDist(mean, cov), f_tot, s_tot)

    def test_matches_general_path_oracle(self):
        rng = np.random.default_rng(5)
        k = random_gaussian(rng, 3).cov.numpy()
        sig_t = random_gaussian(rng, 2).cov.numpy()
        mu_t = rng.standard_normal(2)
        f, s = np.array([[1.0, 1.0]]), np.array([0.0])
        fast = condition_constant_kronecker(mu_t, sig_t, f, s, 1.0, k)
        general = self._general_path(mu_t, sig_t, f, s, 1.0, k)
        np.testing.assert_allclose(fast.mean.numpy(), general.mean.numpy(), atol=1e-8)
        np.testing.assert_allclose(fast.cov.numpy(), general.cov.numpy(), atol=1e-8)

    @given(seed=st.integers(0, 10_000), n=st.integers(2, 4), nf=st.integers(2, 4),
           n_con=st.integers(1, 2), scale=st.sampled_from([1.0, 2.0, -0.5]))
    @settings(max_examples=50, deadline=None)
    def test_kronecker_equivalence_property(self, seed, n, nf, n_con, scale):
        n_con = min(n_con, nf - 1)
        rng = np.random.default_rng(seed)
        k = random_gaussian(rng, n).cov.numpy()
        sig_t = random_gaussian(rng, nf).cov.numpy()
        mu_t = rng.standard_normal(nf)
        f = random_full_rank_rows(rng, n_con, nf)
        s = rng.standard_normal(n_con)
        fast = condition_constant_kronecker(mu_t, sig_t, f, s, scale, k)
        general = self._general_path(mu_t, sig_t, f, s, scale, k)
        scale_ref = max(np.abs(general.cov.numpy()).max(), 1.0)
        assert np.abs(fast.mean.numpy() - general.mean.numpy()).max() <= 1e-8 * scale_ref
        assert np.abs(fast.cov.numpy() - general.cov.numpy()).max() <= 1e-8 * scale_ref

    def test_oscillator_sample_fulfillment(self):
        rng = np.random.default_rng(6)
        k = random_gaussian(rng, 3).cov.numpy()
        sig_t = np.eye(4)
        f, s = np.array([[0.5, 0.5, 0.0, 0.0]]), np.array([0.8])
        out = condition_constant_kronecker(np.zeros(4), sig_t, f, s, 1.0, k)
        samples = out.sample(np.random.default_rng(7), 1000).reshape(1000, 3, 4)
        viol = np.abs(0.5 * samples[:, :, 0] + 0.5 * samples[:, :, 1] - 0.8)
        assert viol.max() <= 1e-6


class TestNullspaceTaskCovariance:
    def test_oscillator_projector_and_mean(self):
        proj, mean = nullspace_task_covariance([[0.5, 0.5, 0.0, 0.0]], [0.8])
        expected = np.array([
            [0.5, -0.5, 0.0, 0.0],
            [-0.5, 0.5, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        np.testing.assert_allclose(proj, expected, atol=1e-12)
        assert 0.5 * mean[0] + 0.5 * mean[1] == pytest.approx(0.8)

    def test_identity_rows_zero_projector_block(self):
        proj, _ = nullspace_task_covariance(np.eye(2, 4), np.zeros(2))
        np.testing.assert_allclose(proj[:2, :2], np.zeros((2, 2)), atol=1e-12)
        np.testing.assert_allclose(proj[2:, 2:], np.eye(2), atol=1e-12)

    def test_matches_conditioning_oracle(self):
        rng = np.random.default_rng(8)
        f = random_full_rank_rows(rng, 2, 5)
        proj, _ = nullspace_task_covariance(f, np.zeros(2))
        cond = condition_gaussian(GaussianDist(np.zeros(5), np.eye(5)), f, np.zeros(2))
        np.testing.assert_allclose(proj, cond.cov.numpy(), atol=1e-10)

    def test_rank_deficient_rejected(self):
        with pytest.raises(InputError):
            nullspace_task_covariance([[1.0, 1.0], [2.0, 2.0]], [0.0, 0.0])
