"""Assembled GP models: prior + optional sum constraint + inference mode.

A ModelSpec owns everything needed to evaluate the training objective and
predictive distribution of one multitask GP over transformed tasks.  The
joint prior is conditioned on the constraint over all points (training
plus prediction), the coordinates of missing observations are removed,
and noise enters afterwards: through sigma_n^2 I for exact inference, or
through the transformed likelihood for Laplace / variational inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .constraints import (
    ConstraintSpec,
    build_total_constraint,
    condition_constant_kronecker,
    condition_gaussian,
)
from .errors import InputError
from .gaussian import (
    GaussianDist,
    Hyperparameters,
    MultitaskGrid,
    TaskedDataset,
    build_multitask_prior,
    gp_predict,
    gp_predict_mean,
    index_task_kernel,
    log_marginal_likelihood,
    rbf_gram,
)
from .inference import (
    TransformedLikelihood,
    VariationalState,
    elbo,
    laplace_lml,
    laplace_mode,
    laplace_predict,
    variational_predict,
)
from .linalg import as_tensor

INFERENCE_MODES = ("exact", "laplace", "vi")

VI_PRIOR_FLOOR = 1e-8


@dataclass(frozen=True)
class ModelSpec:
    """Task layout, constraint and inference mode of one GP."""

    n_tasks: int
    kinds: tuple = ()  # per-task nonlinearity of the observations
    constraint: Optional[ConstraintSpec] = None
    inference: str = "exact"
    rank: Optional[int] = None

    def __post_init__(self):
        kinds = tuple(self.kinds) or ("identity",) * self.n_tasks
        if len(kinds) != self.n_tasks:
            raise InputError("one kind per task required")
        object.__setattr__(self, "kinds", kinds)
        if self.inference not in INFERENCE_MODES:
            raise InputError(f"unknown inference mode {self.inference!r}")
        if self.constraint is not None and self.constraint.n_tasks != self.n_tasks:
            raise InputError("constraint task count does not match model")

    @property
    def task_rank(self) -> int:
        return self.rank or self.n_tasks


def flatten_observations(data: TaskedDataset, spec: ModelSpec):
    """Flat missing mask, observed values and per-observation kind codes.

    Virtual measurements pin the transformed value directly, so their
    likelihood is an identity entry regardless of the task nonlinearity.
    """
    if data.n_tasks != spec.n_tasks:
        raise InputError("dataset task count does not match model")
    missing = data.missing.reshape(-1)
    y_obs = data.observations.reshape(-1)[~missing]
    task_idx = np.tile(np.arange(spec.n_tasks), data.n_points)[~missing]
    virtual = data.virtual_mask.reshape(-1)[~missing]
    kinds = [
        "identity" if virtual[i] else spec.kinds[task_idx[i]]
        for i in range(y_obs.shape[0])
    ]
    return missing, y_obs, kinds


def build_joint_prior(spec: ModelSpec, hp: Hyperparameters, x_train, x_test=None) -> GaussianDist:
    """Noiseless joint prior over [train; test], constraint-conditioned."""
    grid_train = MultitaskGrid(x_train, spec.n_tasks)
    grid_test = MultitaskGrid(x_test, spec.n_tasks) if x_test is not None else None
    if spec.constraint is None:
        return build_multitask_prior(grid_train, grid_test, hp)
    if spec.constraint.is_constant:
        if grid_test is not None and grid_test.n_points:
            x_all = torch.cat([grid_train.inputs, grid_test.inputs])
        else:
            x_all = grid_train.inputs
        probe = grid_train.inputs[0].numpy()
        return condition_constant_kronecker(
            hp.task_means,
            index_task_kernel(hp),
            spec.constraint.coeff_fn(probe),
            spec.constraint.target_fn(probe),
            1.0,
            rbf_gram(x_all, x_all, hp),
        )
    prior = build_multitask_prior(grid_train, grid_test, hp)
    points = grid_train.inputs.numpy()
    if grid_test is not None and grid_test.n_points:
        points = np.concatenate([points, grid_test.inputs.numpy()])
    f_tot, s_tot = build_total_constraint(spec.constraint, list(points))
    return condition_gaussian(prior, f_tot, s_tot)


def _filtered_train_prior(spec, hp, data):
    prior = build_joint_prior(spec, hp, data.inputs, None)
    missing, y_obs, kinds = flatten_observations(data, spec)
    keep = torch.as_tensor(np.flatnonzero(~missing))
    filtered = GaussianDist(prior.mean[keep], prior.cov[keep][:, keep])
    return filtered, y_obs, kinds


def training_objective(spec: ModelSpec, data: TaskedDataset, hp: Hyperparameters,
                       vstate: Optional[VariationalState] = None,
                       warm_cache: Optional[dict] = None) -> torch.Tensor:
    """Log marginal likelihood (exact / Laplace) or ELBO (vi) on train data."""
    filtered, y_obs, kinds = _filtered_train_prior(spec, hp, data)
    if spec.inference == "exact":
        return log_marginal_likelihood(filtered, y_obs, hp.noise_sigma_n)
    lik = TransformedLikelihood(y_obs, kinds)
    if spec.inference == "laplace":
        warm = warm_cache.get("alpha") if warm_cache is not None else None
        state = laplace_mode(filtered, lik, hp.noise_sigma_n, warm_alpha=warm)
        if warm_cache is not None:
            warm_cache["alpha"] = state.grad_at_mode.detach().clone()
        return laplace_lml(state, filtered, lik, hp.noise_sigma_n)
    if vstate is None:
        raise InputError("variational inference needs a VariationalState")
    # a fixed floor keeps the KL against the (singular) conditioned prior
    # finite and its hyperparameter gradients tame
    floored = GaussianDist(
        filtered.mean,
        filtered.cov + VI_PRIOR_FLOOR * filtered.cov.detach().diagonal().mean()
        * torch.eye(filtered.dim, dtype=filtered.cov.dtype),
    )
    return elbo(vstate, floored, lik, hp.noise_sigma_n)


def _prediction_blocks(spec, hp, data, x_test):
    joint = build_joint_prior(spec, hp, data.inputs, x_test)
    missing, y_obs, kinds = flatten_observations(data, spec)
    n_test_flat = np.atleast_1d(np.asarray(x_test)).reshape(len(np.atleast_1d(np.asarray(x_test))), -1).shape[0] * spec.n_tasks
    keep = np.concatenate([~missing, np.ones(n_test_flat, dtype=bool)])
    idx = torch.as_tensor(np.flatnonzero(keep))
    mean = joint.mean[idx]
    cov = joint.cov[idx][:, idx]
    n_obs = int((~missing).sum())
    m, m_star = mean[:n_obs], mean[n_obs:]
    k = cov[:n_obs, :n_obs]
    k_star = cov[:n_obs, n_obs:]
    k_ss = cov[n_obs:, n_obs:]
    return (m, m_star, k, k_star, k_ss), y_obs, kinds


class FittedGP:
    """A trained model bound to its training data; prediction entry point."""

    def __init__(self, spec: ModelSpec, data: TaskedDataset, hp: Hyperparameters,
                 vstate: Optional[VariationalState] = None,
                 warm_alpha: Optional[np.ndarray] = None):
        self.spec = spec
        self.data = data
        self.hp = hp
        self.vstate = vstate
        self.warm_alpha = warm_alpha

    def predict(self, x_test) -> GaussianDist:
        """Joint predictive over test coordinates (task-major within point)."""
        with torch.no_grad():
            (m, m_star, k, k_star, k_ss), y_obs, kinds = _prediction_blocks(
                self.spec, self.hp, self.data, x_test)
            if self.spec.inference == "exact":
                joint = GaussianDist(
                    torch.cat([m, m_star]),
                    torch.cat([torch.cat([k, k_star], 1),
                               torch.cat([k_star.T, k_ss], 1)], 0),
                )
                return gp_predict(joint, y_obs, self.hp.noise_sigma_n)
            lik = TransformedLikelihood(y_obs, kinds)
            if self.spec.inference == "laplace":
                state = laplace_mode(GaussianDist(m, k), lik, self.hp.noise_sigma_n,
                                     warm_alpha=self.warm_alpha)
                return laplace_predict(state, k, k_star, k_ss, m, m_star)
            return variational_predict(self.vstate, k, k_star, k_ss, m, m_star)

    def predict_mean(self, x_test) -> np.ndarray:
        """Posterior mean curves only, shaped (n_test, n_tasks)."""
        n_test = np.atleast_1d(np.asarray(x_test)).reshape(-1).shape[0] if np.asarray(x_test).ndim <= 1 \
            else np.asarray(x_test).shape[0]
        with torch.no_grad():
            if self.spec.inference == "exact":
                (m, m_star, k, k_star, _), y_obs, _ = _prediction_blocks(
                    self.spec, self.hp, self.data, x_test)
                joint = GaussianDist(
                    torch.cat([m, m_star]),
                    torch.cat([torch.cat([k, k_star], 1),
                               torch.cat([k_star.T, torch.eye(m_star.shape[0],
                                                              dtype=k.dtype)], 1)], 0),
                )
                mean = gp_predict_mean(joint, y_obs, self.hp.noise_sigma_n).numpy()
            else:
                mean = self.predict(x_test).mean.numpy()
        return mean.reshape(n_test, self.spec.n_tasks)
