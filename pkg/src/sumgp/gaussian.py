"""Multitask GP priors, exact prediction and log marginal likelihood.

The joint over N input points with T tasks is laid out task-major within
point: flat index (i, a) -> i * T + a.  With a constant data mean of ones
and a position-independent task kernel the prior factorizes as

    mean = 1_N (x) task_means,      cov = k_rbf(X, X) (x) (B B^T + diag(v)),

where (x) is the Kronecker product.  Noise is never baked into the prior;
it is added to the observation block by the predictive / likelihood
routines, after any constraint conditioning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import InputError, NumericError
from .linalg import (
    DTYPE,
    as_tensor,
    chol_logdet,
    chol_solve,
    cholesky_jitter,
    symmetrize,
)


@dataclass(frozen=True)
class Hyperparameters:
    """Trainable kernel parameters of one multitask GP.

    sigma_f, lengthscale and noise_sigma_n are scalars; task_factor is the
    (T, r) low-rank factor and task_diag the length-T nonnegative diagonal
    of the task kernel; task_means holds one constant mean per task.
    """

    sigma_f: torch.Tensor
    lengthscale: torch.Tensor
    task_factor: torch.Tensor
    task_diag: torch.Tensor
    noise_sigma_n: torch.Tensor
    task_means: torch.Tensor

    def __post_init__(self):
        for name in ("sigma_f", "lengthscale", "task_factor", "task_diag",
                     "noise_sigma_n", "task_means"):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
        if self.task_factor.ndim != 2:
            raise InputError("task_factor must be a (n_tasks, rank) matrix")
        t = self.task_factor.shape[0]
        if self.task_diag.shape != (t,) or self.task_means.shape != (t,):
            raise InputError("task_diag / task_means length must match task_factor rows")

    @property
    def n_tasks(self) -> int:
        return self.task_factor.shape[0]

    def validate(self) -> None:
        if not float(self.sigma_f) > 0:
            raise InputError("sigma_f must be positive")
        if not float(self.lengthscale) > 0:
            raise InputError("lengthscale must be positive")
        if float(self.task_diag.detach().min()) < 0:
            raise InputError("task_diag entries must be nonnegative")
        if float(self.noise_sigma_n) < 0:
            raise InputError("noise_sigma_n must be nonnegative")


@dataclass(frozen=True)
class MultitaskGrid:
    """Input locations plus task count, fixing the flat task-major layout."""

    inputs: torch.Tensor
    n_tasks: int

    def __post_init__(self):
        x = as_tensor(self.inputs)
        if x.ndim == 1:
            x = x.unsqueeze(-1)
        if x.ndim != 2:
            raise InputError("inputs must be (N,) or (N, d)")
        if self.n_tasks < 1:
            raise InputError("n_tasks must be positive")
        object.__setattr__(self, "inputs", x)

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def flat_dim(self) -> int:
        return self.n_points * self.n_tasks


@dataclass(frozen=True)
class GaussianDist:
    """Mean vector and covariance matrix of a finite-dimensional Gaussian."""

    mean: torch.Tensor
    cov: torch.Tensor

    def __post_init__(self):
        mean = as_tensor(self.mean).reshape(-1)
        cov = as_tensor(self.cov)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise InputError(f"cov shape {tuple(cov.shape)} does not match mean length {mean.shape[0]}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def check(self, sym_rtol: float = 1e-10, psd_rtol: float = 1e-8) -> None:
        """Assert symmetry and positive semidefiniteness within tolerance."""
        cov = self.cov.detach()
        scale = float(cov.abs().max()) or 1.0
        asym = float((cov - cov.T).abs().max())
        if asym > sym_rtol * scale:
            raise NumericError(f"covariance asymmetry {asym:.3e} exceeds {sym_rtol:.1e} relative")
        if self.dim:
            w = torch.linalg.eigvalsh(symmetrize(cov))
            floor = psd_rtol * max(float(cov.diagonal().max()), 0.0)
            if float(w.min()) < -floor - torch.finfo(DTYPE).eps:
                raise NumericError(f"covariance min eigenvalue {float(w.min()):.3e} below PSD tolerance")

    def sample(self, rng: np.random.Generator, n_samples: int) -> np.ndarray:
        """Draw samples via the eigendecomposition square root (PSD-safe)."""
        cov = symmetrize(self.cov.detach())
        w, v = torch.linalg.eigh(cov)
        root = v * torch.sqrt(torch.clamp(w, min=0.0))
        z = rng.standard_normal((n_samples, self.dim))
        return self.mean.detach().numpy() + z @ root.T.numpy()


@dataclass(frozen=True)
class TaskedDataset:
    """Inputs with per-task observations; NaN marks a missing entry.

    virtual_mask flags synthetic observations inserted at inverse-branch
    switches; generators leave it all-False.
    """

    inputs: np.ndarray
    observations: np.ndarray
    scale_factors: np.ndarray = None
    ground_truth: Optional[np.ndarray] = None
    virtual_mask: np.ndarray = None
    task_names: tuple = ()

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.inputs, dtype=float))
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.observations, dtype=float)
        if y.ndim != 2 or y.shape[0] != x.shape[0]:
            raise InputError("observations must be (N, n_tasks) aligned with inputs")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "observations", y)
        if self.scale_factors is None:
            object.__setattr__(self, "scale_factors", np.ones(y.shape[1]))
        else:
            object.__setattr__(self, "scale_factors", np.asarray(self.scale_factors, dtype=float))
        if self.virtual_mask is None:
            object.__setattr__(self, "virtual_mask", np.zeros_like(y, dtype=bool))
        else:
            object.__setattr__(self, "virtual_mask", np.asarray(self.virtual_mask, dtype=bool))
        if y.shape[0] and not np.isfinite(y).any(axis=1).all():
            raise InputError("every input point needs at least one observed task entry")

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.observations.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return ~np.isfinite(self.observations)

    def grid(self) -> MultitaskGrid:
        return MultitaskGrid(self.inputs, self.n_tasks)


def rbf_kernel(x, x2, hp: Hyperparameters) -> torch.Tensor:
    """sigma_f^2 exp(-|x - x2|^2 / (2 l^2)) for a single pair of points."""
    a, b = as_tensor(x).reshape(-1), as_tensor(x2).reshape(-1)
    if a.shape != b.shape:
        raise InputError(f"input dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    d2 = ((a - b) ** 2).sum()
    return hp.sigma_f ** 2 * torch.exp(-d2 / (2.0 * hp.lengthscale ** 2))


def rbf_gram(x, x2, hp: Hyperparameters) -> torch.Tensor:
    """Dense RBF kernel matrix between two point sets of shape (N, d)."""
    a, b = as_tensor(x), as_tensor(x2)
    if a.ndim == 1:
        a = a.unsqueeze(-1)
    if b.ndim == 1:
        b = b.unsqueeze(-1)
    d2 = torch.cdist(a, b, p=2.0) ** 2
    return hp.sigma_f ** 2 * torch.exp(-d2 / (2.0 * hp.lengthscale ** 2))


def index_task_kernel(hp: Hyperparameters) -> torch.Tensor:
    """Task kernel B B^T + diag(v); symmetric PSD by construction."""
    return hp.task_factor @ hp.task_factor.T + torch.diag(hp.task_diag)


def build_multitask_prior(
    train: MultitaskGrid,
    test: Optional[MultitaskGrid],
    hp: Hyperparameters,
) -> GaussianDist:
    """Joint noiseless prior over [f_train; f_test] (test may be empty)."""
    if train.n_points == 0:
        raise InputError("training grid must be nonempty")
    if test is not None and test.n_tasks != train.n_tasks:
        raise InputError("train/test task counts differ")
    if hp.n_tasks != train.n_tasks:
        raise InputError("hyperparameter task count does not match grid")
    if test is not None and test.n_points:
        x_all = torch.cat([train.inputs, test.inputs], dim=0)
    else:
        x_all = train.inputs
    k_d = rbf_gram(x_all, x_all, hp)
    k_t = index_task_kernel(hp)
    cov = torch.kron(k_d, k_t)
    mean = torch.tile(hp.task_means, (x_all.shape[0],))
    return GaussianDist(mean, symmetrize(cov))


def filter_missing(dist: GaussianDist, layout: MultitaskGrid, mask) -> GaussianDist:
    """Drop rows/columns of masked coordinates (exact Gaussian marginal).

    `mask` is boolean over the observation block (True = missing); any
    coordinates of `dist` beyond the observation block are kept.
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != layout.flat_dim:
        raise InputError(f"mask length {mask.shape[0]} does not match layout dim {layout.flat_dim}")
    if mask.shape[0] > dist.dim:
        raise InputError("mask longer than the distribution")
    keep = np.concatenate([~mask, np.ones(dist.dim - mask.shape[0], dtype=bool)])
    if not keep.any():
        raise InputError("filtering removed every coordinate")
    idx = torch.as_tensor(np.flatnonzero(keep))
    return GaussianDist(dist.mean[idx], dist.cov[idx][:, idx])


def _split_joint(joint: GaussianDist, n_obs: int):
    if n_obs > joint.dim:
        raise InputError("observation vector longer than the joint distribution")
    m = joint.mean[:n_obs]
    m_star = joint.mean[n_obs:]
    k = joint.cov[:n_obs, :n_obs]
    k_star = joint.cov[:n_obs, n_obs:]
    k_ss = joint.cov[n_obs:, n_obs:]
    return m, m_star, k, k_star, k_ss


def _noisy_chol(k: torch.Tensor, noise_sigma_n, what: str) -> torch.Tensor:
    noise = as_tensor(noise_sigma_n) ** 2
    ky = k + noise * torch.eye(k.shape[0], dtype=DTYPE)
    try:
        return cholesky_jitter(ky, what)
    except NumericError as err:
        cond = float(torch.linalg.cond(ky.detach()))
        raise NumericError(f"{err} (condition number ~ {cond:.3e})") from None


def gp_predict(joint: GaussianDist, y_obs, noise_sigma_n) -> GaussianDist:
    """Exact Gaussian conditioning of the test block on noisy observations."""
    y = as_tensor(y_obs).reshape(-1)
    m, m_star, k, k_star, k_ss = _split_joint(joint, y.shape[0])
    if m_star.shape[0] == 0:
        return GaussianDist(m_star, k_ss)
    if y.shape[0] == 0:
        return GaussianDist(m_star, symmetrize(k_ss))
    chol = _noisy_chol(k, noise_sigma_n, "K + sigma_n^2 I")
    alpha = chol_solve(chol, y - m)
    mean = m_star + k_star.T @ alpha
    tmp = chol_solve(chol, k_star)
    cov = symmetrize(k_ss - k_star.T @ tmp)
    return GaussianDist(mean, cov)


def gp_predict_mean(joint: GaussianDist, y_obs, noise_sigma_n) -> torch.Tensor:
    """Predictive mean only (cheap path for dense auxiliary curves)."""
    y = as_tensor(y_obs).reshape(-1)
    m, m_star, k, k_star, _ = _split_joint(joint, y.shape[0])
    if y.shape[0] == 0 or m_star.shape[0] == 0:
        return m_star
    chol = _noisy_chol(k, noise_sigma_n, "K + sigma_n^2 I")
    return m_star + k_star.T @ chol_solve(chol, y - m)


def log_marginal_likelihood(prior: GaussianDist, y_obs, noise_sigma_n) -> torch.Tensor:
    """Gaussian evidence via Cholesky of (K + sigma_n^2 I)."""
    y = as_tensor(y_obs).reshape(-1)
    if y.shape[0] != prior.dim:
        raise InputError(f"observation length {y.shape[0]} does not match prior dim {prior.dim}")
    chol = _noisy_chol(prior.cov, noise_sigma_n, "K + sigma_n^2 I")
    resid = y - prior.mean
    alpha = chol_solve(chol, resid)
    n = y.shape[0]
    return -0.5 * resid @ alpha - 0.5 * chol_logdet(chol) - 0.5 * n * math.log(2.0 * math.pi)
