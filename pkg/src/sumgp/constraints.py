"""Conditioning Gaussians on affine sum constraints.

Given f ~ N(mu, Sigma) and a constraint F f = S, the conditional is

    D   = (F Sigma F^T)^{-1} F Sigma,
    A   = I - D^T F,
    mu' = A mu + D^T S,
    Sig'= A Sigma A^T = Sigma - Sigma F^T (F Sigma F^T)^{-1} F Sigma,

which annihilates the constraint rows exactly: F mu' = S, F Sig' F^T = 0.

Two routes exist for enforcing the constraint at many input points: the
general route builds a block-diagonal total coefficient matrix, and the
constant-constraint route conditions the task mean/covariance once and
Kronecker-expands, which is algebraically identical when the constraint
and task kernel are position independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import torch

from .errors import InputError, NumericError
from .gaussian import GaussianDist
from .linalg import DTYPE, as_tensor, chol_solve, cholesky_jitter, symmetrize


@dataclass(frozen=True)
class ConstraintSpec:
    """Per-point constraint rows F(x) and targets S(x).

    coeff_fn maps an input point to the (n_constraints, n_tasks) row
    matrix; target_fn maps it to the length-n_constraints target vector.
    is_constant asserts both are position independent, enabling the
    Kronecker fast path.
    """

    coeff_fn: Callable
    target_fn: Callable
    n_constraints: int
    n_tasks: int
    is_constant: bool = False

    def __post_init__(self):
        if self.n_constraints > self.n_tasks:
            raise InputError(
                f"{self.n_constraints} constraints on {self.n_tasks} tasks: "
                "more constraints than tasks are rejected"
            )

    @classmethod
    def constant(cls, coeffs, targets) -> "ConstraintSpec":
        """Constraint with fixed rows; rows shorter than n_tasks are not padded."""
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        targets = np.atleast_1d(np.asarray(targets, dtype=float))
        if targets.shape[0] != coeffs.shape[0]:
            raise InputError("one target per constraint row required")
        return cls(
            coeff_fn=lambda x, c=coeffs: c,
            target_fn=lambda x, t=targets: t,
            n_constraints=coeffs.shape[0],
            n_tasks=coeffs.shape[1],
            is_constant=True,
        )

    @classmethod
    def from_terms(cls, n_tasks: int, terms: dict, target: float) -> "ConstraintSpec":
        """Single constant constraint from {task index: coefficient}.

        Tasks not named (e.g. auxiliary outputs) get explicit zero columns.
        """
        row = np.zeros(n_tasks)
        for idx, coeff in terms.items():
            row[int(idx)] = coeff
        return cls.constant(row[None, :], [target])

    @classmethod
    def varying(cls, n_tasks: int, coeff_fn, target_fn, n_constraints: int = 1) -> "ConstraintSpec":
        return cls(
            coeff_fn=lambda x: np.atleast_2d(np.asarray(coeff_fn(x), dtype=float)),
            target_fn=lambda x: np.atleast_1d(np.asarray(target_fn(x), dtype=float)),
            n_constraints=n_constraints,
            n_tasks=n_tasks,
            is_constant=False,
        )

    def check_constancy(self, probe_a, probe_b, tol: float = 1e-12) -> None:
        """Verify the is_constant flag against two probe points."""
        if not self.is_constant:
            return
        fa, fb = np.asarray(self.coeff_fn(probe_a)), np.asarray(self.coeff_fn(probe_b))
        sa, sb = np.asarray(self.target_fn(probe_a)), np.asarray(self.target_fn(probe_b))
        if np.abs(fa - fb).max() > tol or np.abs(sa - sb).max() > tol:
            raise InputError("constraint flagged constant but evaluations differ between probe points")


def condition_gaussian(dist: GaussianDist, coeffs, targets) -> GaussianDist:
    """Condition N(mu, Sigma) on F f = S (exact affine conditioning)."""
    f = as_tensor(coeffs)
    if f.ndim == 1:
        f = f.unsqueeze(0)
    s = as_tensor(targets).reshape(-1)
    if f.shape[1] != dist.dim:
        raise InputError(f"constraint row length {f.shape[1]} does not match dimension {dist.dim}")
    if s.shape[0] != f.shape[0]:
        raise InputError("one target per constraint row required")
    if f.shape[0] == 0:
        return dist
    fs = f @ dist.cov
    gram = fs @ f.T
    try:
        chol = cholesky_jitter(symmetrize(gram), "F Sigma F^T")
    except NumericError:
        var = torch.diagonal(gram).detach()
        bad = torch.nonzero(var <= 1e-12 * max(float(var.max()), 1.0)).reshape(-1).tolist()
        raise NumericError(
            "F Sigma F^T is singular; constraint rows "
            f"{bad or 'unknown'} carry (near-)zero prior variance, e.g. after "
            "conditioning the same constraint twice"
        ) from None
    d = chol_solve(chol, fs)
    mean = dist.mean - d.T @ (f @ dist.mean) + d.T @ s
    cov = symmetrize(dist.cov - fs.T @ d)
    return GaussianDist(mean, cov)


def build_total_constraint(spec: ConstraintSpec, points: Sequence):
    """Block-diagonal total coefficients and stacked targets over points."""
    blocks, targets = [], []
    for i, x in enumerate(points):
        try:
            fx = np.atleast_2d(np.asarray(spec.coeff_fn(x), dtype=float))
            sx = np.atleast_1d(np.asarray(spec.target_fn(x), dtype=float))
        except Exception as err:
            raise InputError(f"constraint evaluation failed at point {i} (x={x!r}): {err}") from err
        if fx.shape != (spec.n_constraints, spec.n_tasks) or sx.shape != (spec.n_constraints,):
            raise InputError(f"constraint at point {i} has shape {fx.shape}, "
                             f"expected {(spec.n_constraints, spec.n_tasks)}")
        blocks.append(fx)
        targets.append(sx)
    if not blocks:
        raise InputError("constraint needs at least one point")
    f_tot = scipy.linalg.block_diag(*blocks)
    s_tot = np.concatenate(targets)
    return as_tensor(f_tot), as_tensor(s_tot)


def condition_constant_kronecker(
    task_mean,
    task_cov,
    coeffs,
    targets,
    data_mean_scale: float,
    data_cov,
) -> GaussianDist:
    """Constant-constraint fast path: condition the task distribution once,
    then Kronecker-expand with the data mean and covariance.

    With a constant data mean of entries a the task-level target is S/a;
    the result matches the general block-diagonal route exactly.
    """
    mu_t = as_tensor(task_mean).reshape(-1)
    sig_t = as_tensor(task_cov)
    k = as_tensor(data_cov)
    f = as_tensor(coeffs)
    if f.ndim == 1:
        f = f.unsqueeze(0)
    s = as_tensor(targets).reshape(-1)
    a = float(data_mean_scale)
    if a == 0.0:
        raise InputError("data_mean_scale must be nonzero")
    if f.shape[0]:
        cond = condition_gaussian(GaussianDist(mu_t, sig_t), f, s / a)
        mu_t, sig_t = cond.mean, cond.cov
    n = k.shape[0]
    ones = torch.full((n,), a, dtype=DTYPE)
    mean = torch.kron(ones, mu_t)
    cov = symmetrize(torch.kron(k, sig_t))
    return GaussianDist(mean, cov)


def nullspace_task_covariance(coeffs, targets):
    """Orthogonal projector onto null(F) plus the minimum-norm mean with F m = S.

    The projector G G^T (G an orthonormal nullspace basis) equals the
    covariance obtained by conditioning the identity on (F, 0).
    """
    f = np.atleast_2d(np.asarray(coeffs, dtype=float))
    s = np.atleast_1d(np.asarray(targets, dtype=float))
    if np.linalg.matrix_rank(f) < f.shape[0]:
        raise InputError("constraint rows are rank deficient")
    g = scipy.linalg.null_space(f)
    projector = g @ g.T
    mean = np.linalg.pinv(f) @ s
    return projector, mean
