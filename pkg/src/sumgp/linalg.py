"""Small torch linear-algebra helpers with the shared jitter policy.

All numerics run in float64.  On Cholesky failure an escalating jitter
eps * mean(diag) is added, eps in {1e-10 ... 1e-6}; past that a
NumericError is raised so the caller's restart logic can take over.
"""

from __future__ import annotations

import torch

from .errors import NumericError

DTYPE = torch.float64

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def as_tensor(x) -> torch.Tensor:
    """Convert array-likes to float64 tensors, passing tensors through."""
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def symmetrize(a: torch.Tensor) -> torch.Tensor:
    return 0.5 * (a + a.transpose(-1, -2))


def cholesky_jitter(a: torch.Tensor, what: str = "matrix") -> torch.Tensor:
    """Lower Cholesky factor of `a`, adding escalating jitter on failure."""
    if a.shape[-1] == 0:
        return a
    diag_mean = torch.clamp(torch.diagonal(a).detach().mean(), min=torch.finfo(DTYPE).tiny)
    eye = torch.eye(a.shape[-1], dtype=DTYPE)
    for eps in JITTER_LADDER:
        chol, info = torch.linalg.cholesky_ex(a + (eps * diag_mean) * eye)
        if int(info) == 0 and torch.isfinite(chol).all():
            return chol
    raise NumericError(
        f"Cholesky of {what} failed after jitter escalation to 1e-6 "
        f"(dim {a.shape[-1]}, mean diag {float(diag_mean):.3e})"
    )


def chol_solve(chol: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Solve A x = b given the lower Cholesky factor of A."""
    squeeze = b.ndim == 1
    if squeeze:
        b = b.unsqueeze(-1)
    x = torch.cholesky_solve(b, chol)
    return x.squeeze(-1) if squeeze else x


def chol_logdet(chol: torch.Tensor) -> torch.Tensor:
    """log|A| from the lower Cholesky factor of A."""
    return 2.0 * torch.log(torch.diagonal(chol)).sum()


def solve_psd(a: torch.Tensor, b: torch.Tensor, what: str = "matrix") -> torch.Tensor:
    """Solve a PSD system through the jittered Cholesky."""
    return chol_solve(cholesky_jitter(a, what), b)


def pinv_solve(a: torch.Tensor, b: torch.Tensor, rcond: float = 1e-10) -> torch.Tensor:
    """Least-squares solve for (nearly) singular symmetric PSD systems.

    Used only in prediction paths where the right-hand side is known to lie
    in the range of `a` up to rounding; eigenvalues below rcond * max are
    treated as exact zeros.
    """
    a = symmetrize(a)
    w, v = torch.linalg.eigh(a)
    cutoff = rcond * torch.clamp(w.max(), min=torch.finfo(DTYPE).tiny)
    inv_w = torch.where(w > cutoff, 1.0 / w, torch.zeros_like(w))
    squeeze = b.ndim == 1
    if squeeze:
        b = b.unsqueeze(-1)
    x = v @ (inv_w.unsqueeze(-1) * (v.transpose(-1, -2) @ b))
    return x.squeeze(-1) if squeeze else x
