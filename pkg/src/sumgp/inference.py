"""Laplace approximation and variational inference for transformed outputs.

Observing y' = h(f + eps) with Gaussian eps makes the likelihood in the
transformed variable non-Gaussian:

    p(y'|f') = p_y(h^{-1}(y') | h^{-1}(f')) |d h^{-1}(y') / dy'|,

which for the square is the (scaled) noncentral chi-squared density summed
over both sign branches, and for the sine a mixture over all arcsine
branches.  Everything here is written against the noiseless (possibly
constraint-conditioned, hence singular) prior covariance K: all solves go
through B = I + W^{1/2} K W^{1/2}, never through K^{-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import InputError, NumericError
from .gaussian import GaussianDist
from .linalg import DTYPE, as_tensor, chol_solve, cholesky_jitter, symmetrize

KIND_CODES = {"identity": 0, "square": 1, "log": 2, "sine": 3}
LOG_FLOOR = -1e10
_SQRT2 = math.sqrt(2.0)


def _logcosh(t: torch.Tensor) -> torch.Tensor:
    a = t.abs()
    return a + torch.log1p(torch.exp(-2.0 * a)) - math.log(2.0)


def _lik_identity(y, f, sigma):
    var = sigma ** 2
    logp = -0.5 * math.log(2 * math.pi) - torch.log(sigma) - (y - f) ** 2 / (2 * var)
    g = (y - f) / var
    h = -torch.ones_like(f) / var
    return logp, g, h


def _lik_square(y, f, sigma):
    """Noncentral chi-squared (1 dof, scaled) likelihood of y' = (f + eps)^2.

    Valid for f' >= 0; for f' < 0 the log-density continues quadratically
    with matched value/gradient/curvature at 0, which keeps Newton steps
    well behaved while pushing iterates back to the support.
    """
    var = sigma ** 2
    y_pos = torch.clamp(y, min=1e-300)
    c = torch.sqrt(y_pos) / var
    f_pos = torch.clamp(f, min=0.0)
    t = c * torch.sqrt(torch.clamp(f_pos, min=1e-300))

    base = -0.5 * math.log(2 * math.pi) - torch.log(sigma) - 0.5 * torch.log(y_pos) \
        - (y_pos + f_pos) / (2 * var)
    logp_pos = base + _logcosh(t)

    small = t < 1e-3
    t2 = t ** 2
    # tanh(t)/t and (t sech^2 t - tanh t)/t^3 with series fallbacks near 0;
    # the formula branch clamps t at the switch point so the branch not
    # selected by torch.where stays finite in the backward pass too
    t_safe = torch.clamp(t, min=1e-3)
    tanh_s = torch.tanh(t_safe)
    ratio1 = torch.where(small, 1.0 - t2 / 3.0 + 2.0 * t2 ** 2 / 15.0, tanh_s / t_safe)
    sech2_s = 1.0 - tanh_s ** 2
    ratio3 = torch.where(
        small,
        -2.0 / 3.0 + 8.0 * t2 / 15.0,
        (t_safe * sech2_s - tanh_s) / t_safe ** 3,
    )
    g_pos = -1.0 / (2 * var) + 0.5 * c ** 2 * ratio1
    h_pos = 0.25 * c ** 4 * ratio3

    g0 = -1.0 / (2 * var) + y_pos / (2 * var ** 2)
    # curvature floor 1/(2 sigma^4): tiny observations would otherwise pull
    # with constant slope 1/(2 sigma^2) and let the mode dive far below the
    # support boundary; the wall parks it near -sigma^2 instead
    h0 = -torch.maximum(y_pos ** 2 / (6.0 * var ** 4), 1.0 / (2.0 * var ** 2))
    logp0 = -0.5 * math.log(2 * math.pi) - torch.log(sigma) - 0.5 * torch.log(y_pos) \
        - y_pos / (2 * var)
    f_neg = torch.clamp(f, max=0.0)
    logp_neg = logp0 + g0 * f_neg + 0.5 * h0 * f_neg ** 2
    g_neg = g0 + h0 * f_neg

    pos = f >= 0
    logp = torch.where(pos, logp_pos, logp_neg)
    g = torch.where(pos, g_pos, g_neg)
    h = torch.where(pos, h_pos, h0 * torch.ones_like(f))

    supported = y >= 0
    logp = torch.where(supported, logp, torch.full_like(logp, LOG_FLOOR))
    g = torch.where(supported, g, torch.zeros_like(g))
    h = torch.where(supported, h, torch.zeros_like(h))
    return logp, g, h


def _lik_log(y, f, sigma):
    var = sigma ** 2
    ey = torch.exp(torch.clamp(y, max=300.0))
    ef = torch.exp(torch.clamp(f, max=300.0))
    logp = -0.5 * math.log(2 * math.pi) - torch.log(sigma) + y - (ey - ef) ** 2 / (2 * var)
    g = (ey - ef) * ef / var
    h = (ey * ef - 2.0 * ef ** 2) / var
    return logp, g, h


_ARCSINE_EDGE = 1.0 - 1e-4


def _sine_latent_mean(f):
    """arcsin with a C1 linear extension beyond |f'| = 1 - 1e-4."""
    edge = _ARCSINE_EDGE
    slope = 1.0 / math.sqrt(1.0 - edge ** 2)
    inner = torch.clamp(f, -edge, edge)
    mu_in = torch.arcsin(inner)
    r_in = 1.0 / torch.sqrt(1.0 - inner ** 2)
    outside = f.abs() > edge
    mu = torch.where(outside, torch.sign(f) * (math.asin(edge) + (f.abs() - edge) * slope), mu_in)
    r = torch.where(outside, torch.full_like(f, slope), r_in)
    # d r / d f', zero on the linear extension
    rp = torch.where(outside, torch.zeros_like(f), inner * r_in ** 3)
    return mu, r, rp


def _sine_solutions(y, sigma):
    s = torch.clamp(y, -1.0 + 1e-12, 1.0 - 1e-12)
    base = torch.arcsin(s)
    k_half = max(2, int(math.ceil((12.0 * float(sigma.detach()) + math.pi) / (2 * math.pi))) + 1)
    ks = torch.arange(-k_half, k_half + 1, dtype=DTYPE)
    u_a = base.unsqueeze(-1) + 2 * math.pi * ks
    u_b = (math.pi - base).unsqueeze(-1) + 2 * math.pi * ks
    return s, torch.cat([u_a, u_b], dim=-1)


def _lik_sine(y, f, sigma):
    """Density of y' = sin(f + eps) as a mixture over all arcsine branches."""
    var = sigma ** 2
    s, u = _sine_solutions(y, sigma)
    mu, r, rp = _sine_latent_mean(f)
    diff = u - mu.unsqueeze(-1)
    z = -diff ** 2 / (2 * var)
    logp = -0.5 * math.log(2 * math.pi) - torch.log(sigma) \
        - 0.5 * torch.log(1.0 - s ** 2) + torch.logsumexp(z, dim=-1)
    w = torch.softmax(z, dim=-1)
    d1 = (w * diff).sum(-1) / var
    d2 = -1.0 / var + (w * (diff / var) ** 2).sum(-1) - d1 ** 2
    g = d1 * r
    h = d2 * r ** 2 + d1 * rp
    return logp, g, h


_LIK_FNS = {0: _lik_identity, 1: _lik_square, 2: _lik_log, 3: _lik_sine}


class TransformedLikelihood:
    """Per-observation likelihood of transformed data, mixed across kinds.

    `kinds` holds one code per observation (see KIND_CODES); virtual
    measurements are passed as identity entries, pinning f' directly in
    transformed space.
    """

    def __init__(self, y_obs, kinds):
        self.y = as_tensor(y_obs).reshape(-1)
        kinds = [KIND_CODES.get(k, k) for k in kinds]
        self.kinds = torch.as_tensor(kinds, dtype=torch.long)
        if self.kinds.shape != self.y.shape:
            raise InputError("one kind code per observation required")
        self._masks = {int(c): torch.nonzero(self.kinds == c).reshape(-1)
                       for c in torch.unique(self.kinds).tolist()}

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def _eval(self, f: torch.Tensor, sigma: torch.Tensor):
        sigma = as_tensor(sigma).reshape(())
        logp = torch.zeros_like(f)
        g = torch.zeros_like(f)
        h = torch.zeros_like(f)
        for code, idx in self._masks.items():
            lp, gg, hh = _LIK_FNS[code](self.y[idx], f[..., idx], sigma)
            logp = torch.index_copy(logp, -1, idx, lp)
            g = torch.index_copy(g, -1, idx, gg)
            h = torch.index_copy(h, -1, idx, hh)
        return logp, g, h

    def log_prob(self, f, sigma) -> torch.Tensor:
        """Elementwise log p(y'_i | f'_i); f may carry leading batch dims."""
        f = as_tensor(f)
        return self._eval(f, sigma)[0]

    def grad_hess(self, f, sigma):
        logp, g, h = self._eval(as_tensor(f), sigma)
        return logp.sum(-1), g, h


def transformed_likelihood(y_prime, f_prime, kind, noise_sigma_n):
    """Density of one transformed observation plus its first two
    log-derivatives with respect to f'."""
    lik = TransformedLikelihood([y_prime], [kind])
    logp, g, h = lik._eval(as_tensor([f_prime]), as_tensor(noise_sigma_n))
    return float(torch.exp(logp[0])), float(g[0]), float(h[0])


@dataclass
class LaplaceState:
    """Converged Newton state: posterior mode and curvature."""

    mode_f_hat: torch.Tensor
    W: torch.Tensor
    step_gamma: float
    grad_at_mode: torch.Tensor
    converged: bool
    n_iter: int


def _sqrt_w(w):
    # +tiny keeps the backward pass finite where W is clamped to exactly 0
    return torch.sqrt(w + 1e-300)


def _newton_step(K, m, f, lik, sigma, gamma, psi, alpha):
    logp, g, h = lik.grad_hess(f, sigma)
    w = torch.clamp(-h, min=0.0)
    sqw = _sqrt_w(w)
    b = w * (f - m) + g
    n = K.shape[0]
    bmat = torch.eye(n, dtype=DTYPE) + sqw.unsqueeze(0) * K * sqw.unsqueeze(1)
    chol = cholesky_jitter(symmetrize(bmat), "I + W^1/2 K W^1/2")
    kb = K @ b
    a_full = b - sqw * chol_solve(chol, sqw * kb)
    step = gamma
    for _ in range(12):
        alpha_new = step * a_full + (1.0 - step) * alpha
        f_new = m + K @ alpha_new
        logp_new = lik.grad_hess(f_new, sigma)[0]
        psi_new = logp_new - 0.5 * alpha_new @ (f_new - m)
        if float(psi_new.detach()) >= float(psi.detach()) - 1e-10 * (1.0 + abs(float(psi.detach()))):
            return f_new, alpha_new, psi_new
        step *= 0.5
    return f_new, alpha_new, psi_new


def laplace_mode(
    prior: GaussianDist,
    lik: TransformedLikelihood,
    noise_sigma_n,
    gamma: float = 1.0,
    tol: float = 1e-9,
    max_iter: int = 200,
    warm_alpha: Optional[torch.Tensor] = None,
    grad_tail: int = 2,
) -> LaplaceState:
    """Newton iteration for the posterior mode of the transformed likelihood.

    Iterates maintain f = m + K alpha, so singular (conditioned) priors need
    no inversion and the mode stays on the constraint manifold.  The search
    runs detached; `grad_tail` final iterations are replayed on the autograd
    graph so hyperparameter gradients flow through the fixed point (Newton's
    vanishing local derivative makes a short tail exact to first order).
    warm_alpha seeds the iteration from a previous fit.
    """
    if lik.n != prior.dim:
        raise InputError("likelihood size does not match prior dimension")
    sigma = as_tensor(noise_sigma_n).reshape(())
    K_d, m_d, sigma_d = prior.cov.detach(), prior.mean.detach(), sigma.detach()
    with torch.no_grad():
        alpha = torch.zeros(prior.dim, dtype=DTYPE) if warm_alpha is None \
            else as_tensor(warm_alpha).clone()
        f = m_d + K_d @ alpha
        psi = lik.grad_hess(f, sigma_d)[0] - 0.5 * alpha @ (f - m_d)
        converged = False
        delta = math.inf
        stagnant = 0
        for n_iter in range(1, max_iter + 1):
            f_new, alpha, psi_new = _newton_step(K_d, m_d, f, lik, sigma_d, gamma, psi, alpha)
            delta = float((f_new - f).abs().max())
            f = f_new
            if delta <= tol:
                converged = True
                break
            # ill-conditioned curvature can pin the achievable step above
            # tol; tiny steps without objective progress count as converged
            scale = 1.0 + float(f.abs().max())
            if delta <= 1e-6 * scale and \
                    float(psi_new - psi) <= 1e-9 * (1.0 + abs(float(psi))):
                stagnant += 1
                if stagnant >= 5:
                    converged = True
                    psi = psi_new
                    break
            else:
                stagnant = 0
            psi = psi_new
        if not converged:
            raise NumericError(f"Laplace Newton iteration did not converge within {max_iter} steps "
                               f"(last step {delta:.3e})")
    needs_grad = prior.cov.requires_grad or prior.mean.requires_grad or sigma.requires_grad
    if needs_grad and grad_tail > 0:
        alpha_t = alpha.detach().clone()
        f_t = prior.mean + prior.cov @ alpha_t
        psi_t = lik.grad_hess(f_t, sigma)[0] - 0.5 * alpha_t @ (f_t - prior.mean)
        for _ in range(grad_tail):
            f_t, alpha_t, psi_t = _newton_step(prior.cov, prior.mean, f_t, lik, sigma,
                                               gamma, psi_t, alpha_t)
        f, alpha = f_t, alpha_t
    # alpha satisfies f = m + K alpha exactly by construction and equals
    # the likelihood gradient at the mode up to solver tolerance; using it
    # keeps the predictive mean stable when the curvature W is extreme
    _, _, h = lik.grad_hess(f, sigma)
    w = torch.clamp(-h, min=0.0)
    return LaplaceState(mode_f_hat=f, W=w, step_gamma=gamma, grad_at_mode=alpha,
                        converged=converged, n_iter=n_iter)


def _b_factor(K, w):
    sqw = _sqrt_w(w)
    n = K.shape[0]
    bmat = torch.eye(n, dtype=DTYPE) + sqw.unsqueeze(0) * K * sqw.unsqueeze(1)
    return sqw, cholesky_jitter(symmetrize(bmat), "I + W^1/2 K W^1/2")


def laplace_predict(state: LaplaceState, K, K_star, K_ss, m, m_star) -> GaussianDist:
    """Predictive Gaussian at test coordinates given the converged mode."""
    K, K_star, K_ss = as_tensor(K), as_tensor(K_star), as_tensor(K_ss)
    m, m_star = as_tensor(m), as_tensor(m_star)
    mean = m_star + K_star.T @ state.grad_at_mode
    sqw, chol = _b_factor(K, state.W)
    tmp = sqw.unsqueeze(1) * K_star
    cov = symmetrize(K_ss - tmp.T @ chol_solve(chol, tmp))
    return GaussianDist(mean, cov)


def laplace_lml(state: LaplaceState, prior: GaussianDist, lik: TransformedLikelihood,
                noise_sigma_n) -> torch.Tensor:
    """Laplace evidence: -1/2 (f-m)^T K^-1 (f-m) + log p(y'|f) - 1/2 log|B|,
    with the quadratic form evaluated through the mode gradient so singular
    (conditioned) priors never need inverting."""
    sigma = as_tensor(noise_sigma_n).reshape(())
    f = state.mode_f_hat
    logp = lik.log_prob(f, sigma).sum()
    quad = -0.5 * state.grad_at_mode @ (f - prior.mean)
    _, chol = _b_factor(prior.cov, state.W)
    logdet_b = 2.0 * torch.log(torch.diagonal(chol)).sum()
    return quad + logp - 0.5 * logdet_b


@dataclass
class VariationalState:
    """Gaussian variational distribution via its Cholesky factor."""

    mu_q: torch.Tensor
    chol_L_q: torch.Tensor

    def __post_init__(self):
        self.mu_q = as_tensor(self.mu_q).reshape(-1)
        self.chol_L_q = as_tensor(self.chol_L_q)
        n = self.mu_q.shape[0]
        if self.chol_L_q.shape != (n, n):
            raise InputError("chol_L_q must be square and match mu_q")
        if float(torch.diagonal(self.chol_L_q).detach().min()) <= 0:
            raise InputError("chol_L_q diagonal must be strictly positive")

    @property
    def cov(self) -> torch.Tensor:
        return self.chol_L_q @ self.chol_L_q.T


_HERMITE_CACHE = {}


def _hermgauss(order: int):
    if order not in _HERMITE_CACHE:
        t, w = np.polynomial.hermite.hermgauss(order)
        _HERMITE_CACHE[order] = (torch.as_tensor(t, dtype=DTYPE), torch.as_tensor(w, dtype=DTYPE))
    return _HERMITE_CACHE[order]


def elbo(vstate: VariationalState, prior: GaussianDist, lik: TransformedLikelihood,
         noise_sigma_n, quad_order: int = 32) -> torch.Tensor:
    """Evidence lower bound with Gauss-Hermite data terms and closed-form KL."""
    if vstate.mu_q.shape[0] != prior.dim or lik.n != prior.dim:
        raise InputError("variational state, prior and likelihood sizes must agree")
    sigma = as_tensor(noise_sigma_n).reshape(())
    t_nodes, t_weights = _hermgauss(quad_order)
    sd_q = torch.sqrt(torch.clamp((vstate.chol_L_q ** 2).sum(dim=1), min=1e-300))
    f_nodes = vstate.mu_q.unsqueeze(0) + _SQRT2 * sd_q.unsqueeze(0) * t_nodes.unsqueeze(1)
    logp = lik.log_prob(f_nodes, sigma)
    data_term = (t_weights.unsqueeze(1) * logp).sum() / math.sqrt(math.pi)

    chol_k = cholesky_jitter(prior.cov, "prior covariance")
    a = torch.linalg.solve_triangular(chol_k, vstate.chol_L_q, upper=False)
    trace = (a ** 2).sum()
    resid = vstate.mu_q - prior.mean
    quad = resid @ chol_solve(chol_k, resid)
    logdet_k = 2.0 * torch.log(torch.diagonal(chol_k)).sum()
    logdet_q = 2.0 * torch.log(torch.diagonal(vstate.chol_L_q)).sum()
    n = prior.dim
    kl = 0.5 * (trace + quad - n + logdet_k - logdet_q)
    if not torch.isfinite(kl) or not torch.isfinite(data_term):
        raise NumericError("ELBO evaluation overflowed")
    return data_term - kl


def variational_predict(vstate: VariationalState, K, K_star, K_ss, m, m_star) -> GaussianDist:
    """Predictive Gaussian in terms of the variational parameters."""
    from .linalg import pinv_solve

    K, K_star, K_ss = as_tensor(K), as_tensor(K_star), as_tensor(K_ss)
    m, m_star = as_tensor(m), as_tensor(m_star)
    kinv_ks = pinv_solve(K, K_star)
    mean = m_star + kinv_ks.T @ (vstate.mu_q - m)
    sq = vstate.chol_L_q.T @ kinv_ks
    cov = symmetrize(K_ss + sq.T @ sq - K_star.T @ kinv_ks)
    return GaussianDist(mean, cov)
