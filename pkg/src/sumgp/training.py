"""Adam hyperparameter optimization with schedules and restart guards.

Positive hyperparameters live in log space.  The learning rate is
multiplied by scheduler_factor every scheduler_steps iterations.  A run
restarts from a fresh random initialization when a numeric error occurs;
with extra_guards set (the unstable log/sine setup) it also restarts on an
implausibly small lengthscale or on a loss that has not settled over the
last 40 iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import InputError, NumericError, TrainingError
from .gaussian import Hyperparameters, TaskedDataset
from .inference import VariationalState
from .linalg import DTYPE
from .model import FittedGP, ModelSpec, build_joint_prior, flatten_observations, training_objective


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    iterations: int = 200
    scheduler_steps: int = 100
    scheduler_factor: float = 0.5
    max_restarts: int = 10
    seed: int = 0
    extra_guards: bool = False
    guard_lengthscale_min: float = 0.1
    guard_loss_window: int = 40
    guard_loss_std_max: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.iterations < 1:
            raise InputError("learning_rate and iterations must be positive")
        if self.scheduler_steps > self.iterations:
            raise InputError("scheduler_steps must not exceed iterations")
        if not 0 < self.scheduler_factor <= 1:
            raise InputError("scheduler_factor must lie in (0, 1]")


@dataclass
class TrainDiagnostics:
    """Outcome of one optimization attempt, consumed by restart_guard."""

    error: Optional[str]
    trace: np.ndarray  # columns: iter, lml, lr, lengthscale
    final_lengthscale: float
    extra_guards: bool
    guard_lengthscale_min: float = 0.1
    guard_loss_window: int = 40
    guard_loss_std_max: float = 0.1


@dataclass
class FitResult:
    model: FittedGP
    hyperparameters: Hyperparameters
    trace: np.ndarray
    restarts_used: int
    vstate: Optional[VariationalState] = None


def restart_guard(diag: TrainDiagnostics) -> str:
    """Decide whether a finished attempt is trustworthy."""
    if diag.error is not None:
        return "restart"
    if diag.extra_guards:
        if diag.final_lengthscale < diag.guard_lengthscale_min:
            return "restart"
        window = diag.guard_loss_window
        if diag.trace.shape[0] >= window:
            loss_tail = -diag.trace[-window:, 1]
            if float(np.std(loss_tail)) > diag.guard_loss_std_max:
                return "restart"
    return "accept"


def _init_params(spec: ModelSpec, data: TaskedDataset, rng: np.random.Generator):
    """Random initialization; lengthscale is drawn relative to the input span."""
    x = data.inputs
    span = float(np.ptp(x)) if x.size else 1.0
    scale_l = max(span / 10.0, 1e-3)
    params = {
        "log_sigma_f": rng.uniform(math.log(0.1), math.log(1.0)),
        "log_lengthscale": rng.uniform(math.log(0.3), math.log(3.0)) + math.log(scale_l),
        "log_noise": rng.uniform(math.log(0.1), math.log(1.0)),
        "task_factor": rng.normal(0.0, 0.5, (spec.n_tasks, spec.task_rank)),
        "log_task_diag": np.zeros(spec.n_tasks),
        "task_means": np.array([
            np.nanmean(col) if np.isfinite(col).any() else 0.0
            for col in data.observations.T
        ]),
    }
    return {k: torch.tensor(np.asarray(v, dtype=float), dtype=DTYPE, requires_grad=True)
            for k, v in params.items()}


def _hp_from(params, spec) -> Hyperparameters:
    return Hyperparameters(
        sigma_f=torch.exp(params["log_sigma_f"]),
        lengthscale=torch.exp(params["log_lengthscale"]),
        task_factor=params["task_factor"],
        task_diag=torch.exp(params["log_task_diag"]),
        noise_sigma_n=torch.exp(params["log_noise"]),
        task_means=params["task_means"],
    )


def _init_vparams(spec, data, params):
    """Start q at the range-projection of the data onto the prior support.

    A conditioned prior is singular; initializing mu_q off its range (or
    with sizable variance along null directions) makes the KL term blow up
    and stalls the optimization, so the data residual is projected onto
    range(K) and the initial q is kept narrow.
    """
    with torch.no_grad():
        prior = build_joint_prior(spec, _hp_from(params, spec), data.inputs, None)
    missing, y_obs, _ = flatten_observations(data, spec)
    keep = torch.as_tensor(np.flatnonzero(~missing))
    m0 = prior.mean[keep]
    k0 = prior.cov[keep][:, keep]
    w, v = torch.linalg.eigh(0.5 * (k0 + k0.T))
    support = w > 1e-10 * float(w.max())
    resid = torch.as_tensor(y_obs, dtype=DTYPE) - m0
    mu0 = m0 + v[:, support] @ (v[:, support].T @ resid)
    n = mu0.shape[0]
    # start at the prior's regularization floor: wider q along null
    # directions makes the initial KL explode
    from .model import VI_PRIOR_FLOOR

    sd0 = max(math.sqrt(VI_PRIOR_FLOOR * float(k0.diagonal().mean().clamp(min=1e-12))), 1e-8)
    return {
        "v_mu": mu0.clone().requires_grad_(True),
        "v_log_diag": torch.full((n,), math.log(sd0), dtype=DTYPE, requires_grad=True),
        "v_lower": torch.zeros((n, n), dtype=DTYPE, requires_grad=True),
    }


def _vstate_from(vparams) -> VariationalState:
    n = vparams["v_mu"].shape[0]
    tril = torch.tril(torch.ones(n, n, dtype=DTYPE), diagonal=-1)
    chol = vparams["v_lower"] * tril + torch.diag(torch.exp(vparams["v_log_diag"]))
    return VariationalState(vparams["v_mu"], chol)


def _run_attempt(spec, data, cfg, params, vparams):
    groups = [{"params": list(params.values())}]
    if vparams:
        groups.append({"params": list(vparams.values())})
    opt = torch.optim.Adam(groups, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    # variational fits adapt q alone first; joint steps would let the stiff
    # KL term catapult the kernel parameters before q has settled
    warmup = min(cfg.iterations // 4, 500) if vparams else 0
    warm_cache = {}
    rows = np.zeros((cfg.iterations, 4))
    tensors = [t for g in groups for t in g["params"]]
    for it in range(cfg.iterations):
        lr_t = cfg.learning_rate * cfg.scheduler_factor ** (it // cfg.scheduler_steps)
        opt.param_groups[0]["lr"] = 0.0 if it < warmup else lr_t
        if vparams:
            opt.param_groups[1]["lr"] = lr_t
        opt.zero_grad()
        hp = _hp_from(params, spec)
        vstate = _vstate_from(vparams) if vparams else None
        lml = training_objective(spec, data, hp, vstate=vstate, warm_cache=warm_cache)
        if not torch.isfinite(lml):
            raise NumericError(f"objective became non-finite at iteration {it}")
        loss = -lml
        loss.backward()
        for t in tensors:
            if t.grad is not None and not torch.isfinite(t.grad).all():
                raise NumericError(f"non-finite gradient at iteration {it}")
        rows[it] = (it, float(lml.detach()), lr_t,
                    float(torch.exp(params["log_lengthscale"].detach())))
        opt.step()
    return rows


def train(spec: ModelSpec, data: TaskedDataset, cfg: TrainConfig,
          rng: Optional[np.random.Generator] = None) -> FitResult:
    """Maximize the applicable evidence objective; restart on failure."""
    if data.n_points == 0:
        raise InputError("training data is empty")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    last_error = "no attempt made"
    for attempt in range(cfg.max_restarts + 1):
        params = _init_params(spec, data, rng)
        vparams = _init_vparams(spec, data, params) if spec.inference == "vi" else None
        try:
            rows = _run_attempt(spec, data, cfg, params, vparams)
            diag = TrainDiagnostics(
                error=None, trace=rows,
                final_lengthscale=float(torch.exp(params["log_lengthscale"].detach())),
                extra_guards=cfg.extra_guards,
                guard_lengthscale_min=cfg.guard_lengthscale_min,
                guard_loss_window=cfg.guard_loss_window,
                guard_loss_std_max=cfg.guard_loss_std_max,
            )
        except NumericError as err:
            last_error = str(err)
            diag = TrainDiagnostics(error=last_error, trace=np.zeros((0, 4)),
                                    final_lengthscale=math.nan, extra_guards=cfg.extra_guards)
        if restart_guard(diag) == "accept":
            with torch.no_grad():
                hp = Hyperparameters(
                    sigma_f=torch.exp(params["log_sigma_f"]).detach(),
                    lengthscale=torch.exp(params["log_lengthscale"]).detach(),
                    task_factor=params["task_factor"].detach().clone(),
                    task_diag=torch.exp(params["log_task_diag"]).detach(),
                    noise_sigma_n=torch.exp(params["log_noise"]).detach(),
                    task_means=params["task_means"].detach().clone(),
                )
            vstate = None
            if vparams:
                with torch.no_grad():
                    vstate = _vstate_from({k: v.detach() for k, v in vparams.items()})
            model = FittedGP(spec, data, hp, vstate=vstate)
            return FitResult(model=model, hyperparameters=hp, trace=diag.trace,
                             restarts_used=attempt, vstate=vstate)
        if diag.error is None:
            last_error = "restart guard rejected the attempt"
    raise TrainingError(
        f"training failed after {cfg.max_restarts + 1} attempts; last diagnostics: {last_error}"
    )
