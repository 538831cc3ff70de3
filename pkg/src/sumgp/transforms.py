"""Output transformations that turn nonlinear sum constraints linear.

Each transformed task is one nonlinearity applied to one raw output.
Non-monotone nonlinearities (square, sine) need an auxiliary raw output
whose separately learned posterior mean picks the inverse branch when
mapping predictions back to original units.  Virtual measurements pin the
transformed outputs at the input locations where the inverse switches
branch (zero crossings for squares, odd multiples of pi/2 for sines).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InputError
from .gaussian import TaskedDataset

MONOTONE_KINDS = ("identity", "log")
BRANCHED_KINDS = ("square", "sine")


@dataclass(frozen=True)
class Monotone:
    """Custom monotone nonlinearity with explicit forward and inverse."""

    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TaskTransform:
    """One transformed task: nonlinearity `kind` applied to raw task `source`.

    aux_source names the raw task used for sign / branch recovery; it is
    required for square and sine, and forbidden for monotone kinds.
    is_aux_copy marks untransformed copies that are relearned jointly but
    never backtransformed.
    """

    source: int
    kind: object = "identity"
    aux_source: Optional[int] = None
    is_aux_copy: bool = False

    def __post_init__(self):
        branched = self.kind in BRANCHED_KINDS
        if branched and self.aux_source is None:
            raise InputError(f"{self.kind} task needs an aux_source for branch recovery")
        if not branched and self.aux_source is not None:
            raise InputError(f"{self.kind} task must not carry aux wiring")


@dataclass(frozen=True)
class TransformSpec:
    tasks: tuple
    virtual_policy: str = "off"  # off | zero | levels
    relearn_aux_jointly: bool = False
    step_one_tasks: Optional[tuple] = None  # raw tasks the step-1 GP learns; None = all
    initial_branch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.virtual_policy not in ("off", "zero", "levels"):
            raise InputError(f"unknown virtual measurement policy {self.virtual_policy!r}")

    @property
    def n_transformed(self) -> int:
        return len(self.tasks)

    def primary_task_for(self, raw: int) -> Optional[int]:
        for i, t in enumerate(self.tasks):
            if t.source == raw and not t.is_aux_copy:
                return i
        return None

    @classmethod
    def identity(cls, n_tasks: int) -> "TransformSpec":
        return cls(tasks=tuple(TaskTransform(i) for i in range(n_tasks)))


def forward_value(kind, y: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return y
    if kind == "square":
        return y ** 2
    if kind == "log":
        return np.log(y)
    if kind == "sine":
        return np.sin(y)
    if isinstance(kind, Monotone):
        return kind.forward(y)
    raise InputError(f"unknown nonlinearity {kind!r}")


def apply_transform(data: TaskedDataset, spec: TransformSpec) -> TaskedDataset:
    """Transformed dataset y'_i = h_i(y_source); missing flags propagate."""
    n = data.n_points
    out = np.full((n, spec.n_transformed), np.nan)
    for i, t in enumerate(spec.tasks):
        col = data.observations[:, t.source]
        obs = np.isfinite(col)
        if t.kind == "log":
            bad = obs & (col <= 0)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise InputError(
                    f"log transform of nonpositive value {col[k]:.4g} "
                    f"(task {t.source}, point {k})"
                )
        out[obs, i] = forward_value(t.kind, col[obs])
    return TaskedDataset(
        inputs=data.inputs,
        observations=out,
        ground_truth=None,
        task_names=tuple(f"h{i}" for i in range(spec.n_transformed)),
    )


def find_branch_crossings(grid_x, curve, levels) -> list:
    """Linearly interpolated locations where `curve` crosses each level.

    Returns (x, level, direction) triples sorted by x; direction is +1 for
    ascending crossings.  Grid must be sorted with at least 2 points.
    """
    x = np.asarray(grid_x, dtype=float).reshape(-1)
    y = np.asarray(curve, dtype=float).reshape(-1)
    if x.shape != y.shape or x.size < 2:
        raise InputError("crossing detection needs a sorted grid of at least 2 points")
    if (np.diff(x) <= 0).any():
        raise InputError("crossing grid must be strictly increasing")
    hits = []
    for level in levels:
        d = y - level
        sign_change = d[:-1] * d[1:] < 0
        for k in np.flatnonzero(sign_change):
            frac = d[k] / (d[k] - d[k + 1])
            hits.append((x[k] + frac * (x[k + 1] - x[k]), float(level), 1 if d[k + 1] > d[k] else -1))
        for k in np.flatnonzero(d == 0.0):
            if 0 < k < x.size - 1 and np.sign(d[k - 1]) != np.sign(d[k + 1]):
                hits.append((x[k], float(level), 1 if d[k + 1] > d[k - 1] else -1))
    hits.sort(key=lambda h: h[0])
    return hits


def branch_levels(kind, curve) -> np.ndarray:
    """Inverse-branch boundary levels for a nonlinearity over a curve's range."""
    if kind == "square":
        return np.array([0.0])
    if kind == "sine":
        y = np.asarray(curve, dtype=float)
        lo = math.floor((y.min() - math.pi / 2) / math.pi)
        hi = math.ceil((y.max() + math.pi / 2) / math.pi)
        return np.array([(2 * k + 1) * math.pi / 2 for k in range(lo - 1, hi + 1)])
    return np.zeros(0)


@dataclass(frozen=True)
class VirtualObservation:
    x: float
    task: int  # transformed task index
    value: float


def make_virtual_measurements(crossings: dict, spec: TransformSpec) -> list:
    """Observation records at branch switches of each task's aux curve.

    `crossings` maps a raw (aux) task index to its crossing triples.  The
    recorded value is the nonlinearity applied to the crossed level, so a
    square task pinned at a zero crossing gets y' = 0.
    """
    if spec.virtual_policy == "off":
        return []
    records = []
    for i, t in enumerate(spec.tasks):
        if t.aux_source is None or t.is_aux_copy:
            continue
        for x, level, _ in crossings.get(t.aux_source, []):
            records.append(VirtualObservation(float(x), i, float(forward_value(t.kind, np.asarray(level)))))
    records.sort(key=lambda r: (r.x, r.task))
    return records


def extend_with_virtual(data: TaskedDataset, records: Sequence[VirtualObservation]) -> TaskedDataset:
    """Append virtual records as extra single-task observation rows."""
    if not records:
        return data
    n_new = len(records)
    xs = np.concatenate([data.inputs, np.array([[r.x] for r in records])])
    ys = np.vstack([data.observations, np.full((n_new, data.n_tasks), np.nan)])
    virt = np.vstack([data.virtual_mask, np.zeros((n_new, data.n_tasks), dtype=bool)])
    for j, r in enumerate(records):
        ys[data.n_points + j, r.task] = r.value
        virt[data.n_points + j, r.task] = True
    return TaskedDataset(inputs=xs, observations=ys, virtual_mask=virt,
                         task_names=data.task_names)


@dataclass(frozen=True)
class BacktransformContext:
    """Auxiliary posterior means on a dense grid plus branch bookkeeping."""

    dense_x: np.ndarray
    aux_means: dict  # raw task index -> curve over dense_x
    initial_branch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dense_x", np.asarray(self.dense_x, dtype=float).reshape(-1))

    def aux_at(self, raw: int, x: np.ndarray) -> np.ndarray:
        if raw not in self.aux_means:
            raise InputError(f"no auxiliary curve for raw task {raw}")
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.min() < self.dense_x.min() - 1e-9 or x.max() > self.dense_x.max() + 1e-9:
            raise InputError("auxiliary grid does not cover all prediction points")
        return np.interp(x, self.dense_x, np.asarray(self.aux_means[raw], dtype=float))

    def branch_at(self, raw: int, x: np.ndarray) -> np.ndarray:
        """Arcsine branch index per point, integrating boundary crossings
        left to right from the leftmost grid point."""
        curve = np.asarray(self.aux_means[raw], dtype=float)
        hits = find_branch_crossings(self.dense_x, curve, branch_levels("sine", curve))
        x = np.asarray(x, dtype=float).reshape(-1)
        out = np.full(x.shape, self.initial_branch, dtype=int)
        for xc, _, direction in hits:
            out[x >= xc] += direction
        return out


@dataclass
class BacktransformResult:
    values: np.ndarray  # (n_points, n_raw_tasks), NaN where no primary task exists
    square_clamps: int = 0
    arcsin_clamps: int = 0


def backtransform(f_prime, pred_x, ctx: BacktransformContext, spec: TransformSpec) -> BacktransformResult:
    """Map transformed-space predictions back to original units.

    f_prime has one column per transformed task; the output has one column
    per raw task (NaN when the raw task has no primary transformed task).
    Negative square predictions are clamped to zero and counted; arcsine
    inputs outside [-1, 1] are clamped to the nearest endpoint.
    """
    f_prime = np.atleast_2d(np.asarray(f_prime, dtype=float))
    pred_x = np.asarray(pred_x, dtype=float).reshape(-1)
    if f_prime.shape != (pred_x.size, spec.n_transformed):
        raise InputError(f"predictions shape {f_prime.shape} does not match "
                         f"({pred_x.size}, {spec.n_transformed})")
    n_raw = max(t.source for t in spec.tasks) + 1
    out = np.full((pred_x.size, n_raw), np.nan)
    res = BacktransformResult(out)
    for raw in range(n_raw):
        i = spec.primary_task_for(raw)
        if i is None:
            continue
        t = spec.tasks[i]
        col = f_prime[:, i]
        if t.kind == "identity":
            out[:, raw] = col
        elif t.kind == "log":
            out[:, raw] = np.exp(col)
        elif isinstance(t.kind, Monotone):
            out[:, raw] = t.kind.inverse(col)
        elif t.kind == "square":
            res.square_clamps += int((col < 0).sum())
            sign = np.sign(ctx.aux_at(t.aux_source, pred_x))
            sign[sign == 0] = 1.0
            out[:, raw] = sign * np.sqrt(np.clip(col, 0.0, None))
        elif t.kind == "sine":
            res.arcsin_clamps += int((np.abs(col) > 1.0).sum())
            branch = ctx.branch_at(t.aux_source, pred_x)
            asin = np.arcsin(np.clip(col, -1.0, 1.0))
            out[:, raw] = branch * math.pi + np.where(branch % 2 == 0, asin, -asin)
        else:
            raise InputError(f"unknown nonlinearity {t.kind!r}")
    return res


def backtransform_intervals(lower, upper, pred_x, ctx, spec):
    """Backtransform credible bounds with the same aux means as the mean
    curve, re-sorting pointwise since sign flips can swap them."""
    lo = backtransform(lower, pred_x, ctx, spec).values
    hi = backtransform(upper, pred_x, ctx, spec).values
    return np.fmin(lo, hi), np.fmax(lo, hi)
