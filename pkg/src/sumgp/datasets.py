"""Seeded generators for the benchmark experiments plus file ingestion.

All generators evaluate a closed-form trajectory on inclusive-endpoint
grids, add Gaussian noise in original units, and optionally drop task
entries at random (never all tasks of one point).  Each returns the noisy
training set, a noiseless test set, the sum constraint over the
transformed task layout, and the transform wiring.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .constraints import ConstraintSpec
from .errors import IngestError, InputError
from .gaussian import TaskedDataset
from .transforms import TaskTransform, TransformSpec, forward_value


@dataclass(frozen=True)
class OscillatorParams:
    energy_E: float = 0.8
    mass_m: float = 1.0
    omega0: float = 1.0
    damping_b: float = 0.0
    noise_sigma_n: float = 0.1
    drop_prob_fd: float = 0.0
    grid: tuple = (0.0, 10.0, 20)
    test_grid: tuple = (-0.1, 10.0, 100)

    def __post_init__(self):
        if self.energy_E <= 0 or self.mass_m <= 0 or self.omega0 <= 0:
            raise InputError("energy, mass and omega0 must be positive")
        if not 0 <= self.drop_prob_fd < 1:
            raise InputError("drop probability must lie in [0, 1)")
        if self.damping_b and self.damping_b >= 2 * self.mass_m * self.omega0:
            raise InputError("damping must be underdamped (b < 2 m omega0)")

    @property
    def spring_k(self) -> float:
        return self.mass_m * self.omega0 ** 2

    @property
    def amplitude_z0(self) -> float:
        return math.sqrt(2 * self.energy_E / self.spring_k)


@dataclass(frozen=True)
class PendulumParams:
    length_blue: float = 0.091
    length_green: float = 0.070
    mass_ratio: float = 6.5
    frame_rate: float = 500.0
    g: float = 9.81
    scale_pos: float = 20.0
    scale_vel: float = math.sqrt(10.0)
    scale_time: float = 5.0

    def __post_init__(self):
        for name in ("length_blue", "length_green", "mass_ratio", "frame_rate", "g",
                     "scale_pos", "scale_vel", "scale_time"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")

    @property
    def mass_blue(self) -> float:
        return self.mass_ratio

    @property
    def mass_green(self) -> float:
        return 1.0


@dataclass
class SimDataset:
    """One generated experiment instance."""

    train: TaskedDataset
    test: TaskedDataset
    constraint: Optional[ConstraintSpec]
    transform: Optional[TransformSpec]
    meta: dict = field(default_factory=dict)


def _linspace(grid) -> np.ndarray:
    lo, hi, n = grid
    return np.linspace(lo, hi, int(n))


def _apply_noise_and_drops(truth, sigma_n, drop_prob, rng, positive_tasks=()):
    """Noise each entry; redraw entries of `positive_tasks` that land
    nonpositive (log-domain rejection); drop task entries at random but
    regenerate a point's mask while it would lose every task."""
    y = truth + sigma_n * rng.standard_normal(truth.shape)
    for j in positive_tasks:
        bad = y[:, j] <= 0
        while bad.any():
            y[bad, j] = truth[bad, j] + sigma_n * rng.standard_normal(int(bad.sum()))
            bad = y[:, j] <= 0
    regenerated = 0
    if drop_prob > 0:
        for i in range(y.shape[0]):
            mask = rng.random(y.shape[1]) < drop_prob
            while mask.all():
                regenerated += 1
                mask = rng.random(y.shape[1]) < drop_prob
            y[i, mask] = np.nan
    return y, regenerated


OSCILLATOR_TRANSFORM = TransformSpec(
    tasks=(
        TaskTransform(0, "square", aux_source=0),
        TaskTransform(1, "square", aux_source=1),
        TaskTransform(0, "identity", is_aux_copy=True),
        TaskTransform(1, "identity", is_aux_copy=True),
    ),
    virtual_policy="zero",
    relearn_aux_jointly=True,
)


def gen_harmonic_oscillator(p: OscillatorParams, seed) -> SimDataset:
    """Undamped oscillator: constant energy, both outputs squared."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    t_train, t_test = _linspace(p.grid), _linspace(p.test_grid)

    def curves(t):
        z = p.amplitude_z0 * np.sin(p.omega0 * t)
        v = p.amplitude_z0 * p.omega0 * np.cos(p.omega0 * t)
        return np.stack([z, v], axis=1)

    truth_train = curves(t_train)
    y, regenerated = _apply_noise_and_drops(truth_train, p.noise_sigma_n, p.drop_prob_fd, rng)
    constraint = ConstraintSpec.from_terms(
        4, {0: p.spring_k / 2, 1: p.mass_m / 2}, p.energy_E)
    return SimDataset(
        train=TaskedDataset(t_train, y, ground_truth=truth_train, task_names=("z", "v")),
        test=TaskedDataset(t_test, curves(t_test), ground_truth=curves(t_test),
                           task_names=("z", "v")),
        constraint=constraint,
        transform=OSCILLATOR_TRANSFORM,
        meta={"params": p, "mask_regenerated": regenerated},
    )


def damped_oscillator_curves(p: OscillatorParams, t: np.ndarray) -> np.ndarray:
    bm = p.damping_b / (2 * p.mass_m)
    omega = math.sqrt(p.omega0 ** 2 - bm ** 2)
    z0t = p.amplitude_z0 * np.exp(-bm * t)
    z = z0t * np.sin(omega * t)
    v = z0t * omega * np.cos(omega * t) - z0t * bm * np.sin(omega * t)
    return np.stack([z, v], axis=1)


def damped_oscillator_energy(p: OscillatorParams, t) -> np.ndarray:
    zv = damped_oscillator_curves(p, np.atleast_1d(np.asarray(t, dtype=float)))
    return p.spring_k / 2 * zv[:, 0] ** 2 + p.mass_m / 2 * zv[:, 1] ** 2


def gen_damped_oscillator(p: OscillatorParams, seed) -> SimDataset:
    """Damped oscillator: the energy target decays, so the constraint is
    input dependent and takes the general (block-diagonal) route."""
    if p.damping_b <= 0:
        p = OscillatorParams(**{**p.__dict__, "damping_b": 0.1})
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    t_train, t_test = _linspace(p.grid), _linspace(p.test_grid)
    truth_train = damped_oscillator_curves(p, t_train)
    y, regenerated = _apply_noise_and_drops(truth_train, p.noise_sigma_n, p.drop_prob_fd, rng)
    row = np.array([[p.spring_k / 2, p.mass_m / 2, 0.0, 0.0]])
    constraint = ConstraintSpec.varying(
        4,
        lambda x, r=row: r,
        lambda x: damped_oscillator_energy(p, np.atleast_1d(x)[0] if np.ndim(x) else x),
    )
    truth_test = damped_oscillator_curves(p, t_test)
    return SimDataset(
        train=TaskedDataset(t_train, y, ground_truth=truth_train, task_names=("z", "v")),
        test=TaskedDataset(t_test, truth_test, ground_truth=truth_test, task_names=("z", "v")),
        constraint=constraint,
        transform=OSCILLATOR_TRANSFORM,
        meta={"params": p, "mask_regenerated": regenerated},
    )


@dataclass(frozen=True)
class FreeFallParams:
    energy_E: float = 200.0
    mass_m: float = 1.0
    g: float = 9.81
    data_scale_a: float = 20.0
    noise_sigma_n: float = 0.1
    drop_prob_fd: float = 0.0
    grid: tuple = (0.0, 6.0, 20)
    test_grid: tuple = (-0.1, 6.0, 100)

    @property
    def v0(self) -> float:
        return math.sqrt(2 * self.energy_E / self.mass_m)


FREE_FALL_TRANSFORM = TransformSpec(
    tasks=(
        TaskTransform(0, "identity"),
        TaskTransform(1, "square", aux_source=1),
        TaskTransform(1, "identity", is_aux_copy=True),
    ),
    virtual_policy="zero",
    relearn_aux_jointly=True,
)


def gen_free_fall(p: FreeFallParams, seed) -> SimDataset:
    """Free fall with position entering the constraint linearly.

    Outputs are divided by `data_scale_a`; noise and all reported metrics
    are in those rescaled units, and the constraint row rescales to
    [m g, a m / 2] with target E / a.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    t_train, t_test = _linspace(p.grid), _linspace(p.test_grid)
    a = p.data_scale_a

    def curves(t):
        z = p.v0 * t - p.g / 2 * t ** 2
        v = p.v0 - p.g * t
        return np.stack([z, v], axis=1) / a

    truth_train = curves(t_train)
    y, regenerated = _apply_noise_and_drops(truth_train, p.noise_sigma_n, p.drop_prob_fd, rng)
    constraint = ConstraintSpec.from_terms(
        3, {0: p.mass_m * p.g, 1: a * p.mass_m / 2}, p.energy_E / a)
    return SimDataset(
        train=TaskedDataset(t_train, y, ground_truth=truth_train,
                            scale_factors=np.array([1 / a, 1 / a]), task_names=("z", "v")),
        test=TaskedDataset(t_test, curves(t_test), ground_truth=curves(t_test),
                           scale_factors=np.array([1 / a, 1 / a]), task_names=("z", "v")),
        constraint=constraint,
        transform=FREE_FALL_TRANSFORM,
        meta={"params": p, "mask_regenerated": regenerated},
    )


@dataclass(frozen=True)
class LogsinParams:
    noise_sigma_n: float = 0.1
    drop_prob_fd: float = 0.0
    grid: tuple = (-1.2, 2.0, 20)
    test_grid: tuple = (-1.2, 2.0, 100)


LOGSIN_TRANSFORM = TransformSpec(
    tasks=(
        TaskTransform(0, "log"),
        TaskTransform(1, "sine", aux_source=1),
    ),
    virtual_policy="levels",
)


def logsin_curves(x: np.ndarray) -> np.ndarray:
    f1 = 2 * np.exp(-5 * (x - 1) ** 2) + np.exp(-5 * (x + 1) ** 2) + 0.2
    f2 = -x ** 3 / 2
    return np.stack([f1, f2], axis=1)


def logsin_target(x) -> np.ndarray:
    f = logsin_curves(np.atleast_1d(np.asarray(x, dtype=float)))
    return np.log(f[:, 0]) + np.sin(f[:, 1])


def gen_logsin(p: LogsinParams, seed) -> SimDataset:
    """Mixed log/sine constraint with a known input-dependent target.

    Noise on the first output is redrawn per entry until positive so the
    log transform stays within its domain.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    x_train, x_test = _linspace(p.grid), _linspace(p.test_grid)
    truth_train = logsin_curves(x_train)
    y, regenerated = _apply_noise_and_drops(truth_train, p.noise_sigma_n, p.drop_prob_fd,
                                            rng, positive_tasks=(0,))
    constraint = ConstraintSpec.varying(
        2, lambda x: [[1.0, 1.0]],
        lambda x: logsin_target(np.atleast_1d(x)[0] if np.ndim(x) else x))
    truth_test = logsin_curves(x_test)
    return SimDataset(
        train=TaskedDataset(x_train, y, ground_truth=truth_train, task_names=("f1", "f2")),
        test=TaskedDataset(x_test, truth_test, ground_truth=truth_test,
                           task_names=("f1", "f2")),
        constraint=constraint,
        transform=LOGSIN_TRANSFORM,
        meta={"params": p, "mask_regenerated": regenerated},
    )


@dataclass(frozen=True)
class TriangleParams:
    corners: tuple = ((4.0, 8.0, 8.4), (4.0, 4.0, 6.0))
    anchor: tuple = (4.0, 4.0)
    noise_sigma_n: float = 1e-4
    grid: tuple = (0.0, 5.0, 20)
    test_grid: tuple = (0.0, 5.0, 100)


def triangle_pose(p: TriangleParams, alpha: np.ndarray) -> np.ndarray:
    """Corner coordinates for each pose parameter, flattened per point as
    [z1x, z1y, z2x, z2y, z3x, z3y]."""
    z0 = np.asarray(p.corners, dtype=float)
    out = np.zeros((alpha.size, 6))
    for i, a in enumerate(alpha):
        d = 0.5 * math.cos(2 * a)
        z1 = z0 + d
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        z = rot @ z1 + d
        out[i] = z.T.reshape(-1)
    return out


def triangle_edge_lengths_sq(p: TriangleParams) -> tuple:
    z0 = np.asarray(p.corners, dtype=float)
    d = lambda i, j: float(((z0[:, i] - z0[:, j]) ** 2).sum())
    return d(0, 1), d(0, 2), d(1, 2)


def gen_triangle(p: TriangleParams, seed) -> SimDataset:
    """Rigid triangle poses; the constraint lives on Gram-lifted outputs
    and is attached downstream by the pose pipeline."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    a_train, a_test = _linspace(p.grid), _linspace(p.test_grid)
    truth_train = triangle_pose(p, a_train)
    y = truth_train + p.noise_sigma_n * rng.standard_normal(truth_train.shape)
    truth_test = triangle_pose(p, a_test)
    names = ("z1x", "z1y", "z2x", "z2y", "z3x", "z3y")
    return SimDataset(
        train=TaskedDataset(a_train, y, ground_truth=truth_train, task_names=names),
        test=TaskedDataset(a_test, truth_test, ground_truth=truth_test, task_names=names),
        constraint=None,
        transform=None,
        meta={"params": p, "lengths_sq": triangle_edge_lengths_sq(p),
              "anchor": p.anchor},
    )


DP_RAW_TASKS = ("z_bx", "z_by", "z_gx", "z_gy", "v_bx", "v_by", "v_gx", "v_gy")

DP_TRANSFORM = TransformSpec(
    tasks=(
        TaskTransform(1, "identity"),
        TaskTransform(3, "identity"),
        TaskTransform(4, "square", aux_source=4),
        TaskTransform(5, "square", aux_source=5),
        TaskTransform(6, "square", aux_source=6),
        TaskTransform(7, "square", aux_source=7),
    ),
    virtual_policy="zero",
    # x-positions are unconstrained, so they train with the auxiliaries
    step_one_tasks=(0, 2, 4, 5, 6, 7),
)

DEFAULT_DP_COLUMNS = {"anchor": (0, 1), "green": (2, 3), "blue": (4, 5)}


def dp_constraint_row(p: PendulumParams) -> np.ndarray:
    """Energy coefficients over the scaled transformed tasks
    [z_by, z_gy, v_bx^2, v_by^2, v_gx^2, v_gy^2]."""
    mb, mg = p.mass_blue, p.mass_green
    return np.array([
        mb * p.g / p.scale_pos,
        mg * p.g / p.scale_pos,
        mb / 2 / p.scale_vel ** 2,
        mb / 2 / p.scale_vel ** 2,
        mg / 2 / p.scale_vel ** 2,
        mg / 2 / p.scale_vel ** 2,
    ])


def read_pendulum_csv(path_or_buffer, columns=None) -> np.ndarray:
    """Frames of planar marker positions; columns maps marker -> (x, y)."""
    columns = columns or DEFAULT_DP_COLUMNS
    close = False
    if isinstance(path_or_buffer, (str, bytes)):
        fh = open(path_or_buffer, newline="")
        close = True
    else:
        fh = path_or_buffer
    try:
        rows = []
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if rows:
                    raise IngestError(f"malformed row {i} in pendulum file") from None
                continue  # header line
            rows.append(vals)
        if not rows:
            raise IngestError("pendulum file holds no data rows")
        data = np.asarray(rows)
        needed = 1 + max(max(v) for v in columns.values())
        if data.shape[1] < needed:
            raise IngestError(f"pendulum file has {data.shape[1]} columns, needs {needed}")
        return data
    finally:
        if close:
            fh.close()


def load_double_pendulum(path_or_buffer, p: PendulumParams, segment,
                         n_train: int = 15, columns=None) -> SimDataset:
    """Ingest one trajectory segment into the 8-task layout.

    The source file's blue and green markers are exchanged relative to
    this module's naming, positions are taken relative to the anchor, and
    velocities come from central finite differences at the frame spacing
    (one-sided at the segment edges).  Positions, velocities and time get
    the fixed comparability scalings.  Training points are spread evenly
    over the segment; the rest is test data.
    """
    columns = columns or DEFAULT_DP_COLUMNS
    frames = read_pendulum_csv(path_or_buffer, columns)
    start, length = segment
    if start < 0 or length < 3 or start + length > frames.shape[0]:
        raise InputError(f"segment {segment} outside file with {frames.shape[0]} frames")
    window = frames[start:start + length]
    anchor = window[:, list(columns["anchor"])]
    # source green marker = blue pendulum here, and vice versa
    pos_b = window[:, list(columns["green"])] - anchor
    pos_g = window[:, list(columns["blue"])] - anchor

    dt = 1.0 / p.frame_rate
    vel_b = np.gradient(pos_b, dt, axis=0)
    vel_g = np.gradient(pos_g, dt, axis=0)

    t = np.arange(length) * dt * p.scale_time
    # column order: [z_bx, z_by, z_gx, z_gy, v_bx, v_by, v_gx, v_gy]
    raw = np.column_stack([
        pos_b * p.scale_pos, pos_g * p.scale_pos,
        vel_b * p.scale_vel, vel_g * p.scale_vel,
    ])

    train_idx = np.unique(np.round(np.linspace(0, length - 1, n_train)).astype(int))
    test_idx = np.setdiff1d(np.arange(length), train_idx)
    train = TaskedDataset(t[train_idx], raw[train_idx], task_names=DP_RAW_TASKS)
    test = TaskedDataset(t[test_idx], raw[test_idx], ground_truth=raw[test_idx],
                         task_names=DP_RAW_TASKS)

    row = dp_constraint_row(p)
    e_hat = energy_estimate(train, row, DP_TRANSFORM)
    e_hat_full = energy_estimate(TaskedDataset(t, raw, task_names=DP_RAW_TASKS),
                                 row, DP_TRANSFORM)
    constraint = ConstraintSpec.constant(row[None, :], [e_hat])
    return SimDataset(
        train=train, test=test, constraint=constraint, transform=DP_TRANSFORM,
        meta={"params": p, "energy_estimate": e_hat, "energy_estimate_full": e_hat_full,
              "segment": tuple(segment)},
    )


def energy_estimate(data: TaskedDataset, coeff_row, transform: TransformSpec) -> float:
    """Average the constraint expression over points where every
    constraint-relevant task is observed."""
    coeff_row = np.asarray(coeff_row, dtype=float).reshape(-1)
    relevant = [(i, t) for i, t in enumerate(transform.tasks) if coeff_row[i] != 0.0]
    if not relevant:
        raise InputError("constraint row is identically zero")
    sources = [t.source for _, t in relevant]
    complete = np.isfinite(data.observations[:, sources]).all(axis=1)
    if not complete.any():
        raise InputError("no point has all constraint-relevant tasks observed")
    total = np.zeros(int(complete.sum()))
    for i, t in relevant:
        total += coeff_row[i] * forward_value(t.kind, data.observations[complete, t.source])
    return float(total.mean())


def write_dataset_csv(path, data: TaskedDataset, units: str = "SI") -> None:
    names = data.task_names or tuple(f"y{j + 1}" for j in range(data.n_tasks))
    with open(path, "w", newline="") as fh:
        fh.write(f"# tasks={','.join(names)} units={units}\n")
        writer = csv.writer(fh)
        writer.writerow(["x"] + [f"y{j + 1}" for j in range(data.n_tasks)])
        for i in range(data.n_points):
            row = [repr(float(data.inputs[i, 0]))]
            for j in range(data.n_tasks):
                v = data.observations[i, j]
                row.append("" if not np.isfinite(v) else repr(float(v)))
            writer.writerow(row)


def read_dataset_csv(path) -> TaskedDataset:
    with open(path, newline="") as fh:
        names = ()
        first = fh.readline()
        if first.startswith("#"):
            for part in first[1:].split():
                if part.startswith("tasks="):
                    names = tuple(part[6:].split(","))
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        header = next(reader)
        xs, ys = [], []
        for i, row in enumerate(reader):
            if not row:
                continue
            try:
                xs.append(float(row[0]))
                ys.append([float(c) if c.strip() else np.nan for c in row[1:]])
            except ValueError:
                raise IngestError(f"malformed row {i + 2} in {path}") from None
    if not xs:
        raise IngestError(f"{path} holds no data rows")
    return TaskedDataset(np.asarray(xs), np.asarray(ys), task_names=names)


GENERATORS = {
    "ho": lambda sigma, fd, seed, **kw: gen_harmonic_oscillator(
        OscillatorParams(noise_sigma_n=sigma, drop_prob_fd=fd, **kw), seed),
    "dho": lambda sigma, fd, seed, **kw: gen_damped_oscillator(
        OscillatorParams(noise_sigma_n=sigma, drop_prob_fd=fd, damping_b=kw.pop("damping_b", 0.1), **kw), seed),
    "ff": lambda sigma, fd, seed, **kw: gen_free_fall(
        FreeFallParams(noise_sigma_n=sigma, drop_prob_fd=fd, **kw), seed),
    "logsin": lambda sigma, fd, seed, **kw: gen_logsin(
        LogsinParams(noise_sigma_n=sigma, drop_prob_fd=fd, **kw), seed),
    "triangle": lambda sigma, fd, seed, **kw: gen_triangle(
        TriangleParams(noise_sigma_n=sigma, **kw), seed),
}
