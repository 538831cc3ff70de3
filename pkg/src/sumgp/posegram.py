"""Gram-matrix lifting for fixed-length pose constraints.

Planar corner coordinates Z (2 x 4, anchor last) are lifted to the upper
triangle of Q = Z^T Z, in which squared edge lengths are linear:
Q_ll - 2 Q_lm + Q_mm = L_lm^2.  Coordinates are recovered from a predicted
Q by keeping the top-2 spectral directions and aligning rotation (and, if
needed, reflection) against the known anchor point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSpec
from .errors import InputError

GRAM_ORDER = ((0, 0), (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3))
GRAM_NAMES = tuple(f"Q{i + 1}{j + 1}" for i, j in GRAM_ORDER)


@dataclass(frozen=True)
class AnchorPoint:
    position: tuple = (4.0, 4.0)

    @property
    def norm_sq(self) -> float:
        x, y = self.position
        return float(x * x + y * y)


def lift_to_gram(z) -> np.ndarray:
    """Upper-triangle entries of Z^T Z in row-major order."""
    z = np.asarray(z, dtype=float)
    if z.shape != (2, 4):
        raise InputError(f"pose matrix must be 2x4 (anchor last), got {z.shape}")
    q = z.T @ z
    return np.array([q[i, j] for i, j in GRAM_ORDER])


def gram_vector_to_matrix(entries) -> np.ndarray:
    entries = np.asarray(entries, dtype=float).reshape(-1)
    if entries.shape[0] != len(GRAM_ORDER):
        raise InputError(f"need {len(GRAM_ORDER)} Gram entries, got {entries.shape[0]}")
    q = np.zeros((4, 4))
    for val, (i, j) in zip(entries, GRAM_ORDER):
        q[i, j] = q[j, i] = val
    return q


def triangle_constraints(l12_sq, l13_sq, l23_sq, anchor: AnchorPoint) -> ConstraintSpec:
    """Edge-length rows over the 10 Gram tasks plus the anchor-norm row."""
    for val in (l12_sq, l13_sq, l23_sq):
        if val <= 0:
            raise InputError("squared edge lengths must be positive")

    def edge_row(l, m):
        row = np.zeros(len(GRAM_ORDER))
        for k, (i, j) in enumerate(GRAM_ORDER):
            if i == j == l or i == j == m:
                row[k] = 1.0
            elif (i, j) == (min(l, m), max(l, m)):
                row[k] = -2.0
        return row

    anchor_row = np.zeros(len(GRAM_ORDER))
    anchor_row[GRAM_ORDER.index((3, 3))] = 1.0
    coeffs = np.stack([edge_row(0, 1), edge_row(0, 2), edge_row(1, 2), anchor_row])
    targets = np.array([l12_sq, l13_sq, l23_sq, anchor.norm_sq])
    return ConstraintSpec.constant(coeffs, targets)


@dataclass
class RecoveryDiagnostics:
    clamped_eigenvalues: int = 0
    weak_spectral_mass: bool = False


def project_pose_to_lengths(z, lengths_sq, max_sweeps: int = 60, tol: float = 1e-13) -> np.ndarray:
    """Minimally move the three corners so the edges hit the known lengths.

    Used by the constrained pipeline only: it owns the edge lengths as part
    of its constraint, so its recovered poses should satisfy them exactly,
    the same way scalar backtransforms use their branch knowledge.  The
    anchor column stays fixed.  Alternating per-edge moves (each shifts both
    endpoints along their difference) converge geometrically.
    """
    z = np.asarray(z, dtype=float).copy()
    l12, l13, l23 = lengths_sq
    edges = ((0, 1, math.sqrt(l12)), (0, 2, math.sqrt(l13)), (1, 2, math.sqrt(l23)))
    for _ in range(max_sweeps):
        worst = 0.0
        for a, b, target in edges:
            diff = z[:, b] - z[:, a]
            d = float(np.hypot(*diff))
            if d < 1e-12:
                diff = np.array([target, 0.0])
                d = target
            worst = max(worst, abs(d - target))
            shift = 0.5 * (1.0 - target / d) * diff
            z[:, a] += shift
            z[:, b] -= shift
        if worst < tol:
            break
    return z


def recover_coordinates(entries, anchor: AnchorPoint, prev=None,
                        diagnostics: RecoveryDiagnostics | None = None) -> np.ndarray:
    """Factor the predicted Gram matrix and align against the anchor.

    Negative eigenvalues are clamped to zero (counted in diagnostics) and
    the rank is truncated to 2 for planar data.  The rotation comes from
    the angle between recovered and known anchor; reflection ambiguity is
    resolved by testing both orientations against the anchor and, on ties,
    against the previous pose `prev`.
    """
    q = gram_vector_to_matrix(entries)
    w, v = np.linalg.eigh(q)
    if diagnostics is not None:
        diagnostics.clamped_eigenvalues += int((w < 0).sum())
        total = float(np.clip(w, 0, None).sum())
        if total > 0 and float(np.sort(np.clip(w, 0, None))[-2:].sum()) < 0.9 * total:
            diagnostics.weak_spectral_mass = True
    w = np.clip(w, 0.0, None)
    top = np.argsort(w)[-2:]
    z = (v[:, top] * np.sqrt(w[top])).T  # 2 x 4 up to an orthogonal factor

    target = np.asarray(anchor.position, dtype=float)

    def aligned(z2):
        rec = z2[:, 3]
        denom = float(np.hypot(*rec))
        if denom < 1e-12:
            return z2
        cos_t = float(rec @ target) / (denom * np.linalg.norm(target))
        ang = np.arctan2(target[1], target[0]) - np.arctan2(rec[1], rec[0])
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        return rot @ z2

    flip = np.diag([1.0, -1.0])
    candidates = [aligned(z), aligned(flip @ z)]
    errors = [float(np.linalg.norm(c[:, 3] - target)) for c in candidates]
    if abs(errors[0] - errors[1]) > 1e-9 or prev is None:
        return candidates[int(np.argmin(errors))]
    prev = np.asarray(prev, dtype=float)
    drift = [float(np.linalg.norm(c - prev)) for c in candidates]
    return candidates[int(np.argmin(drift))]
