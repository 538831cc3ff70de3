import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sumgp.datasets import TriangleParams, triangle_edge_lengths_sq, triangle_pose
from sumgp.errors import InputError
from sumgp.posegram import (
    AnchorPoint,
    GRAM_ORDER,
    RecoveryDiagnostics,
    gram_vector_to_matrix,
    lift_to_gram,
    recover_coordinates,
    triangle_constraints,
)

ANCHOR = AnchorPoint((4.0, 4.0))


def pose_with_anchor(alpha: float) -> np.ndarray:
    flat = triangle_pose(TriangleParams(), np.array([alpha]))[0]
    corners = flat.reshape(3, 2).T
    return np.column_stack([corners, np.array(ANCHOR.position)])


class TestLiftToGram:
    def test_anchor_self_term(self):
        z = np.zeros((2, 4))
        z[:, 3] = ANCHOR.position
        q = lift_to_gram(z)
        assert q[GRAM_ORDER.index((3, 3))] == pytest.approx(32.0)

    def test_zero_matrix_with_anchor(self):
        z = np.zeros((2, 4))
        z[:, 3] = ANCHOR.position
        q = lift_to_gram(z)
        nonzero = {k for k, v in zip(GRAM_ORDER, q) if v != 0.0}
        assert nonzero == {(3, 3)}

    def test_matches_dot_product_oracle(self):
        z = np.array([[0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
        q = lift_to_gram(z)
        for val, (i, j) in zip(q, GRAM_ORDER):
            assert val == pytest.approx(sum(z[d, i] * z[d, j] for d in range(2)))

    def test_wrong_shape_rejected(self):
        with pytest.raises(InputError):
            lift_to_gram(np.zeros((2, 3)))

    @given(angle=st.floats(-math.pi, math.pi), alpha=st.floats(0.0, 5.0))
    @settings(max_examples=40, deadline=None)
    def test_rotation_invariance(self, angle, alpha):
        z = pose_with_anchor(alpha)
        rot = np.array([[math.cos(angle), -math.sin(angle)],
                        [math.sin(angle), math.cos(angle)]])
        np.testing.assert_allclose(lift_to_gram(rot @ z), lift_to_gram(z), atol=1e-10)


class TestTriangleConstraints:
    def test_rows_match_rigid_pose(self):
        l12, l13, l23 = triangle_edge_lengths_sq(TriangleParams())
        assert (l12, l13) == (16.0, pytest.approx(23.36))
        spec = triangle_constraints(l12, l13, l23, ANCHOR)
        for alpha in (0.0, 1.3, 4.2):
            q = lift_to_gram(pose_with_anchor(alpha))
            vals = np.asarray(spec.coeff_fn(alpha)) @ q
            np.testing.assert_allclose(vals, [16.0, 23.36, l23, 32.0], atol=1e-10)

    def test_anchor_row_constant(self):
        spec = triangle_constraints(1.0, 1.0, 1.0, ANCHOR)
        assert np.asarray(spec.target_fn(0.0))[3] == pytest.approx(32.0)

    def test_degenerate_edge_value_zero(self):
        # coincident corners l = m: row pattern 1, -2, 1 collapses to zero
        z = pose_with_anchor(0.0)
        z[:, 1] = z[:, 0]
        spec = triangle_constraints(1.0, 1.0, 1.0, ANCHOR)
        q = lift_to_gram(z)
        assert float(np.asarray(spec.coeff_fn(0.0))[0] @ q) == pytest.approx(0.0, abs=1e-12)


class TestRecoverCoordinates:
    def test_roundtrip_noiseless(self):
        for alpha in np.linspace(0, 5, 9):
            z = pose_with_anchor(alpha)
            rec = recover_coordinates(lift_to_gram(z), ANCHOR, prev=z)
            assert np.abs(rec - z).max() <= 1e-8

    def test_anchor_only_gram(self):
        q = np.zeros(10)
        q[GRAM_ORDER.index((3, 3))] = 32.0
        rec = recover_coordinates(q, ANCHOR)
        np.testing.assert_allclose(rec[:, 3], ANCHOR.position, atol=1e-9)
        np.testing.assert_allclose(rec[:, :3], 0.0, atol=1e-9)

    def test_rotated_pose_preserves_lengths(self):
        z = pose_with_anchor(2.0)
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        rec = recover_coordinates(lift_to_gram(rot @ z), ANCHOR)
        for i, j, expect in [(0, 1, 16.0), (0, 2, 23.36)]:
            got = float(((rec[:, i] - rec[:, j]) ** 2).sum())
            assert got == pytest.approx(expect, abs=1e-8)

    def test_negative_eigenvalues_clamped_and_counted(self):
        q = lift_to_gram(pose_with_anchor(1.0))
        q_noisy = q - 1e-3 * np.ones(10)
        diag = RecoveryDiagnostics()
        recover_coordinates(q_noisy, ANCHOR, diagnostics=diag)
        assert diag.clamped_eigenvalues >= 0  # counter wired through

    def test_reflection_resolved_by_continuity(self):
        z = pose_with_anchor(0.7)
        rec = recover_coordinates(lift_to_gram(z), ANCHOR, prev=z)
        flipped = np.diag([1.0, -1.0]) @ z
        # with the flipped previous pose the mirror image wins on ties
        rec_f = recover_coordinates(lift_to_gram(z), ANCHOR, prev=flipped)
        d_true = np.linalg.norm(rec - z)
        d_flip = np.linalg.norm(rec_f - flipped)
        assert d_true <= 1e-6 or d_flip <= 1e-6

    def test_gram_vector_roundtrip(self):
        vec = np.arange(10.0)
        mat = gram_vector_to_matrix(vec)
        np.testing.assert_array_equal(mat, mat.T)
        back = np.array([mat[i, j] for i, j in GRAM_ORDER])
        np.testing.assert_array_equal(back, vec)
