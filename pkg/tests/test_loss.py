"""Loss-value oracles, symmetry properties, and gradient checks."""

import math

import numpy as np
import pytest

from patchopt.errors import InvalidProbability, ShapeMismatch
from patchopt.loss import (
    dice_ce_grad,
    dice_ce_loss,
    dice_ce_parts,
    dsc_metric,
    loss_gradient_check,
)
from patchopt.vit_core import softmax_rows


def one_hot(rows, classes, rng):
    g = np.zeros((rows, classes))
    g[np.arange(rows), rng.integers(0, classes, rows)] = 1.0
    return g


class TestLossValues:
    def test_perfect_prediction_zero(self):
        g = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        assert dice_ce_loss(g, g, eps_smooth=0.0, eps_log=0.0) == 0.0

    def test_uniform_two_by_two_hand_value(self):
        # per class: num 0.5, den 1 + 0.5 -> ratio 1/3; dice 1 - (2/2)(2/3) = 1/3
        # cross entropy: -log 0.5 = ln 2
        g = np.array([[1.0, 0.0], [0.0, 1.0]])
        o = np.full((2, 2), 0.5)
        loss, dice_term, ce_term = dice_ce_parts(o, g, eps_smooth=0.0, eps_log=0.0)
        assert dice_term == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert ce_term == pytest.approx(math.log(2.0), abs=1e-12)
        assert loss == pytest.approx(1.0 / 3.0 + math.log(2.0), abs=1e-9)

    def test_absent_class_contributes_zero(self):
        # class 2 never occurs in O or G: its ratio is 0/eps = 0
        g = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        o = np.array([[0.6, 0.4, 0.0], [0.3, 0.7, 0.0]])
        loss = dice_ce_loss(o, g, eps_smooth=1e-6)
        num = [0.6, 0.7, 0.0]
        den = [1 + 0.36 + 0.09 + 1e-6, 1 + 0.16 + 0.49 + 1e-6, 1e-6]
        dice = 1 - (2 / 3) * sum(n / d for n, d in zip(num, den))
        ce = -(math.log(0.6 + 1e-12) + math.log(0.7 + 1e-12)) / 2
        assert loss == pytest.approx(dice + ce, rel=1e-12)

    def test_loss_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, c = int(rng.integers(1, 20)), int(rng.integers(2, 5))
            o = softmax_rows(rng.normal(0, 2, (a, c)))
            g = one_hot(a, c, rng)
            assert dice_ce_loss(o, g) >= 0.0

    def test_class_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        o = softmax_rows(rng.normal(size=(6, 4)))
        g = one_hot(6, 4, rng)
        perm = rng.permutation(4)
        assert dice_ce_loss(o[:, perm], g[:, perm]) == pytest.approx(
            dice_ce_loss(o, g), rel=1e-14
        )

    def test_voxel_permutation_invariance(self):
        rng = np.random.default_rng(2)
        o = softmax_rows(rng.normal(size=(7, 3)))
        g = one_hot(7, 3, rng)
        perm = rng.permutation(7)
        assert dice_ce_loss(o[perm], g[perm]) == pytest.approx(dice_ce_loss(o, g), rel=1e-14)


class TestLossValidation:
    def test_rows_must_sum_to_one(self):
        g = np.array([[1.0, 0.0]])
        with pytest.raises(InvalidProbability):
            dice_ce_loss(np.array([[0.6, 0.6]]), g)

    def test_negative_probability(self):
        g = np.array([[1.0, 0.0]])
        with pytest.raises(InvalidProbability):
            dice_ce_loss(np.array([[1.2, -0.2]]), g)

    def test_g_must_be_one_hot(self):
        o = np.array([[0.5, 0.5]])
        with pytest.raises(InvalidProbability):
            dice_ce_loss(o, np.array([[0.5, 0.5]]))
        with pytest.raises(InvalidProbability):
            dice_ce_loss(o, np.array([[1.0, 1.0]]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice_ce_loss(np.zeros((2, 3)), np.zeros((2, 2)))


class TestLossGradient:
    def test_matches_finite_differences(self):
        res = loss_gradient_check(voxels=16, classes=3, seed=0)
        assert res["max_rel_grad_err"] < 1e-5

    def test_uniform_logits_antisymmetric_two_class(self):
        logits = np.zeros((4, 2))
        g = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        _, grad = dice_ce_grad(logits, g)
        assert np.allclose(grad[:, 0], -grad[:, 1], atol=1e-12)

    def test_ce_gradient_vanishes_with_confidence(self):
        g = np.array([[1.0, 0.0], [0.0, 1.0]])
        norms = []
        for margin in (2.0, 6.0, 12.0):
            logits = np.where(g == 1.0, margin, -margin)
            _, grad = dice_ce_grad(logits, g, eps_smooth=0.0)
            norms.append(np.abs(grad).max())
        assert norms[0] > norms[1] > norms[2]
        assert norms[2] < 1e-4

    def test_gradient_consistent_with_loss_value(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 3))
        g = one_hot(5, 3, rng)
        loss, _ = dice_ce_grad(logits, g)
        assert loss == pytest.approx(dice_ce_loss(softmax_rows(logits), g), rel=1e-14)


class TestDscMetric:
    def test_identical_masks(self):
        m = np.array([[0, 2], [2, 0]])
        assert dsc_metric(m, m, 2) == 1.0

    def test_disjoint_masks(self):
        assert dsc_metric(np.array([2, 0, 0]), np.array([0, 0, 2]), 2) == 0.0

    def test_hand_counted_overlap(self):
        pred = np.zeros(12, int)
        true = np.zeros(12, int)
        pred[:6] = 2  # |P| = 6
        true[3:7] = 2  # |T| = 4, overlap {3,4,5} = 3
        assert dsc_metric(pred, true, 2) == pytest.approx(0.6)

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3), int)
        assert dsc_metric(z, z, 2) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dsc_metric(np.zeros(3), np.zeros(4), 1)
