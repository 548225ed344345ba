"""Combined soft Dice + cross-entropy loss over voxel class probabilities.

For A voxels and C classes, with per-voxel probabilities O (rows sum to 1)
and one-hot ground truth G:

    loss = 1 - (2/C) * sum_r  sum_x G O / (sum_x G^2 + sum_x O^2 + eps)
             - (1/A) * sum_x sum_r G * log(O + eps_log)

All inner sums run over the A voxels of each class r. Since G is one-hot the
cross-entropy reduces to -log of the true-class probability, which is how it
is computed (no 0*log 0 terms arise). A class absent from both O and G
contributes 0 to the Dice sum.

The analytic gradient is taken with respect to logits, with O = row-softmax
of the logits, so it composes with the encoder's backward pass.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidProbability, ShapeMismatch
from .vit_core import softmax_rows

EPS_SMOOTH = 1e-6
EPS_LOG = 1e-12
ROW_SUM_TOL = 1e-9


def _check_pair(o: np.ndarray, g: np.ndarray) -> None:
    if o.shape != g.shape or o.ndim != 2:
        raise ShapeMismatch(f"O {o.shape} and G {g.shape} must be equal 2D shapes")
    if np.any((g != 0) & (g != 1)) or np.any(g.sum(axis=1) != 1):
        raise InvalidProbability("G must be one-hot: rows of zeros with exactly one 1")


def _check_probabilities(o: np.ndarray) -> None:
    if np.any(o < 0):
        raise InvalidProbability("probabilities must be non-negative")
    if np.any(np.abs(o.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise InvalidProbability(f"probability rows must sum to 1 within {ROW_SUM_TOL}")


def dice_ce_parts(
    o: np.ndarray,
    g: np.ndarray,
    eps_smooth: float = EPS_SMOOTH,
    eps_log: float = EPS_LOG,
) -> tuple[float, float, float]:
    """(loss, dice_term, ce_term); loss is their sum."""
    o = np.asarray(o, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_pair(o, g)
    _check_probabilities(o)
    if eps_smooth < 0:
        raise ValueError("eps_smooth must be >= 0")

    a, c = o.shape
    num = (g * o).sum(axis=0)
    den = (g * g).sum(axis=0) + (o * o).sum(axis=0) + eps_smooth
    ratios = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    dice_term = 1.0 - (2.0 / c) * ratios.sum()

    true_prob = o[np.arange(a), g.argmax(axis=1)]
    ce_term = float(-np.log(true_prob + eps_log).sum() / a)
    return float(dice_term) + ce_term, float(dice_term), ce_term


def dice_ce_loss(
    o: np.ndarray,
    g: np.ndarray,
    eps_smooth: float = EPS_SMOOTH,
    eps_log: float = EPS_LOG,
) -> float:
    loss, _, _ = dice_ce_parts(o, g, eps_smooth, eps_log)
    return loss


def dice_ce_grad(
    logits: np.ndarray,
    g: np.ndarray,
    eps_smooth: float = EPS_SMOOTH,
    eps_log: float = EPS_LOG,
) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to logits (O = row-softmax)."""
    logits = np.asarray(logits, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_pair(logits, g)
    o = softmax_rows(logits)
    loss, _, _ = dice_ce_parts(o, g, eps_smooth, eps_log)

    a, c = o.shape
    num = (g * o).sum(axis=0)
    den = (g * g).sum(axis=0) + (o * o).sum(axis=0) + eps_smooth
    safe_den = np.where(den > 0.0, den, 1.0)
    # d/dO of the Dice part: quotient rule per class, O appears in num and den
    d_dice = -(2.0 / c) * np.where(den > 0.0, (g * safe_den - num * 2.0 * o) / safe_den**2, 0.0)
    d_ce = -(1.0 / a) * g / (o + eps_log)
    d_o = d_dice + d_ce
    d_logits = o * (d_o - (d_o * o).sum(axis=1, keepdims=True))
    return loss, d_logits


def dsc_metric(pred_labels: np.ndarray, true_labels: np.ndarray, class_value: int) -> float:
    """Hard Dice similarity 2|P∩T| / (|P|+|T|) for one class; 1.0 if both empty."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise ShapeMismatch(f"shapes {pred_labels.shape} and {true_labels.shape} differ")
    p = pred_labels == class_value
    t = true_labels == class_value
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def loss_gradient_check(
    voxels: int,
    classes: int,
    seed: int = 0,
    h: float = 1e-5,
    eps_smooth: float = EPS_SMOOTH,
    eps_log: float = EPS_LOG,
) -> dict:
    """Central-difference check of the analytic logits gradient.

    Returns loss, term breakdown, and the max relative error across all
    logit entries.
    """
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, 1.0, (voxels, classes))
    g = np.zeros((voxels, classes))
    g[np.arange(voxels), rng.integers(0, classes, voxels)] = 1.0

    loss, grad = dice_ce_grad(logits, g, eps_smooth, eps_log)
    _, dice_term, ce_term = dice_ce_parts(softmax_rows(logits), g, eps_smooth, eps_log)

    fd = np.zeros_like(grad)
    for i in range(voxels):
        for r in range(classes):
            bump = np.zeros_like(logits)
            bump[i, r] = h
            up = dice_ce_loss(softmax_rows(logits + bump), g, eps_smooth, eps_log)
            dn = dice_ce_loss(softmax_rows(logits - bump), g, eps_smooth, eps_log)
            fd[i, r] = (up - dn) / (2.0 * h)

    rel = np.abs(grad - fd) / np.maximum(np.abs(grad) + np.abs(fd), 1e-8)
    return {
        "loss": float(loss),
        "dice_term": float(dice_term),
        "ce_term": float(ce_term),
        "max_rel_grad_err": float(rel.max()),
    }
