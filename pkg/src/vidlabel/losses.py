"""Differentiable mask losses, bipartite matching, and EMA parameter updates.

Every loss returns ``(scalar, gradient)`` with the gradient taken w.r.t. the
predicted probabilities, so the training loop can chain it through the
propagator without an autograd framework. Gradients are exact and checked
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .masks import RleMask, rle_decode
from .validation import check_finite_matrix, check_prob_grid, check_same_shape

CLAMP_EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_dice < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_ce == 0 and self.lambda_dice == 0:
            raise ValueError("loss weights must not both be zero")


def _as_target(gt, shape) -> np.ndarray:
    if isinstance(gt, RleMask):
        target = rle_decode(gt)
    else:
        target = np.asarray(gt, dtype=bool)
    if target.shape != shape:
        raise ValueError(f"target shape {target.shape} does not match prediction {shape}")
    return target.astype(float)


def bce_loss(pred_probs, gt) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over pixels, probabilities clamped to
    [eps, 1-eps]; gradient is (p - y) / (p (1 - p)) / HW inside the clamp."""
    p = check_prob_grid(pred_probs)
    y = _as_target(gt, p.shape)
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    n = p.size
    loss = float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean())
    grad = (pc - y) / (pc * (1.0 - pc)) / n
    grad[(p < CLAMP_EPS) | (p > 1.0 - CLAMP_EPS)] = 0.0  # flat inside the clamp
    return loss, grad


def dice_loss(pred_probs, gt) -> tuple[float, np.ndarray]:
    """Soft dice loss with smoothing 1; zero when the prediction reproduces
    the target exactly (up to the smoothing constant)."""
    p = check_prob_grid(pred_probs)
    y = _as_target(gt, p.shape)
    inter = float((p * y).sum())
    denom = float(p.sum() + y.sum()) + DICE_SMOOTH
    numer = 2.0 * inter + DICE_SMOOTH
    loss = 1.0 - numer / denom
    grad = -(2.0 * y * denom - numer) / denom**2
    return loss, grad


def mask_loss(pred_probs, gt, weights: LossWeights) -> tuple[float, np.ndarray]:
    """Weighted cross-entropy + dice combination."""
    ce, ce_grad = bce_loss(pred_probs, gt)
    dc, dc_grad = dice_loss(pred_probs, gt)
    loss = weights.lambda_ce * ce + weights.lambda_dice * dc
    return loss, weights.lambda_ce * ce_grad + weights.lambda_dice * dc_grad


# -- bipartite matching ------------------------------------------------------

def _optimal_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_match(cost) -> tuple[tuple[int, int], ...]:
    """Minimum-cost assignment of min(n, m) row-column pairs.

    Among equal-cost optima the lexicographically smallest assignment is
    returned: rows are taken in order and each receives the smallest column
    that still permits an optimal completion.
    """
    c = check_finite_matrix(cost)
    n, m = c.shape
    if n == 0 or m == 0:
        return ()
    target = _optimal_cost(c)
    scale = max(1.0, float(np.abs(c).max()))
    tol = 1e-9 * scale
    k = min(n, m)

    pairs: list[tuple[int, int]] = []
    fixed = 0.0
    free_cols = list(range(m))
    for i in range(n):
        if len(pairs) == k:
            break
        rows_after = list(range(i + 1, n))
        chosen = None
        best_fallback = None
        for j in free_cols:
            rest = [col for col in free_cols if col != j]
            candidate = fixed + c[i, j] + _optimal_cost(c[np.ix_(rows_after, rest)])
            if candidate <= target + tol:
                chosen = j
                break
            if best_fallback is None or candidate < best_fallback[0] - tol:
                best_fallback = (candidate, j)
        if chosen is None:
            # the row may stay unmatched only while enough rows remain
            must_match = len(rows_after) < k - len(pairs)
            if not must_match:
                continue
            chosen = best_fallback[1]
        pairs.append((i, chosen))
        fixed += c[i, chosen]
        free_cols.remove(chosen)
    return tuple(pairs)


# -- temporal losses ---------------------------------------------------------

FrameMasks = Sequence[Optional[RleMask]]


def _annotated(frame_mask) -> bool:
    if frame_mask is None:
        return False
    if isinstance(frame_mask, RleMask):
        return frame_mask.area > 0
    return bool(np.asarray(frame_mask).any())


def temporal_droploss(
    preds: np.ndarray,
    annots: Sequence[FrameMasks],
    weights: LossWeights,
) -> tuple[float, np.ndarray]:
    """Mask loss summed only over frames with a non-empty annotation.

    ``preds`` is (N, T, H, W) for already-matched instances; ``annots`` lists
    a mask or None per (instance, frame). Frames without an annotation (or
    with an empty one) contribute zero loss and zero gradient.
    """
    preds = np.asarray(preds, dtype=float)
    if preds.ndim != 4:
        raise ValueError(f"preds must be (N, T, H, W), got {preds.shape}")
    if len(annots) != preds.shape[0]:
        raise ValueError(f"{len(annots)} annotation rows for {preds.shape[0]} instances")
    total = 0.0
    grads = np.zeros_like(preds)
    for i, frames in enumerate(annots):
        if len(frames) != preds.shape[1]:
            raise ValueError(
                f"instance {i}: {len(frames)} annotation frames, predictions have {preds.shape[1]}"
            )
        for t, frame_mask in enumerate(frames):
            if not _annotated(frame_mask):
                continue
            loss, grad = mask_loss(preds[i, t], frame_mask, weights)
            total += loss
            grads[i, t] = grad
    return total, grads


def match_predictions(
    pred_probs: np.ndarray,
    annots: Sequence[FrameMasks],
    weights: LossWeights,
) -> tuple[tuple[int, int], ...]:
    """Bipartite match of query slots to annotated instances.

    Cost is the mask loss summed over each instance's annotated frames,
    consistent with the drop-loss semantics.
    """
    preds = np.asarray(pred_probs, dtype=float)
    if not annots:
        return ()
    cost = np.zeros((preds.shape[0], len(annots)))
    for j, frames in enumerate(annots):
        for t, frame_mask in enumerate(frames):
            if not _annotated(frame_mask):
                continue
            for q in range(preds.shape[0]):
                loss, _ = mask_loss(preds[q, t], frame_mask, weights)
                cost[q, j] += loss
    return hungarian_match(cost)


def _binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def distill_loss(
    student_preds: np.ndarray,
    teacher_labels: Sequence[FrameMasks],
    weights: LossWeights,
    threshold: float = 0.5,
) -> tuple[float, np.ndarray]:
    """Mask loss of student slots against dense teacher pseudo-labels.

    Teacher instances are Hungarian-matched to student slots using the mean
    per-frame (1 - IoU) of the thresholded student prediction as cost; the
    loss then sums over all matched frames. No teacher instances means zero
    loss and zero gradient.
    """
    preds = np.asarray(student_preds, dtype=float)
    if preds.ndim != 4:
        raise ValueError(f"student_preds must be (Q, T, H, W), got {preds.shape}")
    grads = np.zeros_like(preds)
    if not teacher_labels:
        return 0.0, grads
    q_slots, n_frames = preds.shape[0], preds.shape[1]
    hard = preds > threshold
    cost = np.zeros((q_slots, len(teacher_labels)))
    targets = []
    for j, frames in enumerate(teacher_labels):
        if len(frames) != n_frames:
            raise ValueError(
                f"teacher instance {j}: {len(frames)} frames, predictions have {n_frames}"
            )
        rows = []
        for t, frame_mask in enumerate(frames):
            if frame_mask is None:
                target = np.zeros(preds.shape[2:], dtype=bool)
            elif isinstance(frame_mask, RleMask):
                target = rle_decode(frame_mask)
            else:
                target = np.asarray(frame_mask, dtype=bool)
            rows.append(target)
            for q in range(q_slots):
                cost[q, j] += (1.0 - _binary_iou(hard[q, t], target)) / n_frames
        targets.append(rows)

    total = 0.0
    for q, j in hungarian_match(cost):
        for t in range(n_frames):
            loss, grad = mask_loss(preds[q, t], targets[j][t], weights)
            total += loss
            grads[q, t] += grad
    return total, grads


def full_loss(
    student_preds: np.ndarray,
    sparse_annots: Sequence[FrameMasks],
    teacher_labels: Sequence[FrameMasks],
    weights: LossWeights,
    threshold: float = 0.5,
) -> tuple[float, np.ndarray]:
    """Temporal drop-loss on the sparse anchors plus the distillation term."""
    preds = np.asarray(student_preds, dtype=float)
    grads = np.zeros_like(preds)
    total = 0.0

    annotated = [
        frames for frames in sparse_annots if any(_annotated(f) for f in frames)
    ]
    if annotated:
        pairs = match_predictions(preds, annotated, weights)
        slot_rows = [q for q, _ in pairs]
        matched = [annotated[j] for _, j in pairs]
        drop, drop_grads = temporal_droploss(preds[slot_rows], matched, weights)
        total += drop
        for row, q in enumerate(slot_rows):
            grads[q] += drop_grads[row]

    distill, distill_grads = distill_loss(preds, teacher_labels, weights, threshold)
    return total + distill, grads + distill_grads


# -- parameter updates and verification ---------------------------------------

def ema_update(teacher: np.ndarray, student: np.ndarray, mu: float) -> np.ndarray:
    """Exponential moving average: mu * teacher + (1 - mu) * student."""
    teacher = np.asarray(teacher, dtype=float)
    student = np.asarray(student, dtype=float)
    if teacher.shape != student.shape:
        raise ValueError(f"parameter shapes differ: {teacher.shape} vs {student.shape}")
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"update rate mu must lie in [0, 1], got {mu}")
    return mu * teacher + (1.0 - mu) * student


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    inputs: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    x = np.asarray(inputs, dtype=float)
    _, analytic = loss_fn(x)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        forward = x.copy()
        forward[idx] += step
        backward = x.copy()
        backward[idx] -= step
        numeric = (loss_fn(forward)[0] - loss_fn(backward)[0]) / (2.0 * step)
        rel = abs(analytic[idx] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, rel)
    return worst
