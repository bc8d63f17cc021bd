import itertools
import math

import numpy as np
import pytest

from vidlabel.losses import (
    LossWeights,
    bce_loss,
    dice_loss,
    distill_loss,
    ema_update,
    full_loss,
    grad_check,
    hungarian_match,
    mask_loss,
    match_predictions,
    temporal_droploss,
)
from vidlabel.masks import rle_encode


def brute_force_assignment_cost(cost):
    """Minimum total cost over all injective row->column maps, by enumeration."""
    n, m = cost.shape
    k = min(n, m)
    best = math.inf
    rows_options = itertools.combinations(range(n), k) if n > m else [tuple(range(n))]
    for rows in rows_options:
        for cols in itertools.permutations(range(m), k):
            total = sum(cost[r, c] for r, c in zip(rows, cols))
            best = min(best, total)
    return best


def random_case(rng, shape=(8, 8)):
    probs = rng.uniform(0.02, 0.98, size=shape)
    gt = rng.random(shape) < 0.5
    return probs, gt


class TestBce:
    def test_perfect_prediction_near_zero(self):
        gt = np.zeros((4, 4), bool)
        gt[1:3, 1:3] = True
        probs = np.where(gt, 1.0, 0.0)
        loss, _ = bce_loss(probs, gt)
        assert loss <= 1e-6

    def test_coin_flip_is_ln2(self):
        probs = np.full((4, 4), 0.5)
        loss, _ = bce_loss(probs, np.zeros((4, 4), bool))
        assert loss == pytest.approx(math.log(2))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            probs, gt = random_case(rng)
            err = grad_check(lambda p: bce_loss(p, gt), probs)
            assert err <= 1e-4

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss(np.full((2, 2), 0.5), np.zeros((3, 3), bool))


class TestDice:
    def test_perfect_full_mask(self):
        gt = np.ones((4, 4), bool)
        loss, _ = dice_loss(gt.astype(float), gt)
        assert loss == pytest.approx(1 - (2 * 16 + 1) / (32 + 1))
        assert loss <= 1 / (2 * 16 + 1)

    def test_all_zero_prediction(self):
        gt = np.zeros((4, 4), bool)
        gt[0, :3] = True
        loss, _ = dice_loss(np.zeros((4, 4)), gt)
        assert loss == pytest.approx(1 - 1 / (3 + 1))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            probs, gt = random_case(rng)
            err = grad_check(lambda p: dice_loss(p, gt), probs)
            assert err <= 1e-4


class TestMaskLoss:
    def test_weight_selection(self):
        rng = np.random.default_rng(2)
        probs, gt = random_case(rng)
        assert mask_loss(probs, gt, LossWeights(1.0, 0.0))[0] == bce_loss(probs, gt)[0]
        assert mask_loss(probs, gt, LossWeights(0.0, 1.0))[0] == dice_loss(probs, gt)[0]

    def test_default_weights_recompose(self):
        rng = np.random.default_rng(3)
        probs, gt = random_case(rng)
        total, _ = mask_loss(probs, gt, LossWeights(5.0, 5.0))
        assert total == pytest.approx(5 * (bce_loss(probs, gt)[0] + dice_loss(probs, gt)[0]))

    def test_zero_iff_reproduced(self):
        gt = np.zeros((4, 4), bool)
        gt[2, 2] = True
        exact = gt.astype(float)
        loss, _ = mask_loss(exact, gt, LossWeights())
        assert loss < 0.2  # within clamping/smoothing constants
        off = exact.copy()
        off[0, 0] = 0.9
        assert mask_loss(off, gt, LossWeights())[0] > loss

    def test_rejects_zero_weights(self):
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.0)


class TestHungarian:
    def test_identity_on_diagonal_costs(self):
        cost = np.ones((3, 3)) - np.eye(3)
        assert hungarian_match(cost) == ((0, 0), (1, 1), (2, 2))

    def test_single_cell(self):
        assert hungarian_match([[3.0]]) == ((0, 0),)

    def test_matches_brute_force_on_random_integer_matrices(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(1, 8))
            cost = rng.integers(0, 50, size=(n, m)).astype(float)
            pairs = hungarian_match(cost)
            assert len(pairs) == min(n, m)
            total = sum(cost[r, c] for r, c in pairs)
            assert total == brute_force_assignment_cost(cost)

    def test_lexicographic_tie_break(self):
        # every assignment costs the same: pick the identity
        assert hungarian_match(np.zeros((3, 3))) == ((0, 0), (1, 1), (2, 2))
        assert hungarian_match(np.zeros((2, 4))) == ((0, 0), (1, 1))

    def test_row_column_shift_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            cost = rng.random((4, 4))
            pairs = hungarian_match(cost)
            shifted = cost.copy()
            shifted[2, :] += 3.7
            shifted[:, 1] -= 1.2
            assert hungarian_match(shifted) == pairs

    def test_rectangular_assigns_min_pairs(self):
        cost = np.array([[0.0, 5.0], [0.0, 5.0], [5.0, 0.0]])
        pairs = hungarian_match(cost)
        assert len(pairs) == 2
        assert sum(cost[r, c] for r, c in pairs) == 0.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            hungarian_match([[np.inf, 1.0]])


def frame_masks(bitmaps):
    return [None if b is None else rle_encode(b) for b in bitmaps]


class TestTemporalDroploss:
    def setup_method(self):
        rng = np.random.default_rng(6)
        self.preds = rng.uniform(0.05, 0.95, size=(2, 3, 6, 6))
        self.gts = rng.random((2, 3, 6, 6)) < 0.5
        self.weights = LossWeights()

    def test_dense_equals_per_frame_sum(self):
        annots = [frame_masks(self.gts[i]) for i in range(2)]
        total, _ = temporal_droploss(self.preds, annots, self.weights)
        expect = sum(
            mask_loss(self.preds[i, t], self.gts[i, t], self.weights)[0]
            for i in range(2)
            for t in range(3)
        )
        assert total == pytest.approx(expect, rel=1e-12)

    def test_no_annotations_zero(self):
        annots = [[None] * 3, [None] * 3]
        total, grads = temporal_droploss(self.preds, annots, self.weights)
        assert total == 0.0
        assert not grads.any()

    def test_single_annotated_frame(self):
        annots = [[None, frame_masks([self.gts[0, 1]])[0], None]]
        total, grads = temporal_droploss(self.preds[:1], annots, self.weights)
        loss, grad = mask_loss(self.preds[0, 1], self.gts[0, 1], self.weights)
        assert total == pytest.approx(loss)
        np.testing.assert_allclose(grads[0, 1], grad)
        assert not grads[0, 0].any() and not grads[0, 2].any()

    def test_empty_mask_treated_as_absent(self):
        empty = rle_encode(np.zeros((6, 6), bool))
        annots = [[empty, None, None]]
        total, grads = temporal_droploss(self.preds[:1], annots, self.weights)
        assert total == 0.0
        assert not grads.any()

    def test_dropping_a_frame_never_increases_loss(self):
        annots = [frame_masks(self.gts[i]) for i in range(2)]
        full_total, _ = temporal_droploss(self.preds, annots, self.weights)
        annots[1][2] = None
        dropped_total, _ = temporal_droploss(self.preds, annots, self.weights)
        assert dropped_total <= full_total

    def test_misaligned_frames_rejected(self):
        with pytest.raises(ValueError):
            temporal_droploss(self.preds, [[None] * 2, [None] * 3], self.weights)

    def test_gradient_matches_finite_differences(self):
        annots = [frame_masks([self.gts[0, 0], None, self.gts[0, 2]])]

        def fn(flat):
            preds = flat.reshape(1, 3, 6, 6)
            loss, grads = temporal_droploss(preds, annots, self.weights)
            return loss, grads.ravel()

        assert grad_check(fn, self.preds[:1].ravel()) <= 1e-4


class TestDistillLoss:
    def test_student_equals_teacher_near_zero(self):
        rng = np.random.default_rng(7)
        teacher = rng.random((1, 2, 6, 6)) < 0.4
        student = np.clip(teacher.astype(float), 1e-4, 1 - 1e-4)
        loss, _ = distill_loss(student, [list(teacher[0])], LossWeights())
        assert loss < 0.5  # bounded by clamping/smoothing constants

    def test_no_teacher_instances(self):
        student = np.full((2, 2, 4, 4), 0.7)
        loss, grads = distill_loss(student, [], LossWeights())
        assert loss == 0.0
        assert not grads.any()

    def test_reduces_to_droploss_on_dense_labels(self):
        rng = np.random.default_rng(8)
        student = rng.uniform(0.05, 0.95, size=(2, 2, 5, 5))
        teacher = [
            [rng.random((5, 5)) < 0.5 for _ in range(2)],
            [rng.random((5, 5)) < 0.5 for _ in range(2)],
        ]
        for rows in teacher:  # keep every frame non-empty so nothing is dropped
            for grid in rows:
                grid[0, 0] = True
        loss, grads = distill_loss(student, teacher, LossWeights())
        hard = student > 0.5
        cost = np.zeros((2, 2))
        for q in range(2):
            for j in range(2):
                for t in range(2):
                    inter = (hard[q, t] & teacher[j][t]).sum()
                    union = (hard[q, t] | teacher[j][t]).sum()
                    iou = 1.0 if union == 0 else inter / union
                    cost[q, j] += (1 - iou) / 2
        pairs = hungarian_match(cost)
        ordered = [teacher[j] for _, j in pairs]
        expect, expect_grads = temporal_droploss(
            student[[q for q, _ in pairs]], ordered, LossWeights()
        )
        assert loss == pytest.approx(expect)
        np.testing.assert_allclose(grads[[q for q, _ in pairs]], expect_grads)


class TestFullLoss:
    def make_inputs(self, rng):
        student = rng.uniform(0.05, 0.95, size=(3, 2, 5, 5))
        sparse = [[rle_encode(rng.random((5, 5)) < 0.5), None]]
        teacher = [[rng.random((5, 5)) < 0.5 for _ in range(2)]]
        return student, sparse, teacher

    def test_teacher_empty_equals_droploss_path(self):
        rng = np.random.default_rng(9)
        student, sparse, _ = self.make_inputs(rng)
        total, _ = full_loss(student, sparse, [], LossWeights())
        pairs = match_predictions(student, sparse, LossWeights())
        expect, _ = temporal_droploss(
            student[[q for q, _ in pairs]], [sparse[j] for _, j in pairs], LossWeights()
        )
        assert total == pytest.approx(expect)

    def test_sparse_empty_equals_distill(self):
        rng = np.random.default_rng(10)
        student, _, teacher = self.make_inputs(rng)
        total, _ = full_loss(student, [], teacher, LossWeights())
        assert total == pytest.approx(distill_loss(student, teacher, LossWeights())[0])

    def test_recomposes_from_parts(self):
        rng = np.random.default_rng(11)
        student, sparse, teacher = self.make_inputs(rng)
        total, grads = full_loss(student, sparse, teacher, LossWeights())
        drop, _ = full_loss(student, sparse, [], LossWeights())
        dist, _ = distill_loss(student, teacher, LossWeights())
        assert total == pytest.approx(drop + dist)


class TestEma:
    def test_mu_one_keeps_teacher(self):
        teacher = np.arange(4.0)
        student = np.zeros(4)
        np.testing.assert_array_equal(ema_update(teacher, student, 1.0), teacher)

    def test_mu_zero_copies_student(self):
        teacher = np.arange(4.0)
        student = np.full(4, 7.0)
        np.testing.assert_array_equal(ema_update(teacher, student, 0.0), student)

    def test_small_step(self):
        out = ema_update(np.zeros(3), np.ones(3), 0.999)
        np.testing.assert_allclose(out, 0.001)

    def test_twice_equals_mu_squared_against_fixed_student(self):
        rng = np.random.default_rng(12)
        teacher = rng.normal(size=6)
        student = rng.normal(size=6)
        mu = 0.9
        twice = ema_update(ema_update(teacher, student, mu), student, mu)
        once = ema_update(teacher, student, mu * mu)
        np.testing.assert_allclose(twice, once)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ema_update(np.zeros(3), np.zeros(4), 0.5)

    def test_mu_out_of_range(self):
        with pytest.raises(ValueError):
            ema_update(np.zeros(3), np.zeros(3), 1.5)


class TestGradCheck:
    def test_linear_function_is_exact(self):
        w = np.arange(1.0, 10.0).reshape(3, 3)
        err = grad_check(lambda x: (float((w * x).sum()), w), np.ones((3, 3)))
        assert err <= 1e-9
