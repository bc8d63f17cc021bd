"""Video instance segmentation evaluation: spatio-temporal AP and J&F.

Class-agnostic throughout, matching the unsupervised setting. AP follows the
COCO video protocol (greedy matching of score-sorted predictions, 101-point
precision interpolation, IoU thresholds 0.50:0.05:0.95); J&F follows the
DAVIS conventions with region IoU averaged over frames where either mask is
non-empty and a boundary F-measure computed by bipartite matching of
boundary pixels within a tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

from .labelset import Labelset
from .losses import hungarian_match
from .masks import RleMask, rle_decode

DEFAULT_IOU_THRESHOLDS = tuple(np.arange(0.50, 0.96, 0.05).round(2))

MaskTrack = Sequence[Optional[RleMask]]


@dataclass(frozen=True, eq=False)
class VideoPrediction:
    """One predicted instance track with its confidence score."""

    score: float
    masks: MaskTrack

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


def _track_bitmaps(track: MaskTrack) -> list[Optional[np.ndarray]]:
    return [None if m is None else rle_decode(m) for m in track]


def st_iou(pred: MaskTrack, gt: MaskTrack) -> float:
    """Spatio-temporal IoU: frame-summed intersection over frame-summed union.

    Absent masks count as empty; two everywhere-empty tracks score 1.0.
    """
    if len(pred) != len(gt):
        raise ValueError(f"track lengths differ: {len(pred)} vs {len(gt)}")
    inter = 0
    union = 0
    for pm, gm in zip(pred, gt):
        if pm is None and gm is None:
            continue
        if pm is None:
            union += gm.area
        elif gm is None:
            union += pm.area
        else:
            a, b = rle_decode(pm), rle_decode(gm)
            inter += np.logical_and(a, b).sum()
            union += np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(inter / union)


def video_ap(
    predictions: Mapping[str, Sequence[VideoPrediction]],
    ground_truth: Mapping[str, Sequence[MaskTrack]],
    iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
) -> dict:
    """Average precision over spatio-temporal IoU thresholds.

    Predictions are pooled across videos, sorted by descending score (ties
    keep insertion order), and greedily matched to the unmatched ground
    truth with the highest IoU at or above the threshold.
    """
    for thr in iou_thresholds:
        if not 0.0 < thr < 1.0:
            raise ValueError(f"IoU threshold outside (0, 1): {thr}")
    n_gt = sum(len(tracks) for tracks in ground_truth.values())
    if n_gt == 0:
        raise ValueError("evaluation needs at least one ground-truth instance")

    pooled = []  # (-score, order, video, pred index)
    order = 0
    ious: dict[str, np.ndarray] = {}
    for vid in sorted(ground_truth):
        preds = predictions.get(vid, [])
        gts = ground_truth[vid]
        matrix = np.zeros((len(preds), len(gts)))
        for p, pred in enumerate(preds):
            for g, gt in enumerate(gts):
                matrix[p, g] = st_iou(pred.masks, gt)
        ious[vid] = matrix
        for p, pred in enumerate(preds):
            pooled.append((-pred.score, order, vid, p))
            order += 1
    pooled.sort()

    recall_grid = np.linspace(0.0, 1.0, 101)
    per_threshold = {}
    for thr in iou_thresholds:
        matched_gt: dict[str, set] = {vid: set() for vid in ground_truth}
        tp = np.zeros(len(pooled))
        for rank, (_, _, vid, p) in enumerate(pooled):
            candidates = [
                (g, ious[vid][p, g])
                for g in range(ious[vid].shape[1])
                if g not in matched_gt[vid] and ious[vid][p, g] >= thr
            ]
            if candidates:
                best = max(candidates, key=lambda item: (item[1], -item[0]))
                matched_gt[vid].add(best[0])
                tp[rank] = 1.0
        cum_tp = np.cumsum(tp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.arange(1, len(pooled) + 1) if len(pooled) else np.zeros(0)
        interp = np.zeros(101)
        for i, r in enumerate(recall_grid):
            at_least = precision[recall >= r]
            interp[i] = at_least.max() if at_least.size else 0.0
        per_threshold[round(float(thr), 2)] = float(interp.mean())

    values = list(per_threshold.values())
    return {
        "AP": float(np.mean(values)),
        "AP50": per_threshold.get(0.5),
        "AP75": per_threshold.get(0.75),
        "per_threshold": per_threshold,
    }


# -- DAVIS-style J & F ---------------------------------------------------------

def default_boundary_tol(height: int, width: int) -> int:
    """0.8% of the image diagonal, rounded up."""
    return math.ceil(0.008 * math.hypot(height, width))


def _boundary_pixels(bitmap: np.ndarray) -> np.ndarray:
    """(K, 2) row/col coordinates of foreground pixels touching background
    (4-connectivity) or the image border."""
    padded = np.pad(bitmap, 1, constant_values=False)
    interior = (
        padded[1:-1, 1:-1]
        & padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    rows, cols = np.nonzero(bitmap & ~interior)
    return np.stack([rows, cols], axis=1)


def boundary_f_measure(pred_bitmap: np.ndarray, gt_bitmap: np.ndarray, tol: float) -> float:
    """F-measure of one-to-one matched boundary pixels within distance tol."""
    pb = _boundary_pixels(pred_bitmap)
    gb = _boundary_pixels(gt_bitmap)
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    tree = cKDTree(gb)
    pairs = tree.query_ball_point(pb, r=tol + 1e-9)
    rows = [i for i, cols in enumerate(pairs) for _ in cols]
    cols = [j for match in pairs for j in match]
    if not rows:
        return 0.0
    graph = csr_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(pb), len(gb))
    )
    matching = maximum_bipartite_matching(graph, perm_type="column")
    matched = int((matching != -1).sum())
    precision = matched / len(pb)
    recall = matched / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def j_and_f(
    pred: MaskTrack, gt: MaskTrack, boundary_tol: float | None = None
) -> tuple[float, float, float]:
    """Region similarity J, boundary F, and their mean, over frames where
    either mask is non-empty. Tracks empty everywhere score (1, 1, 1)."""
    if len(pred) != len(gt):
        raise ValueError(f"track lengths differ: {len(pred)} vs {len(gt)}")
    pred_bitmaps = _track_bitmaps(pred)
    gt_bitmaps = _track_bitmaps(gt)
    dims = next(
        (bm.shape for bm in pred_bitmaps + gt_bitmaps if bm is not None), None
    )
    if dims is None:
        return 1.0, 1.0, 1.0
    if boundary_tol is None:
        boundary_tol = default_boundary_tol(*dims)

    j_scores, f_scores = [], []
    for pm, gm in zip(pred_bitmaps, gt_bitmaps):
        p = pm if pm is not None else np.zeros(dims, dtype=bool)
        g = gm if gm is not None else np.zeros(dims, dtype=bool)
        if not p.any() and not g.any():
            continue
        union = np.logical_or(p, g).sum()
        j_scores.append(float(np.logical_and(p, g).sum() / union))
        f_scores.append(boundary_f_measure(p, g, boundary_tol))
    if not j_scores:
        return 1.0, 1.0, 1.0
    j = float(np.mean(j_scores))
    f = float(np.mean(f_scores))
    return j, f, (j + f) / 2.0


# -- labelset-level evaluation -------------------------------------------------

def _instance_tracks(labelset: Labelset, video_id: str) -> list[MaskTrack]:
    video = labelset.video(video_id)
    return [
        [inst.masks.get(t) for t in range(video.length)] for inst in video.instances
    ]


def evaluate_labelsets(
    pred: Labelset,
    gt: Labelset,
    iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
    boundary_tol: float | None = None,
    scores: Mapping[str, Sequence[float]] | None = None,
) -> dict:
    """AP and J&F of one labelset against another, matched by video id.

    Labelsets carry no confidence, so predictions default to score 1.0 in
    instance order. J&F matches predicted to ground-truth instances per
    video (Hungarian, maximizing J&F); unmatched ground truth scores zero,
    and the mean is taken over ground-truth instances.
    """
    missing = sorted(set(gt.video_ids) - set(pred.video_ids))
    if missing:
        raise ValueError(f"predictions missing videos: {missing}")

    predictions = {}
    ground_truth = {}
    for vid in gt.video_ids:
        gt_tracks = _instance_tracks(gt, vid)
        pred_tracks = _instance_tracks(pred, vid)
        vid_scores = list(scores[vid]) if scores is not None else [1.0] * len(pred_tracks)
        predictions[vid] = [
            VideoPrediction(s, track) for s, track in zip(vid_scores, pred_tracks)
        ]
        ground_truth[vid] = gt_tracks

    ap = video_ap(predictions, ground_truth, iou_thresholds)

    j_total, f_total, n_gt = 0.0, 0.0, 0
    for vid in gt.video_ids:
        gt_tracks = ground_truth[vid]
        pred_tracks = [p.masks for p in predictions[vid]]
        n_gt += len(gt_tracks)
        if not gt_tracks:
            continue
        if not pred_tracks:
            continue
        jf = np.zeros((len(pred_tracks), len(gt_tracks), 3))
        for p, ptrack in enumerate(pred_tracks):
            for g, gtrack in enumerate(gt_tracks):
                jf[p, g] = j_and_f(ptrack, gtrack, boundary_tol)
        for p, g in hungarian_match(1.0 - jf[:, :, 2]):
            j_total += jf[p, g, 0]
            f_total += jf[p, g, 1]
    j_mean = float(j_total / n_gt) if n_gt else 1.0
    f_mean = float(f_total / n_gt) if n_gt else 1.0
    return {
        "AP": ap["AP"],
        "AP50": ap["AP50"],
        "AP75": ap["AP75"],
        "J": j_mean,
        "F": f_mean,
        "JF": (j_mean + f_mean) / 2.0,
    }
