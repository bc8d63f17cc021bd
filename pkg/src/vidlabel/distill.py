"""Sparse-to-dense training: snippet sampling, the student-teacher loop,
and densification of a trained teacher's predictions.

Stage 1 anchors the student on the sparse keymask labels with the temporal
drop-loss while an EMA teacher provides dense on-the-fly supervision; stage 2
repeats the same loop from fresh parameters, anchored on the dense labels the
stage-1 teacher predicted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .labelset import InstanceLabels, Labelset, VideoLabels
from .losses import (
    LossWeights,
    distill_loss,
    ema_update,
    match_predictions,
    temporal_droploss,
    _annotated,
)
from .masks import rle_encode
from .propagator import (
    PropagatorSpec,
    ToyPropagator,
    VideoClip,
    backprop_params,
    toy_forward,
)
from .validation import DivergenceError, InputError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    steps: int = 2000
    batch_size: int = 4
    mu: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    snippet_len: int = 2
    num_slots: int = 8
    threshold: float = 0.5
    min_area: int = 10
    distill_warmup_steps: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.learning_rate <= 0:
            raise InputError("training needs positive steps and learning rate")
        if self.batch_size < 1 or self.snippet_len < 1 or self.num_slots < 1:
            raise InputError("batch size, snippet length and slot count must be >= 1")
        if not 0.0 <= self.mu <= 1.0:
            raise InputError(f"mu must lie in [0, 1], got {self.mu}")


@dataclass(frozen=True, eq=False)
class Snippet:
    """A short consecutive-frame training sample with its sparse annotations."""

    video_id: str
    frame_indices: tuple[int, ...]
    frames: np.ndarray  # (snippet_len, H, W, C)
    annotations: list[list]  # per instance, per snippet frame: RleMask | None


def sample_pseudo_dense_snippet(
    labels: VideoLabels,
    clip: VideoClip,
    rng: np.random.Generator,
    snippet_len: int = 2,
) -> Snippet:
    """Sample a snippet, preferring anchors where some instance is annotated
    in every frame of the window; falls back to uniform frame sampling."""
    T = clip.length
    if T < snippet_len:
        raise InputError(f"video {clip.video_id} shorter than snippet ({T} < {snippet_len})")
    anchors = [
        t
        for t in range(T - snippet_len + 1)
        if any(
            all(_annotated(inst.masks.get(t + dt)) for dt in range(snippet_len))
            for inst in labels.instances
        )
    ]
    if anchors:
        t0 = int(anchors[rng.integers(len(anchors))])
    else:
        t0 = int(rng.integers(T - snippet_len + 1))
    window = tuple(range(t0, t0 + snippet_len))
    annotations = [
        [inst.masks.get(t) for t in window] for inst in labels.instances
    ]
    return Snippet(clip.video_id, window, clip.frames[t0 : t0 + snippet_len], annotations)


def teacher_pseudo_labels(
    teacher_probs: np.ndarray, threshold: float = 0.5, min_area: int = 10
) -> list[list[np.ndarray]]:
    """Threshold teacher probabilities into per-slot frame bitmaps, keeping
    slots whose largest per-frame foreground reaches ``min_area`` pixels."""
    hard = teacher_probs > threshold
    labels = []
    for q in range(hard.shape[0]):
        areas = hard[q].sum(axis=(1, 2))
        if areas.max() >= min_area:
            labels.append([hard[q, t] for t in range(hard.shape[1])])
    return labels


def _anchored_droploss(preds, annotations, weights):
    """Drop-loss against the instances that are annotated within the snippet,
    after Hungarian-matching them to query slots."""
    grads = np.zeros_like(preds)
    annotated = [fr for fr in annotations if any(_annotated(f) for f in fr)]
    if not annotated:
        return 0.0, grads
    pairs = match_predictions(preds, annotated, weights)
    slots = [q for q, _ in pairs]
    matched = [annotated[j] for _, j in pairs]
    loss, matched_grads = temporal_droploss(preds[slots], matched, weights)
    for row, q in enumerate(slots):
        grads[q] += matched_grads[row]
    return loss, grads


def _training_videos(clips, labelset: Labelset, config: TrainConfig):
    clips_by_id = {clip.video_id: clip for clip in clips}
    usable = []
    for video in labelset.videos:
        if video.discarded or not video.instances:
            continue
        clip = clips_by_id.get(video.video_id)
        if clip is None:
            continue
        if clip.length < config.snippet_len:
            continue
        usable.append((video, clip))
    if not usable:
        raise InputError("no trainable videos: labelset and clips do not overlap")
    lengths = {clip.length for _, clip in usable}
    dims = {clip.feature_dim for _, clip in usable}
    if len(lengths) > 1 or len(dims) > 1:
        raise InputError(f"clips disagree on length/feature dim: {lengths}/{dims}")
    return usable


def _run_training(
    clips: Sequence[VideoClip], labelset: Labelset, config: TrainConfig
) -> tuple[ToyPropagator, ToyPropagator, list[dict]]:
    usable = _training_videos(clips, labelset, config)
    T = usable[0][1].length
    spec = PropagatorSpec(config.num_slots, usable[0][1].feature_dim, T)
    rng = np.random.default_rng(config.seed)
    student = ToyPropagator.init(spec, rng)
    teacher = student.copy()

    log: list[dict] = []
    for step in range(config.steps):
        grad_sum = np.zeros(spec.num_params)
        drop_sum = 0.0
        distill_sum = 0.0
        for _ in range(config.batch_size):
            video, clip = usable[rng.integers(len(usable))]
            snippet = sample_pseudo_dense_snippet(video, clip, rng, config.snippet_len)
            idx = np.asarray(snippet.frame_indices)
            probs = toy_forward(student, snippet.frames, idx)

            drop, grads = _anchored_droploss(probs, snippet.annotations, config.weights)
            if step >= config.distill_warmup_steps:
                teacher_probs = toy_forward(teacher, snippet.frames, idx)
                labels = teacher_pseudo_labels(
                    teacher_probs, config.threshold, config.min_area
                )
                dist, dist_grads = distill_loss(
                    probs, labels, config.weights, config.threshold
                )
            else:
                dist, dist_grads = 0.0, np.zeros_like(probs)

            drop_sum += drop
            distill_sum += dist
            grad_sum += backprop_params(student, snippet.frames, idx, probs, grads + dist_grads)

        total = (drop_sum + distill_sum) / config.batch_size
        if not np.isfinite(total):
            raise DivergenceError(step)
        student = ToyPropagator(
            spec, student.params - config.learning_rate * grad_sum / config.batch_size
        )
        teacher = ToyPropagator(spec, ema_update(teacher.params, student.params, config.mu))
        log.append(
            {
                "step": step,
                "droploss": drop_sum / config.batch_size,
                "distill_loss": distill_sum / config.batch_size,
                "total": total,
            }
        )
    return teacher, student, log


def train_stage1(
    clips: Sequence[VideoClip], labelset: Labelset, config: TrainConfig = TrainConfig()
) -> tuple[ToyPropagator, list[dict]]:
    """Student-teacher training anchored on the sparse keymask labelset."""
    teacher, _, log = _run_training(clips, labelset, config)
    return teacher, log


def train_stage2(
    clips: Sequence[VideoClip], dense_labelset: Labelset, config: TrainConfig = TrainConfig()
) -> tuple[ToyPropagator, list[dict]]:
    """Self-distillation round anchored on the stage-1 dense labels.

    The student starts from fresh parameters; only the anchoring labelset
    changes relative to stage 1.
    """
    teacher, _, log = _run_training(clips, dense_labelset, config)
    return teacher, log


def densify(
    model: ToyPropagator,
    clips: Sequence[VideoClip],
    threshold: float = 0.5,
    min_area: int = 10,
) -> Labelset:
    """Predict a dense labelset: per kept slot, the strictly-thresholded
    masks over its longest contiguous run of non-empty frames."""
    videos = []
    for clip in clips:
        if clip.length != model.spec.num_frames:
            raise InputError(
                f"video {clip.video_id} has {clip.length} frames, model expects "
                f"{model.spec.num_frames}"
            )
        probs = toy_forward(model, clip.frames, np.arange(clip.length))
        hard = probs > threshold
        instances = []
        for q in range(hard.shape[0]):
            areas = hard[q].sum(axis=(1, 2))
            if areas.max(initial=0) < min_area:
                continue
            start, stop = _longest_run(areas > 0)
            masks = {t: rle_encode(hard[q, t]) for t in range(start, stop)}
            instances.append(InstanceLabels(len(instances), masks))
        videos.append(
            VideoLabels(clip.video_id, clip.length, tuple(instances), discarded=not instances)
        )
    return Labelset(tuple(videos))


def _longest_run(flags: np.ndarray) -> tuple[int, int]:
    """Half-open [start, stop) bounds of the longest True run (earliest wins)."""
    best = (0, 0)
    start = None
    for t, flag in enumerate(flags):
        if flag and start is None:
            start = t
        elif not flag and start is not None:
            if t - start > best[1] - best[0]:
                best = (start, t)
            start = None
    if start is not None and len(flags) - start > best[1] - best[0]:
        best = (start, len(flags))
    return best


class SparseToDenseDistiller(BaseEstimator):
    """Estimator wrapper over the training loop and densification.

    ``fit(X, y)`` takes video clips and an anchoring labelset (sparse for
    stage 1, dense for stage 2) and trains the student-teacher pair;
    ``predict(X)`` densifies the teacher's predictions into a labelset.
    """

    def __init__(
        self,
        num_slots: int = 8,
        learning_rate: float = 0.1,
        steps: int = 2000,
        batch_size: int = 4,
        mu: float = 0.999,
        lambda_ce: float = 5.0,
        lambda_dice: float = 5.0,
        snippet_len: int = 2,
        threshold: float = 0.5,
        min_area: int = 10,
        distill_warmup_steps: int = 0,
        seed: int = 0,
    ):
        self.num_slots = num_slots
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.mu = mu
        self.lambda_ce = lambda_ce
        self.lambda_dice = lambda_dice
        self.snippet_len = snippet_len
        self.threshold = threshold
        self.min_area = min_area
        self.distill_warmup_steps = distill_warmup_steps
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            steps=self.steps,
            batch_size=self.batch_size,
            mu=self.mu,
            weights=LossWeights(self.lambda_ce, self.lambda_dice),
            seed=self.seed,
            snippet_len=self.snippet_len,
            num_slots=self.num_slots,
            threshold=self.threshold,
            min_area=self.min_area,
            distill_warmup_steps=self.distill_warmup_steps,
        )

    def fit(self, X: Sequence[VideoClip], y: Labelset):
        teacher, student, log = _run_training(list(X), y, self._train_config())
        self.teacher_ = teacher
        self.student_ = student
        self.log_ = log
        return self

    def predict(self, X: Sequence[VideoClip]) -> Labelset:
        check_is_fitted(self, "teacher_")
        return densify(self.teacher_, list(X), self.threshold, self.min_area)
