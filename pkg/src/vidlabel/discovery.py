"""Keymask discovery: turn noisy per-frame masks + tracks into sparse labels.

The pipeline per video:

1. visibility grouping — masks whose tracks appear and disappear together
   are clustered on their binary visibility vectors (DBSCAN, Hamming);
2. proxy propagate-and-match — inside each visibility group, a mask's point
   track stands in for propagating it to other frames; the point-mask
   Jaccard index scores its overlap with each co-visible frame mask;
3. subgrouping — the per-frame sequences of matched mask ids are clustered
   again, splitting co-visible but spatially distinct instances;
4. assembly — each subgroup becomes one video instance annotated at the
   frames its member masks came from; videos with no surviving subgroup are
   discarded.

Masks are selected, never edited, so every output mask is one of the inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .clustering import NOISE, dbscan
from .labelset import InstanceLabels, Labelset, VideoLabels
from .masks import RleMask, contains_points, rle_decode
from .tracks import InstanceTrack, TrackSet, visibility_ratio, visibility_vector
from .validation import check_unit_interval

NONE_MATCH = -1


@dataclass(frozen=True)
class DiscoveryConfig:
    gamma_thr: float = 0.3
    lambda_j: float = 0.5
    vis_eps_frac: float = 0.1
    vis_min_pts: int = 3
    match_eps_frac: float = 0.1
    match_min_pts: int = 3
    max_overlap_frac: float = 0.1

    def __post_init__(self):
        check_unit_interval(self.gamma_thr, "gamma_thr", open_ends=True)
        check_unit_interval(self.lambda_j, "lambda_j", open_ends=True)
        if min(self.vis_min_pts, self.match_min_pts) < 1:
            raise ValueError("DBSCAN min_pts must be >= 1")

    def vis_eps(self, length: int) -> int:
        return math.ceil(self.vis_eps_frac * length)

    def match_eps(self, length: int) -> int:
        return math.ceil(self.match_eps_frac * length)


@dataclass(frozen=True, eq=False)
class VisibilityGroup:
    """Tracks sharing one visibility cluster; ids index the video's track list."""

    member_ids: tuple[int, ...]
    vectors: np.ndarray  # (n_members, T) bool


@dataclass(frozen=True, eq=False)
class MatchingMatrix:
    """Boolean match tensor (i: track, k: mask, t: frame) within one group.

    ``entries[i, k, t]`` is set only at the source frame of mask ``k``, only
    when track i's visible-point ratio strictly exceeds gamma_thr there, and
    only when the point-mask Jaccard strictly exceeds lambda_j. ``jaccard``
    keeps the raw scores for argmax tie resolution.
    """

    member_ids: tuple[int, ...]
    source_frames: tuple[int, ...]
    entries: np.ndarray  # (N, N, T) bool
    jaccard: np.ndarray  # (N, N, T) float


def point_mask_jaccard(track: InstanceTrack, mask: RleMask, t: int) -> float:
    """Fraction of the track's points landing inside ``mask`` at frame ``t``.

    All points count in the denominator regardless of visibility.
    """
    src = track.source_mask
    if (mask.height, mask.width) != (src.height, src.width):
        raise ValueError(
            f"mask dimensions {mask.height}x{mask.width} do not match the "
            f"track's video ({src.height}x{src.width})"
        )
    if not 0 <= t < track.length:
        raise ValueError(f"frame {t} outside [0, {track.length})")
    return float(contains_points(mask, track.coords[:, t]).mean())


def group_by_visibility(
    tracks: Sequence[InstanceTrack],
    gamma_thr: float = 0.3,
    eps: float = 2,
    min_pts: int = 3,
) -> tuple[list[VisibilityGroup], list[int]]:
    """Partition tracks into visibility groups plus DBSCAN-noise outliers."""
    if not tracks:
        raise ValueError("need at least one track")
    vectors = np.stack([visibility_vector(tr, gamma_thr) for tr in tracks])
    labels = dbscan(vectors, eps=eps, min_pts=min_pts)
    groups = []
    for cluster in range(labels.max() + 1 if labels.size else 0):
        ids = tuple(int(i) for i in np.flatnonzero(labels == cluster))
        groups.append(VisibilityGroup(ids, vectors[list(ids)]))
    outliers = [int(i) for i in np.flatnonzero(labels == NOISE)]
    return groups, outliers


def _points_inside(bitmap: np.ndarray, xy: np.ndarray) -> np.ndarray:
    h, w = bitmap.shape
    px = np.floor(xy[:, 0]).astype(int)
    py = np.floor(xy[:, 1]).astype(int)
    ok = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    inside = np.zeros(len(xy), dtype=bool)
    inside[ok] = bitmap[py[ok], px[ok]]
    return inside


def build_matching_matrix(
    group: VisibilityGroup,
    tracks: Sequence[InstanceTrack],
    lambda_j: float = 0.5,
    gamma_thr: float = 0.3,
) -> MatchingMatrix:
    """Match every member track against every member mask at its frame."""
    members = [tracks[i] for i in group.member_ids]
    if not members:
        raise ValueError("empty visibility group")
    n = len(members)
    T = members[0].length
    entries = np.zeros((n, n, T), dtype=bool)
    jaccard = np.zeros((n, n, T))
    for k, owner in enumerate(members):
        t_k = owner.source_frame
        bitmap = rle_decode(owner.source_mask)
        for i, track in enumerate(members):
            score = float(_points_inside(bitmap, track.coords[:, t_k]).mean())
            jaccard[i, k, t_k] = score
            if visibility_ratio(track, t_k) > gamma_thr and score > lambda_j:
                entries[i, k, t_k] = True
    return MatchingMatrix(
        member_ids=group.member_ids,
        source_frames=tuple(tr.source_frame for tr in members),
        entries=entries,
        jaccard=jaccard,
    )


def matching_tracks(matrix: MatchingMatrix) -> np.ndarray:
    """Per member, the frame-wise sequence of matched mask ids (-1 for none).

    Where several masks match at one frame, the highest Jaccard wins; ties go
    to the lower mask id.
    """
    n, _, T = matrix.entries.shape
    ids = np.asarray(matrix.member_ids)
    sequences = np.full((n, T), NONE_MATCH, dtype=int)
    for i in range(n):
        scores = np.where(matrix.entries[i], matrix.jaccard[i], -np.inf)
        best = np.argmax(scores, axis=0)  # first maximum: lower id wins ties
        matched = matrix.entries[i].any(axis=0)
        sequences[i, matched] = ids[best[matched]]
    return sequences


def subgroup_by_matching(
    matrix: MatchingMatrix,
    eps: float = 2,
    min_pts: int = 3,
) -> tuple[list[list[int]], list[int]]:
    """Cluster matching tracks; each cluster is one video instance.

    Returns (subgroups, dropped), both holding ids from the video's track
    list. Sequences are compared positionwise, with "no match" agreeing with
    "no match".
    """
    sequences = matching_tracks(matrix)
    labels = dbscan(sequences, eps=eps, min_pts=min_pts)
    ids = np.asarray(matrix.member_ids)
    subgroups = [
        [int(i) for i in ids[labels == cluster]]
        for cluster in range(labels.max() + 1 if labels.size else 0)
    ]
    dropped = [int(i) for i in ids[labels == NOISE]]
    return subgroups, dropped


def assemble_keymasks(
    video_id: str,
    length: int,
    tracks: Sequence[InstanceTrack],
    subgroups: Sequence[Sequence[int]],
    max_overlap_frac: float = 0.1,
) -> tuple[VideoLabels, dict[int, int]]:
    """Build the sparse labelset video from subgroup partitions.

    At a frame with several member masks of one subgroup, the mask receiving
    the highest mean point-mask Jaccard from the other members' tracks wins
    (ties to the lower mask id). Frame entries of a later instance that
    overlap an earlier instance's mask by at least ``max_overlap_frac`` of
    the smaller area are dropped; instances left without frames are removed.
    Returns the video labels plus a map from subgroup index to the final
    instance id (-1 when the whole subgroup was dropped).
    """
    selected: list[dict[int, int]] = []  # per subgroup: frame -> track id
    for members in subgroups:
        per_frame: dict[int, list[int]] = {}
        for track_id in members:
            per_frame.setdefault(tracks[track_id].source_frame, []).append(track_id)
        chosen: dict[int, int] = {}
        for t, candidates in per_frame.items():
            if len(candidates) == 1:
                chosen[t] = candidates[0]
                continue
            scored = []
            for cand in candidates:
                mask = tracks[cand].source_mask
                others = [m for m in members if m != cand]
                received = [point_mask_jaccard(tracks[o], mask, t) for o in others]
                mean = float(np.mean(received)) if received else 0.0
                scored.append((-mean, cand))
            chosen[t] = min(scored)[1]
        selected.append(chosen)

    # overlap sanity cap between distinct instances, earlier instance wins
    occupancy: dict[int, list[np.ndarray]] = {}
    instances: list[InstanceLabels] = []
    subgroup_to_instance: dict[int, int] = {}
    for g, chosen in enumerate(selected):
        masks: dict[int, RleMask] = {}
        provenance: dict[int, int] = {}
        for t in sorted(chosen):
            track_id = chosen[t]
            bitmap = rle_decode(tracks[track_id].source_mask)
            conflict = False
            for other in occupancy.get(t, []):
                smaller = min(bitmap.sum(), other.sum())
                if smaller and (bitmap & other).sum() >= max_overlap_frac * smaller:
                    conflict = True
                    break
            if conflict:
                continue
            masks[t] = tracks[track_id].source_mask
            provenance[t] = track_id
        if not masks:
            subgroup_to_instance[g] = -1
            continue
        instance_id = len(instances)
        subgroup_to_instance[g] = instance_id
        for t in masks:
            occupancy.setdefault(t, []).append(rle_decode(masks[t]))
        instances.append(InstanceLabels(instance_id, masks, provenance))

    video = VideoLabels(video_id, length, tuple(instances), discarded=not instances)
    return video, subgroup_to_instance


def discover_video(
    trackset: TrackSet, config: DiscoveryConfig = DiscoveryConfig()
) -> tuple[VideoLabels, dict]:
    """Run the full discovery pipeline on one video's tracks."""
    T = trackset.length
    if not trackset.tracks:
        video = VideoLabels(trackset.video_id, T, (), discarded=True)
        report = {
            "id": trackset.video_id,
            "num_tracks": 0,
            "num_groups": 0,
            "num_outliers": 0,
            "num_instances": 0,
            "discarded": True,
            "assignments": [],
        }
        return video, report

    groups, outliers = group_by_visibility(
        trackset.tracks,
        gamma_thr=config.gamma_thr,
        eps=config.vis_eps(T),
        min_pts=config.vis_min_pts,
    )
    subgroups: list[list[int]] = []
    for group in groups:
        matrix = build_matching_matrix(
            group, trackset.tracks, lambda_j=config.lambda_j, gamma_thr=config.gamma_thr
        )
        found, _ = subgroup_by_matching(
            matrix, eps=config.match_eps(T), min_pts=config.match_min_pts
        )
        subgroups.extend(found)

    video, subgroup_to_instance = assemble_keymasks(
        trackset.video_id, T, trackset.tracks, subgroups, config.max_overlap_frac
    )
    assignments = [-1] * len(trackset.tracks)
    for g, members in enumerate(subgroups):
        for track_id in members:
            assignments[track_id] = subgroup_to_instance[g]
    report = {
        "id": trackset.video_id,
        "num_tracks": len(trackset.tracks),
        "num_groups": len(groups),
        "num_outliers": len(outliers),
        "num_instances": len(video.instances),
        "discarded": video.discarded,
        "assignments": assignments,
    }
    return video, report


def discover(
    tracksets: Sequence[TrackSet], config: DiscoveryConfig = DiscoveryConfig()
) -> tuple[Labelset, dict]:
    """Discovery over a batch of videos, with a per-video report."""
    videos, reports = [], []
    for trackset in tracksets:
        video, report = discover_video(trackset, config)
        videos.append(video)
        reports.append(report)
    labelset = Labelset(tuple(videos))
    summary = {
        "schema_version": 1,
        "num_videos": len(videos),
        "num_discarded": sum(1 for v in videos if v.discarded),
        "videos": reports,
    }
    return labelset, summary


class KeymaskDiscovery(TransformerMixin, BaseEstimator):
    """Estimator wrapper over :func:`discover`.

    Stateless: ``fit`` only validates parameters; ``transform`` maps a
    sequence of :class:`~vidlabel.tracks.TrackSet` to a sparse
    :class:`~vidlabel.labelset.Labelset`. The per-video report of the last
    transform is kept on ``report_``.
    """

    def __init__(
        self,
        gamma_thr: float = 0.3,
        lambda_j: float = 0.5,
        vis_eps_frac: float = 0.1,
        vis_min_pts: int = 3,
        match_eps_frac: float = 0.1,
        match_min_pts: int = 3,
        max_overlap_frac: float = 0.1,
    ):
        self.gamma_thr = gamma_thr
        self.lambda_j = lambda_j
        self.vis_eps_frac = vis_eps_frac
        self.vis_min_pts = vis_min_pts
        self.match_eps_frac = match_eps_frac
        self.match_min_pts = match_min_pts
        self.max_overlap_frac = max_overlap_frac

    def _config(self) -> DiscoveryConfig:
        return DiscoveryConfig(
            gamma_thr=self.gamma_thr,
            lambda_j=self.lambda_j,
            vis_eps_frac=self.vis_eps_frac,
            vis_min_pts=self.vis_min_pts,
            match_eps_frac=self.match_eps_frac,
            match_min_pts=self.match_min_pts,
            max_overlap_frac=self.max_overlap_frac,
        )

    def fit(self, X=None, y=None):
        self._config()  # parameter validation only; no state is learned
        return self

    def transform(self, X: Sequence[TrackSet]) -> Labelset:
        labelset, report = discover(list(X), self._config())
        self.report_ = report
        return labelset
