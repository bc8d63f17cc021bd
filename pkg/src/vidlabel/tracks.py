"""Point trajectories attached to single-frame masks, and their visibility.

Every single-frame instance mask owns one track: a grid of points initialized
inside the mask and followed (forward and backward) through the whole video,
with per-frame coordinates and visibility flags. One full-length trajectory
is kept per point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .iojson import atomic_write_text, check_schema_version
from .masks import RleMask, contains_points, rle_decode
from .validation import SchemaError, check_unit_interval

SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One tracked point: (T, 2) float coordinates and (T,) visibility flags."""

    coords: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        visible = np.asarray(self.visible, dtype=bool)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
            raise ValueError(f"coords must be (T, 2) with T >= 1, got {coords.shape}")
        if visible.shape != (coords.shape[0],):
            raise ValueError("coords and visible lengths differ")
        if not np.all(np.isfinite(coords)):
            raise ValueError("trajectory coordinates must be finite")
        coords.setflags(write=False)
        visible.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "visible", visible)

    @property
    def length(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True, eq=False)
class InstanceTrack:
    """All trajectories of one single-frame mask, over the full video."""

    video_id: str
    source_frame: int
    source_mask: RleMask
    trajectories: tuple[Trajectory, ...]

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise ValueError("a track needs at least one trajectory")
        T = self.trajectories[0].length
        if any(tr.length != T for tr in self.trajectories):
            raise ValueError("all trajectories of a track must share one length")
        if not 0 <= self.source_frame < T:
            raise ValueError(f"source frame {self.source_frame} outside [0, {T})")
        at_source = self.coords[:, self.source_frame]
        if not self.visible[:, self.source_frame].all():
            raise ValueError("every point must be visible at its source frame")
        if not contains_points(self.source_mask, at_source).all():
            raise ValueError("every point must start inside its source mask")

    @property
    def length(self) -> int:
        return self.trajectories[0].length

    @property
    def num_points(self) -> int:
        return len(self.trajectories)

    @cached_property
    def coords(self) -> np.ndarray:
        """(N, T, 2) stacked coordinates."""
        stacked = np.stack([tr.coords for tr in self.trajectories])
        stacked.setflags(write=False)
        return stacked

    @cached_property
    def visible(self) -> np.ndarray:
        """(N, T) stacked visibility flags."""
        stacked = np.stack([tr.visible for tr in self.trajectories])
        stacked.setflags(write=False)
        return stacked


@dataclass(frozen=True, eq=False)
class TrackSet:
    """All tracks of one video (one per single-frame mask)."""

    video_id: str
    length: int
    tracks: tuple[InstanceTrack, ...]

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if any(t.length != self.length for t in self.tracks):
            raise ValueError("track length differs from video length")


def init_point_grid(mask: RleMask, spacing: int = 8) -> np.ndarray:
    """Regular point grid (pixel centers, stride ``spacing``) inside a mask.

    Falls back to the single foreground pixel nearest the mask centroid when
    no grid point lands inside, so every mask yields at least one point.
    """
    if spacing < 1:
        raise ValueError(f"spacing must be >= 1, got {spacing}")
    bitmap = rle_decode(mask)
    if not bitmap.any():
        raise ValueError("cannot place points inside an empty mask")
    rows = np.arange(0, mask.height, spacing)
    cols = np.arange(0, mask.width, spacing)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    keep = bitmap[rr, cc]
    points = np.stack([cc[keep] + 0.5, rr[keep] + 0.5], axis=1).astype(float)
    if len(points) == 0:
        fg_rows, fg_cols = np.nonzero(bitmap)
        cy, cx = fg_rows.mean(), fg_cols.mean()
        nearest = int(np.argmin((fg_rows - cy) ** 2 + (fg_cols - cx) ** 2))
        points = np.array([[fg_cols[nearest] + 0.5, fg_rows[nearest] + 0.5]])
    return points


def visibility_ratio(track: InstanceTrack, t: int) -> float:
    """Fraction of the track's points visible at frame ``t``."""
    if not 0 <= t < track.length:
        raise ValueError(f"frame {t} outside [0, {track.length})")
    return float(track.visible[:, t].mean())


def visibility_vector(track: InstanceTrack, gamma_thr: float = 0.3) -> np.ndarray:
    """Per-frame occlusion state: True where the visible-point ratio strictly
    exceeds ``gamma_thr``."""
    check_unit_interval(gamma_thr, "gamma_thr", open_ends=True)
    ratios = track.visible.mean(axis=0)
    return ratios > gamma_thr


# -- track file format -------------------------------------------------------

def trackset_to_json(trackset: TrackSet) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": trackset.video_id,
        "T": trackset.length,
        "tracks": [
            {
                "source_frame": track.source_frame,
                "mask": track.source_mask.to_json(),
                "points": [
                    {
                        "xy": [[float(x), float(y)] for x, y in tr.coords],
                        "vis": [bool(v) for v in tr.visible],
                    }
                    for tr in track.trajectories
                ],
            }
            for track in trackset.tracks
        ],
    }


def trackset_from_json(obj: dict, video_id: str | None = None) -> TrackSet:
    check_schema_version(obj, "track file")
    try:
        length = int(obj["T"])
        vid = str(obj.get("id", video_id if video_id is not None else "video"))
        tracks = []
        for entry in obj["tracks"]:
            mask = RleMask.from_json(entry["mask"])
            trajectories = tuple(
                Trajectory(np.asarray(p["xy"], dtype=float), np.asarray(p["vis"], dtype=bool))
                for p in entry["points"]
            )
            tracks.append(
                InstanceTrack(vid, int(entry["source_frame"]), mask, trajectories)
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed track file: {exc}") from exc
    return TrackSet(vid, length, tuple(tracks))


def save_trackset(trackset: TrackSet, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(trackset_to_json(trackset), sort_keys=True))


def load_trackset(path: str | Path) -> TrackSet:
    path = Path(path)
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    stem = path.name.split(".")[0]
    return trackset_from_json(obj, video_id=stem)
