"""Video instance labelsets: sparse and dense annotations plus their JSON form.

One schema serves both stages; density is a constraint checked on top of the
shared format, not a second format. Frames are keyed per instance, so a
sparse labelset simply omits frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .iojson import SCHEMA_VERSION, atomic_write_text, check_schema_version, load_json
from .masks import RleMask, rle_decode
from .validation import SchemaError


@dataclass(frozen=True, eq=False)
class InstanceLabels:
    """One video instance: annotated frames and the masks selected for them."""

    instance_id: int
    masks: dict[int, RleMask]
    provenance: dict[int, int] = field(default_factory=dict)

    @property
    def frames(self) -> list[int]:
        return sorted(self.masks)


@dataclass(frozen=True, eq=False)
class VideoLabels:
    video_id: str
    length: int
    instances: tuple[InstanceLabels, ...]
    discarded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            if not inst.masks:
                raise ValueError(f"instance {inst.instance_id} has no annotated frame")
            bad = [t for t in inst.masks if not 0 <= t < self.length]
            if bad:
                raise ValueError(f"instance {inst.instance_id} annotated outside video: {bad}")


@dataclass(frozen=True, eq=False)
class Labelset:
    videos: tuple[VideoLabels, ...]

    def __post_init__(self):
        object.__setattr__(self, "videos", tuple(self.videos))
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate video ids in labelset")

    def video(self, video_id: str) -> VideoLabels:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)

    @property
    def video_ids(self) -> list[str]:
        return [v.video_id for v in self.videos]


def labelset_to_json(labelset: Labelset) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "videos": [
            {
                "id": video.video_id,
                "T": video.length,
                "discarded": video.discarded,
                "instances": [
                    {
                        "id": inst.instance_id,
                        "masks": {str(t): m.to_json() for t, m in inst.masks.items()},
                        **(
                            {"provenance": {str(t): i for t, i in inst.provenance.items()}}
                            if inst.provenance
                            else {}
                        ),
                    }
                    for inst in video.instances
                ],
            }
            for video in labelset.videos
        ],
    }


def labelset_from_json(obj: dict) -> Labelset:
    check_schema_version(obj, "labelset")
    try:
        videos = []
        for v in obj["videos"]:
            instances = tuple(
                InstanceLabels(
                    instance_id=int(entry["id"]),
                    masks={int(t): RleMask.from_json(m) for t, m in entry["masks"].items()},
                    provenance={int(t): int(i) for t, i in entry.get("provenance", {}).items()},
                )
                for entry in v["instances"]
            )
            videos.append(
                VideoLabels(str(v["id"]), int(v["T"]), instances, bool(v.get("discarded", False)))
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed labelset: {exc}") from exc
    return Labelset(tuple(videos))


def save_labelset(labelset: Labelset, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(labelset_to_json(labelset), sort_keys=True) + "\n")


def load_labelset(path: str | Path) -> Labelset:
    return labelset_from_json(load_json(path, "labelset"))


def check_overlap_cap(video: VideoLabels, max_overlap_frac: float = 0.1) -> list[str]:
    """Report frame-level overlap violations between distinct instances.

    Two instances may share a frame only when their masks overlap by less
    than ``max_overlap_frac`` of the smaller mask's area.
    """
    problems = []
    for i, a in enumerate(video.instances):
        for b in video.instances[i + 1 :]:
            for t in set(a.masks) & set(b.masks):
                ga, gb = rle_decode(a.masks[t]), rle_decode(b.masks[t])
                smaller = min(ga.sum(), gb.sum())
                if smaller == 0:
                    continue
                overlap = (ga & gb).sum()
                if overlap >= max_overlap_frac * smaller:
                    problems.append(
                        f"{video.video_id}: instances {a.instance_id}/{b.instance_id} "
                        f"overlap {overlap}px at frame {t}"
                    )
    return problems


def is_dense(labelset: Labelset) -> bool:
    """True when every instance's annotated frames form one contiguous block."""
    for video in labelset.videos:
        for inst in video.instances:
            frames = inst.frames
            if frames[-1] - frames[0] + 1 != len(frames):
                return False
    return True
