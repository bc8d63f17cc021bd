"""Run-length encoded binary masks and the geometric predicates built on them.

Masks are stored column-major (COCO uncompressed convention) so externally
produced mask files interoperate: runs alternate background/foreground and
start with a background run, which may be zero-length when the first pixel
is foreground.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .validation import check_bitmap


class Point2(NamedTuple):
    """Sub-pixel image location; ``x`` is the column axis, ``y`` the row axis."""

    x: float
    y: float


@dataclass(frozen=True)
class RleMask:
    """Binary instance mask for one frame, as column-major run lengths."""

    height: int
    width: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"mask dimensions must be positive, got {self.height}x{self.width}")
        runs = tuple(int(r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        if any(r < 0 for r in runs):
            raise ValueError("run lengths must be non-negative")
        if any(a == 0 and b == 0 for a, b in zip(runs, runs[1:])):
            raise ValueError("two consecutive zero-length runs")
        total = sum(runs)
        if total != self.height * self.width:
            raise ValueError(
                f"corrupt run lengths: cover {total} pixels, expected {self.height * self.width}"
            )

    @property
    def area(self) -> int:
        """Foreground pixel count."""
        return sum(self.runs[1::2])

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.runs)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            h, w = obj["size"]
            counts = obj["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed RLE mask object: {obj!r}") from exc
        return cls(int(h), int(w), tuple(int(c) for c in counts))


def rle_encode(bitmap) -> RleMask:
    """Losslessly encode a 2-D boolean grid.

    The result is canonical: no zero-length runs except an optional leading
    background run when the first pixel is foreground.
    """
    grid = check_bitmap(bitmap)
    flat = grid.ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(grid.shape[0], grid.shape[1], tuple(runs))


def rle_decode(mask: RleMask) -> np.ndarray:
    """Exact inverse of :func:`rle_encode`; returns a fresh (H, W) bool grid."""
    values = np.zeros(len(mask.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, mask.runs)
    return flat.reshape((mask.height, mask.width), order="F")


def mask_iou(a: RleMask, b: RleMask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"mask dimensions differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    ga, gb = rle_decode(a), rle_decode(b)
    union = np.logical_or(ga, gb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ga, gb).sum() / union)


def contains_points(mask: RleMask, points) -> np.ndarray:
    """Membership test for an (N, 2) array of (x, y) coordinates.

    A point maps to the pixel containing it (floor); out-of-bounds points
    are a valid False, not an error.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    cols = np.floor(pts[:, 0]).astype(np.int64)
    rows = np.floor(pts[:, 1]).astype(np.int64)
    inside = (cols >= 0) & (cols < mask.width) & (rows >= 0) & (rows < mask.height)
    result = np.zeros(len(pts), dtype=bool)
    if inside.any():
        flat = cols[inside] * mask.height + rows[inside]
        cum = np.cumsum(np.asarray(mask.runs, dtype=np.int64))
        # index i sits in run k iff cum[k-1] <= i < cum[k]; odd k means foreground
        run_idx = np.searchsorted(cum, flat, side="right")
        result[inside] = run_idx % 2 == 1
    return result


def contains_point(mask: RleMask, p) -> bool:
    """True iff the pixel under ``p`` is inside bounds and foreground."""
    return bool(contains_points(mask, [tuple(p)])[0])
