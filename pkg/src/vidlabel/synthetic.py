"""Deterministic synthetic videos with analytic tracks and known assignments.

Stands in for real videos plus a neural point tracker: simple shapes move
analytically, so per-frame detections, point trajectories, visibility and
ground-truth instance assignment are all exact functions of (config, seed).
Detected masks carry controlled jitter; injected noise masks mimic spurious
detections whose tracks flicker randomly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .labelset import InstanceLabels, VideoLabels
from .masks import RleMask, rle_encode
from .propagator import VideoClip
from .tracks import InstanceTrack, TrackSet, Trajectory, init_point_grid
from .validation import InputError

NOISE = -1

MOTIONS = ("static", "translate", "scale", "occlusion", "mixed")


@dataclass(frozen=True)
class ShapeSpec:
    """Explicit description of one moving instance (tests pin scenes with this)."""

    kind: str  # "rect" | "disk"
    center: tuple[float, float]  # (x, y) at the window start
    half_size: tuple[float, float]  # (hx, hy) at the window start
    window: tuple[int, int]  # inclusive (first, last) visible frame
    velocity: tuple[float, float] = (0.0, 0.0)
    half_size_end: tuple[float, float] | None = None  # linear size change over the window


@dataclass(frozen=True)
class SynthConfig:
    length: int = 20
    image_size: int = 56
    num_instances: int | tuple[int, int] = (1, 4)
    motion: str = "mixed"
    noise_rate: float = 0.0
    noise_count: int | None = None
    duplicate_rate: float = 0.0
    detection_rate: float = 1.0
    jitter: int = 1
    # dense enough that +-1px detection jitter cannot pull the point-mask
    # Jaccard of a true match down to the 0.5 boundary on ~12px masks
    grid_spacing: int = 2
    min_window: int = 6
    full_window_prob: float = 0.4
    detection_min_visible_frac: float = 0.3
    detection_min_area: int = 8
    color_channels: int = 4
    instances: tuple[ShapeSpec, ...] | None = None

    def __post_init__(self):
        if self.length < 2:
            raise InputError(f"video length must be >= 2, got {self.length}")
        if self.image_size < 8:
            raise InputError(f"image size must be >= 8, got {self.image_size}")
        if self.motion not in MOTIONS:
            raise InputError(f"unknown motion type {self.motion!r}; one of {MOTIONS}")
        lo, hi = self._instance_range()
        if lo < 1 or hi < lo:
            raise InputError(f"invalid instance count {self.num_instances}")
        if hi > self.color_channels:
            raise InputError(
                f"{hi} instances need at least {hi} color channels, have {self.color_channels}"
            )
        if self.instances is not None and not self.instances:
            raise InputError("explicit instance list must not be empty")

    def _instance_range(self) -> tuple[int, int]:
        if self.instances is not None:
            n = len(self.instances)
            return n, n
        if isinstance(self.num_instances, int):
            return self.num_instances, self.num_instances
        lo, hi = self.num_instances
        return int(lo), int(hi)

    @property
    def feature_dim(self) -> int:
        return self.color_channels + 2  # colors + normalized x/y coordinates


@dataclass(frozen=True, eq=False)
class SyntheticVideo:
    video_id: str
    config: SynthConfig
    seed: int
    frames: np.ndarray  # (T, H, W, C) features
    gt_masks: tuple[dict[int, RleMask], ...]  # per instance: frame -> modal mask
    tracks: tuple[InstanceTrack, ...]  # one per detected single-frame mask
    gt_assignment: tuple[int, ...]  # aligned with tracks; NOISE for junk masks

    @cached_property
    def trackset(self) -> TrackSet:
        return TrackSet(self.video_id, self.config.length, self.tracks)

    @cached_property
    def clip(self) -> VideoClip:
        return VideoClip(self.video_id, self.frames)

    def gt_video_labels(self) -> VideoLabels:
        instances = tuple(
            InstanceLabels(instance_id=i, masks=dict(masks))
            for i, masks in enumerate(self.gt_masks)
            if masks
        )
        return VideoLabels(self.video_id, self.config.length, instances)


# -- geometry ----------------------------------------------------------------

class _Shape:
    """Analytic motion model for one instance: affine center and size in t."""

    def __init__(self, spec: ShapeSpec, length: int):
        self.kind = spec.kind
        self.window = spec.window
        a, b = spec.window
        if not (0 <= a <= b < length):
            raise InputError(f"window {spec.window} outside video of length {length}")
        self._c0 = np.asarray(spec.center, dtype=float)
        self._v = np.asarray(spec.velocity, dtype=float)
        self._h0 = np.asarray(spec.half_size, dtype=float)
        h1 = spec.half_size_end if spec.half_size_end is not None else spec.half_size
        self._dh = (np.asarray(h1, dtype=float) - self._h0) / max(b - a, 1)

    def present(self, t: int) -> bool:
        return self.window[0] <= t <= self.window[1]

    def center(self, t: int) -> np.ndarray:
        return self._c0 + self._v * (t - self.window[0])

    def half(self, t: int) -> np.ndarray:
        return np.maximum(self._h0 + self._dh * (t - self.window[0]), 1.0)

    def rasterize(self, t: int, size: int) -> np.ndarray:
        cx, cy = self.center(t)
        hx, hy = self.half(t)
        ax = np.arange(size) + 0.5
        dx = np.abs(ax[None, :] - cx)  # (1, W) column offsets
        dy = np.abs(ax[:, None] - cy)  # (H, 1) row offsets
        if self.kind == "rect":
            return (dx <= hx) & (dy <= hy)
        return (dx / hx) ** 2 + (dy / hy) ** 2 <= 1.0

    def move_points(self, points: np.ndarray, t0: int, t: int) -> np.ndarray:
        """Carry points rigidly with the instance (translation + axis scaling)."""
        local = (points - self.center(t0)) / self.half(t0)
        return self.center(t) + local * self.half(t)


def _shift_bitmap(bitmap: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(bitmap)
    h, w = bitmap.shape
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = bitmap[src_r, src_c]
    return out


def _binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


# -- scene sampling ----------------------------------------------------------

def _sample_window(cfg: SynthConfig, rng: np.random.Generator) -> tuple[int, int]:
    T = cfg.length
    if rng.random() < cfg.full_window_prob:
        return (0, T - 1)
    min_w = min(cfg.min_window, T)
    start = int(rng.integers(0, T - min_w + 1))
    length = int(rng.integers(min_w, T - start + 1))
    return (start, start + length - 1)


def _sample_center(half: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    lo = half + 1.0
    hi = size - half - 1.0
    return rng.uniform(lo, np.maximum(hi, lo + 1e-6))


def _sample_instances(cfg: SynthConfig, rng: np.random.Generator) -> list[ShapeSpec]:
    lo, hi = cfg._instance_range()
    n = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    motion = cfg.motion
    if motion == "mixed":
        motion = str(rng.choice(["translate", "scale", "occlusion"]))
    specs: list[ShapeSpec] = []
    size = cfg.image_size
    for i in range(n):
        window = _sample_window(cfg, rng)
        kind = str(rng.choice(["rect", "disk"]))
        half0 = rng.uniform(5.5, 10.5, size=2)
        if motion == "occlusion" and n > 1 and i == 0:
            # index 0 is farthest: a static target the others pass in front of
            center = np.array([size / 2.0, size / 2.0]) + rng.uniform(-3, 3, size=2)
            specs.append(ShapeSpec(kind, tuple(center), tuple(half0), (0, cfg.length - 1)))
            continue
        if motion == "occlusion" and n > 1:
            y = size / 2.0 + rng.uniform(-6, 6)
            x0, x1 = half0[0] + 1.0, size - half0[0] - 1.0
            if rng.random() < 0.5:
                x0, x1 = x1, x0
            span = max(window[1] - window[0], 1)
            vel = ((x1 - x0) / span, 0.0)
            specs.append(ShapeSpec(kind, (x0, y), tuple(half0), window, vel))
            continue
        if motion == "scale":
            ratio = rng.uniform(0.6, 1.5)
            hmax = np.maximum(half0, half0 * ratio)
            center = _sample_center(hmax, size, rng)
            specs.append(
                ShapeSpec(kind, tuple(center), tuple(half0), window,
                          half_size_end=tuple(half0 * ratio))
            )
            continue
        # translate (velocity zero for "static")
        start = _sample_center(half0, size, rng)
        if motion == "static":
            vel = np.zeros(2)
        else:
            end = _sample_center(half0, size, rng)
            vel = (end - start) / max(window[1] - window[0], 1)
        specs.append(ShapeSpec(kind, tuple(start), tuple(half0), window, tuple(vel)))
    return specs


# -- generation --------------------------------------------------------------

def synth_generate(config: SynthConfig, seed: int) -> SyntheticVideo:
    """Build one synthetic video; a pure, deterministic function of arguments."""
    rng = np.random.default_rng(seed)
    T, size = config.length, config.image_size

    if config.instances is not None:
        specs = list(config.instances)
    else:
        specs = _sample_instances(config, rng)
    shapes = [_Shape(s, T) for s in specs]
    n = len(shapes)

    # amodal and modal bitmaps per (instance, frame); higher index is nearer
    amodal = [[None] * T for _ in range(n)]
    modal = [[None] * T for _ in range(n)]
    for t in range(T):
        rasters = [sh.rasterize(t, size) if sh.present(t) else None for sh in shapes]
        occluders = np.zeros((size, size), dtype=bool)
        for i in range(n - 1, -1, -1):
            if rasters[i] is None:
                continue
            amodal[i][t] = rasters[i]
            modal[i][t] = rasters[i] & ~occluders
            occluders |= rasters[i]

    gt_masks: list[dict[int, RleMask]] = [{} for _ in range(n)]
    for i in range(n):
        for t in range(T):
            if modal[i][t] is not None and modal[i][t].any():
                gt_masks[i][t] = rle_encode(modal[i][t])

    # per-frame detections with controlled jitter (plus optional duplicates)
    detections: list[tuple[int, int, np.ndarray]] = []  # (instance, frame, bitmap)
    for t in range(T):
        for i in range(n):
            vis = modal[i][t]
            if vis is None or not vis.any():
                continue
            if vis.sum() < max(config.detection_min_area,
                               config.detection_min_visible_frac * amodal[i][t].sum()):
                continue
            if rng.random() >= config.detection_rate:
                continue
            copies = 2 if rng.random() < config.duplicate_rate else 1
            for _ in range(copies):
                detections.append((i, t, _jittered(vis, config.jitter, rng)))

    n_noise = (
        config.noise_count
        if config.noise_count is not None
        else int(round(config.noise_rate * len(detections)))
    )
    noise = [_make_noise_mask(amodal, config, rng) for _ in range(n_noise)]

    tracks: list[InstanceTrack] = []
    assignment: list[int] = []
    video_id = f"synth-{seed:05d}"
    for i, t0, bitmap in detections:
        tracks.append(_real_track(video_id, shapes, i, t0, bitmap, config))
        assignment.append(i)
    for t0, bitmap in noise:
        tracks.append(_noise_track(video_id, t0, bitmap, config, rng))
        assignment.append(NOISE)

    frames = _render_features(shapes, config)
    return SyntheticVideo(
        video_id=video_id,
        config=config,
        seed=seed,
        frames=frames,
        gt_masks=tuple(gt_masks),
        tracks=tuple(tracks),
        gt_assignment=tuple(assignment),
    )


def _jittered(modal_bitmap: np.ndarray, jitter: int, rng: np.random.Generator) -> np.ndarray:
    if jitter <= 0:
        return modal_bitmap
    dx, dy = (int(v) for v in rng.integers(-jitter, jitter + 1, size=2))
    shifted = _shift_bitmap(modal_bitmap, dx, dy)
    # the detector stand-in stays within IoU 0.5 of the true mask
    if shifted.any() and _binary_iou(shifted, modal_bitmap) >= 0.5:
        return shifted
    return modal_bitmap


def _make_noise_mask(amodal, config: SynthConfig, rng: np.random.Generator):
    size, T = config.image_size, config.length
    n = len(amodal)
    for _ in range(20):
        half = rng.uniform(1.5, 3.5, size=2)
        center = _sample_center(half, size, rng)
        t0 = int(rng.integers(0, T))
        ax = np.arange(size) + 0.5
        bitmap = (np.abs(ax[None, :] - center[0]) <= half[0]) & (
            np.abs(ax[:, None] - center[1]) <= half[1]
        )
        occupied = np.zeros((size, size), dtype=bool)
        for i in range(n):
            if amodal[i][t0] is not None:
                occupied |= amodal[i][t0]
        if (bitmap & occupied).sum() < 0.5 * bitmap.sum():
            break
    return t0, bitmap


def _real_track(video_id, shapes, i, t0, bitmap, config: SynthConfig) -> InstanceTrack:
    shape = shapes[i]
    T, size = config.length, config.image_size
    points = init_point_grid(rle_encode(bitmap), config.grid_spacing)
    coords = np.stack([shape.move_points(points, t0, t) for t in range(T)], axis=1)
    visible = np.zeros((len(points), T), dtype=bool)
    for t in range(T):
        if not shape.present(t):
            continue
        xy = coords[:, t]
        px = np.floor(xy[:, 0]).astype(int)
        py = np.floor(xy[:, 1]).astype(int)
        ok = (px >= 0) & (px < size) & (py >= 0) & (py < size)
        vis_t = ok.copy()
        for j in range(i + 1, len(shapes)):  # nearer instances occlude
            if not shapes[j].present(t):
                continue
            occ = shapes[j].rasterize(t, size)
            vis_t[ok] &= ~occ[py[ok], px[ok]]
        visible[:, t] = vis_t
    visible[:, t0] = True  # the tracker sees whatever it was initialized on
    trajectories = tuple(Trajectory(coords[k], visible[k]) for k in range(len(points)))
    return InstanceTrack(video_id, t0, rle_encode(bitmap), trajectories)


def _noise_track(video_id, t0, bitmap, config: SynthConfig, rng) -> InstanceTrack:
    """Spurious detection: static points with a random flickering visibility."""
    T = config.length
    points = init_point_grid(rle_encode(bitmap), config.grid_spacing)
    k = int(rng.integers(3, max(4, int(0.6 * T)) + 1))
    k = min(k, T)
    others = [t for t in range(T) if t != t0]
    support = {t0, *(int(t) for t in rng.choice(others, size=k - 1, replace=False))}
    visible_row = np.array([t in support for t in range(T)])
    coords = np.repeat(points[:, None, :], T, axis=1)
    trajectories = tuple(
        Trajectory(coords[j], visible_row.copy()) for j in range(len(points))
    )
    return InstanceTrack(video_id, t0, rle_encode(bitmap), trajectories)


def _render_features(shapes, config: SynthConfig) -> np.ndarray:
    T, size, C = config.length, config.image_size, config.feature_dim
    frames = np.zeros((T, size, size, C))
    ax = (np.arange(size) + 0.5) / size
    frames[:, :, :, config.color_channels] = ax[None, None, :]  # x / width
    frames[:, :, :, config.color_channels + 1] = ax[None, :, None]  # y / height
    for t in range(T):
        for i, shape in enumerate(shapes):  # later (nearer) instances overwrite
            if not shape.present(t):
                continue
            region = shape.rasterize(t, size)
            frames[t, region, : config.color_channels] = 0.0
            frames[t, region, i % config.color_channels] = 1.0
    return frames


# -- dataset assembly --------------------------------------------------------

def generate_suite(config: SynthConfig, seeds) -> list[SyntheticVideo]:
    return [synth_generate(config, int(seed)) for seed in seeds]


def save_video_files(video: SyntheticVideo, out_dir: str | Path) -> None:
    from .tracks import save_trackset

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_trackset(video.trackset, out_dir / f"{video.video_id}.tracks.json")
    with open(out_dir / f"{video.video_id}.features.npy", "wb") as fh:
        np.save(fh, video.frames)
