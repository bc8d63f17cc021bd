"""A tiny differentiable mask propagator: per-slot linear pixel scoring.

Each query slot scores every pixel with a linear readout of its feature
vector plus a per-slot, per-frame bias, squashed through a logistic. This is
the minimum architecture that can express per-instance, per-frame masks and
exercise slot-to-annotation matching; it stands in for a full video
segmentation network at desk scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .iojson import SCHEMA_VERSION, atomic_write_bytes, check_schema_version
from .validation import SchemaError


@dataclass(frozen=True, eq=False)
class VideoClip:
    """Per-pixel feature frames of one video, shape (T, H, W, C)."""

    video_id: str
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 4:
            raise ValueError(f"frames must be (T, H, W, C), got shape {frames.shape}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[3]


@dataclass(frozen=True)
class PropagatorSpec:
    """Architecture wiring: slot count, feature channels, bias table length."""

    num_slots: int
    feature_dim: int
    num_frames: int

    def __post_init__(self):
        if min(self.num_slots, self.feature_dim, self.num_frames) < 1:
            raise ValueError(f"invalid propagator spec: {self}")

    @property
    def num_params(self) -> int:
        return self.num_slots * (self.feature_dim + self.num_frames)


class ToyPropagator:
    """Flat parameter vector with weight/bias views and a logistic forward pass."""

    def __init__(self, spec: PropagatorSpec, params: np.ndarray):
        params = np.asarray(params, dtype=float)
        if params.shape != (spec.num_params,):
            raise ValueError(
                f"expected {spec.num_params} parameters, got shape {params.shape}"
            )
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: PropagatorSpec, rng: np.random.Generator, scale: float = 0.01):
        return cls(spec, rng.normal(0.0, scale, size=spec.num_params))

    @property
    def weights(self) -> np.ndarray:
        """(Q, C) per-slot pixel-scoring weights (view into the flat params)."""
        q, c = self.spec.num_slots, self.spec.feature_dim
        return self.params[: q * c].reshape(q, c)

    @property
    def biases(self) -> np.ndarray:
        """(Q, T) per-slot per-frame biases (view into the flat params)."""
        q, c = self.spec.num_slots, self.spec.feature_dim
        return self.params[q * c :].reshape(q, self.spec.num_frames)

    def copy(self) -> "ToyPropagator":
        return ToyPropagator(self.spec, self.params.copy())


def toy_forward(model: ToyPropagator, frames: np.ndarray, frame_indices) -> np.ndarray:
    """Per-slot per-frame foreground probabilities, shape (Q, Tn, H, W)."""
    frames = np.asarray(frames, dtype=float)
    idx = np.asarray(frame_indices, dtype=int)
    if frames.ndim != 4 or frames.shape[0] != idx.shape[0]:
        raise ValueError(f"frames {frames.shape} do not match {idx.shape[0]} frame indices")
    if frames.shape[3] != model.spec.feature_dim:
        raise ValueError(
            f"feature dim {frames.shape[3]} does not match model ({model.spec.feature_dim})"
        )
    if idx.size and not (0 <= idx.min() and idx.max() < model.spec.num_frames):
        raise ValueError("frame index outside the model's bias table")
    scores = np.einsum("qc,thwc->qthw", model.weights, frames)
    scores += model.biases[:, idx][:, :, None, None]
    return 1.0 / (1.0 + np.exp(-scores))


def backprop_params(
    model: ToyPropagator,
    frames: np.ndarray,
    frame_indices,
    probs: np.ndarray,
    grad_probs: np.ndarray,
) -> np.ndarray:
    """Chain a loss gradient w.r.t. probabilities back to the flat parameters."""
    idx = np.asarray(frame_indices, dtype=int)
    grad_scores = grad_probs * probs * (1.0 - probs)
    grad_w = np.einsum("qthw,thwc->qc", grad_scores, frames)
    grad_b = np.zeros_like(model.biases)
    per_frame = grad_scores.sum(axis=(2, 3))
    np.add.at(grad_b, (slice(None), idx), per_frame)
    return np.concatenate([grad_w.ravel(), grad_b.ravel()])


# -- model file format: length-prefixed JSON header + little-endian float64 --

def save_model(model: ToyPropagator, path: str | Path) -> None:
    header = json.dumps(
        {
            "schema_version": SCHEMA_VERSION,
            "num_slots": model.spec.num_slots,
            "feature_dim": model.spec.feature_dim,
            "num_frames": model.spec.num_frames,
        },
        sort_keys=True,
    ).encode("utf-8")
    payload = model.params.astype("<f8").tobytes()
    blob = (
        struct.pack("<Q", len(header))
        + header
        + struct.pack("<Q", model.params.size)
        + payload
    )
    atomic_write_bytes(path, blob)


def load_model(path: str | Path) -> ToyPropagator:
    data = Path(path).read_bytes()
    try:
        (header_len,) = struct.unpack_from("<Q", data, 0)
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
        check_schema_version(header, "model file")
        offset = 8 + header_len
        (count,) = struct.unpack_from("<Q", data, offset)
        params = np.frombuffer(data, dtype="<f8", count=count, offset=offset + 8)
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"corrupt model file {path}: {exc}") from exc
    spec = PropagatorSpec(
        int(header["num_slots"]), int(header["feature_dim"]), int(header["num_frames"])
    )
    return ToyPropagator(spec, params.copy())
