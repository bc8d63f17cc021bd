"""Pipeline configuration: one JSON file drives every CLI stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .discovery import DiscoveryConfig
from .distill import TrainConfig
from .iojson import SCHEMA_VERSION, check_schema_version, dump_json, load_json
from .losses import LossWeights
from .synthetic import ShapeSpec, SynthConfig
from .validation import InputError


@dataclass(frozen=True)
class PipelineConfig:
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    grid_spacing: int = 8
    seed: int = 0

    def to_json(self) -> dict:
        obj = {
            "schema_version": SCHEMA_VERSION,
            "gamma_thr": self.discovery.gamma_thr,
            "lambda_j": self.discovery.lambda_j,
            "grid_spacing": self.grid_spacing,
            "seed": self.seed,
            "visibility_dbscan": {
                "eps_frac": self.discovery.vis_eps_frac,
                "min_pts": self.discovery.vis_min_pts,
            },
            "matching_dbscan": {
                "eps_frac": self.discovery.match_eps_frac,
                "min_pts": self.discovery.match_min_pts,
            },
            "max_overlap_frac": self.discovery.max_overlap_frac,
            "loss_weights": {
                "lambda_ce": self.train.weights.lambda_ce,
                "lambda_dice": self.train.weights.lambda_dice,
            },
            "mu": self.train.mu,
            "train": {
                "learning_rate": self.train.learning_rate,
                "steps": self.train.steps,
                "batch_size": self.train.batch_size,
                "snippet_len": self.train.snippet_len,
                "num_slots": self.train.num_slots,
                "threshold": self.train.threshold,
                "min_area": self.train.min_area,
                "distill_warmup_steps": self.train.distill_warmup_steps,
            },
            "synth": _synth_to_json(self.synth),
        }
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        check_schema_version(obj, "pipeline config")
        try:
            vis = obj.get("visibility_dbscan", {})
            match = obj.get("matching_dbscan", {})
            discovery = DiscoveryConfig(
                gamma_thr=obj.get("gamma_thr", 0.3),
                lambda_j=obj.get("lambda_j", 0.5),
                vis_eps_frac=vis.get("eps_frac", 0.1),
                vis_min_pts=vis.get("min_pts", 3),
                match_eps_frac=match.get("eps_frac", 0.1),
                match_min_pts=match.get("min_pts", 3),
                max_overlap_frac=obj.get("max_overlap_frac", 0.1),
            )
            weights_obj = obj.get("loss_weights", {})
            weights = LossWeights(
                lambda_ce=weights_obj.get("lambda_ce", 5.0),
                lambda_dice=weights_obj.get("lambda_dice", 5.0),
            )
            train_obj = obj.get("train", {})
            train = TrainConfig(
                learning_rate=train_obj.get("learning_rate", 0.1),
                steps=train_obj.get("steps", 2000),
                batch_size=train_obj.get("batch_size", 4),
                mu=obj.get("mu", 0.999),
                weights=weights,
                seed=obj.get("seed", 0),
                snippet_len=train_obj.get("snippet_len", 2),
                num_slots=train_obj.get("num_slots", 8),
                threshold=train_obj.get("threshold", 0.5),
                min_area=train_obj.get("min_area", 10),
                distill_warmup_steps=train_obj.get("distill_warmup_steps", 0),
            )
            synth = _synth_from_json(obj.get("synth", {}))
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid pipeline config: {exc}") from exc
        return cls(
            discovery=discovery,
            train=train,
            synth=synth,
            grid_spacing=int(obj.get("grid_spacing", 8)),
            seed=int(obj.get("seed", 0)),
        )


def _synth_to_json(cfg: SynthConfig) -> dict:
    obj = dataclasses.asdict(cfg)
    if cfg.instances is not None:
        obj["instances"] = [dataclasses.asdict(s) for s in cfg.instances]
    if isinstance(cfg.num_instances, tuple):
        obj["num_instances"] = list(cfg.num_instances)
    return obj


def _synth_from_json(obj: dict) -> SynthConfig:
    kwargs = dict(obj)
    if "num_instances" in kwargs and isinstance(kwargs["num_instances"], list):
        kwargs["num_instances"] = tuple(kwargs["num_instances"])
    if kwargs.get("instances"):
        kwargs["instances"] = tuple(
            ShapeSpec(
                kind=s["kind"],
                center=tuple(s["center"]),
                half_size=tuple(s["half_size"]),
                window=tuple(s["window"]),
                velocity=tuple(s.get("velocity", (0.0, 0.0))),
                half_size_end=tuple(s["half_size_end"]) if s.get("half_size_end") else None,
            )
            for s in kwargs["instances"]
        )
    elif "instances" in kwargs:
        kwargs["instances"] = None
    unknown = set(kwargs) - {f.name for f in dataclasses.fields(SynthConfig)}
    if unknown:
        raise InputError(f"unknown synth config keys: {sorted(unknown)}")
    return SynthConfig(**kwargs)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_json(load_json(path, "pipeline config"))


def save_config(config: PipelineConfig, path: str | Path) -> None:
    dump_json(config.to_json(), path)
