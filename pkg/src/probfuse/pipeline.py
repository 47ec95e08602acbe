"""Run configuration and the synth -> train -> cluster -> eval stages.

The CLI is a thin layer over these functions; the acceptance suite calls them
directly so it does not have to go through the file system for every run.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import EmbeddingTable
from .metrics import PanopticMask, PQResult, evaluate_masks, uncertainty_stats
from .mvoa import THRESHOLD_MODES, PrototypeSet, run_mvoa
from .seeding import named_int
from .synth import Scene, apply_noise, generate_scene
from .trainer import TrainConfig, train

KERNEL_MODES = ("probabilistic", "deterministic")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # scene
    k_instances: int = 10
    n_views: int = 6
    canvas_size: tuple[int, int] = (64, 64)
    window_size: tuple[int, int] = (48, 48)
    size_range: tuple[int, int] = (6, 14)
    n_thing_classes: int = 3
    # noise
    permute_ids: bool = False
    split_prob: float = 0.0
    anchors: int = 0
    window: int = 3
    # training; "kernel" and "fixed_sigma2" decide TrainConfig.fixed_sigma2
    train: TrainConfig = field(default_factory=TrainConfig)
    kernel: str = "probabilistic"
    fixed_sigma2: float = 1.0
    # clustering / evaluation
    threshold: float | None = None
    threshold_mode: str = "midpoint"
    band_radius: int = 2
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be an odd integer >= 1, got {self.window}")
        if not 0.0 <= self.split_prob <= 1.0:
            raise ConfigError("split_prob must lie in [0, 1]")
        if self.anchors < 0:
            raise ConfigError("anchors must be >= 0")
        if self.kernel not in KERNEL_MODES:
            raise ConfigError(f"kernel must be one of {KERNEL_MODES}")
        if not self.fixed_sigma2 > 0:
            raise ConfigError("fixed_sigma2 must be positive")
        if self.threshold is not None and not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.band_radius < 0:
            raise ConfigError("band_radius must be >= 0")
        try:
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def train_config(self) -> TrainConfig:
        sigma2 = self.fixed_sigma2 if self.kernel == "deterministic" else None
        return dataclasses.replace(self.train, fixed_sigma2=sigma2, seed=self.seed)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["train"] = self.train_config().to_dict()
        for key in ("canvas_size", "window_size", "size_range"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        """Build from a (possibly partial) dict; unknown keys are rejected."""
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(data)
        if "train" in kwargs:
            train_data = dict(kwargs["train"])
            train_known = {f.name for f in dataclasses.fields(TrainConfig)}
            bad = sorted(set(train_data) - train_known)
            if bad:
                raise ConfigError(f"unknown train config keys: {', '.join(bad)}")
            # seed and frozen variance come from the top level
            train_data.pop("seed", None)
            train_data.pop("fixed_sigma2", None)
            kwargs["train"] = TrainConfig(**train_data)
        for key in ("canvas_size", "window_size", "size_range"):
            if key in kwargs:
                kwargs[key] = tuple(int(x) for x in kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def build_scene(config: RunConfig) -> Scene:
    scene = generate_scene(
        k_instances=config.k_instances,
        n_views=config.n_views,
        canvas_size=config.canvas_size,
        window_size=config.window_size,
        seed=named_int(config.seed, "scene"),
        size_range=config.size_range,
        n_thing_classes=config.n_thing_classes,
    )
    noisy = config.permute_ids or config.split_prob > 0 or config.anchors > 0
    if not noisy:
        return scene
    return apply_noise(
        scene,
        permute=config.permute_ids,
        split_prob=config.split_prob,
        n_anchors=config.anchors,
        window_w=config.window,
        seed=named_int(config.seed, "noise"),
    )


def train_scene(scene: Scene, config: RunConfig):
    return train(scene, config.train_config())


def cluster_scene(scene: Scene, table: EmbeddingTable, config: RunConfig) -> tuple[PrototypeSet, list[PanopticMask]]:
    if table.n_points != scene.n_points:
        raise ValueError(f"checkpoint has {table.n_points} points but the scene has {scene.n_points}")
    return run_mvoa(
        scene,
        table,
        threshold_mode=config.threshold_mode,
        threshold_override=config.threshold,
        average_mode=config.train.average_mode,
        threads=config.threads,
    )


def gt_masks(scene: Scene) -> list[PanopticMask]:
    # thing pixels carry the class of their point, so the observed semantic mask is exact
    return [PanopticMask(v.semantic_mask, v.gt_instance_mask) for v in scene.views]


def evaluate_scene(scene: Scene, masks: list[PanopticMask]) -> PQResult:
    return evaluate_masks(masks, gt_masks(scene))


@dataclass
class RunResult:
    scene: Scene
    table: EmbeddingTable
    history: list[dict]
    prototypes: PrototypeSet
    masks: list[PanopticMask]
    metrics: PQResult

    def uncertainty(self, band_radius: int = 2):
        return uncertainty_stats(self.scene, self.table, band_radius)


def run_pipeline(config: RunConfig) -> RunResult:
    config.validate()
    scene = build_scene(config)
    table, history = train_scene(scene, config)
    protos, masks = cluster_scene(scene, table, config)
    return RunResult(scene, table, history, protos, masks, evaluate_scene(scene, masks))


def write_loss_log(history: list[dict], path) -> None:
    cols = ("epoch", "pixel_contra", "concen", "cross", "reg", "total")
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join([str(row["epoch"])] + [repr(float(row[c])) for c in cols[1:]]))
    Path(path).write_text("\n".join(lines) + "\n")


def dump_json(data, path) -> None:
    def fix(obj):
        if isinstance(obj, float) and not math.isfinite(obj):
            return None
        if isinstance(obj, dict):
            return {k: fix(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [fix(v) for v in obj]
        if isinstance(obj, np.generic):
            return obj.item()
        return obj

    Path(path).write_text(json.dumps(fix(data), indent=1, sort_keys=True) + "\n")
