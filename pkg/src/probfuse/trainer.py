"""Optimization of the per-point embedding table.

The table stands in for a neural instance field: a pixel's embedding is the
table row of the point it sees, so "rendering" a view is a lookup.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import LOG_VAR_MAX, LOG_VAR_MIN, EmbeddingTable
from .loss import AVERAGE_MODES, LossBreakdown, SampleBatch, mine_cross_view_pairs, total_loss
from .seeding import named_rng
from .synth import Scene

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
HISTORY_FIELDS = ("pixel_contra", "concen", "cross", "reg", "total")


@dataclass
class TrainConfig:
    n_dims: int = 3
    epochs: int = 40
    cross_view_epochs: int | None = None  # None -> 20% of epochs
    batch_pixels: int = 256
    steps_per_view: int | None = None  # None -> enough to cover the view's foreground once
    learning_rate: float = 1e-2
    tau: float = 0.9
    w_cross: float = 0.05
    w_reg: float = 0.001
    optimizer: str = "adam"
    average_mode: str = "parameter"
    init_scale: float = 0.1
    fixed_sigma2: float | None = None  # set -> isotropic variance frozen at this value
    seed: int = 0

    @property
    def n_cross_view_epochs(self) -> int:
        if self.cross_view_epochs is None:
            return int(round(0.2 * self.epochs))
        return self.cross_view_epochs

    def validate(self) -> None:
        if self.n_dims < 1:
            raise ValueError("n_dims must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.n_cross_view_epochs <= self.epochs:
            raise ValueError("cross_view_epochs must lie in [0, epochs]")
        if self.batch_pixels < 2:
            raise ValueError("batch_pixels must be >= 2")
        if self.steps_per_view is not None and self.steps_per_view < 1:
            raise ValueError("steps_per_view must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.w_cross < 0 or self.w_reg < 0:
            raise ValueError("loss weights must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.average_mode not in AVERAGE_MODES:
            raise ValueError(f"average_mode must be one of {AVERAGE_MODES}")
        if self.fixed_sigma2 is not None and not self.fixed_sigma2 > 0:
            raise ValueError("fixed_sigma2 must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def init_table(scene: Scene, config: TrainConfig) -> EmbeddingTable:
    """Means ~ N(0, init_scale^2) from the config seed; unit variance (or the frozen value)."""
    if scene.n_points < 1:
        raise ValueError("scene has no points")
    rng = named_rng(config.seed, "init")
    mu = rng.normal(0.0, config.init_scale, size=(scene.n_points, config.n_dims))
    lv0 = 0.0 if config.fixed_sigma2 is None else math.log(config.fixed_sigma2)
    return EmbeddingTable(mu, np.full_like(mu, lv0))


def _foreground_pixels(scene: Scene, view_id: int) -> tuple[np.ndarray, np.ndarray]:
    view = scene.view(view_id)
    ok = view.correspondence >= 0
    return view.correspondence[ok], view.instance_mask[ok]


def sample_batch(scene: Scene, view_id: int, k: int, rng: np.random.Generator, _cache=None) -> SampleBatch:
    """Draw up to ``k`` foreground pixels of one view without replacement.

    Background pixels (no corresponding point) are never sampled.  A foreground
    pixel whose observed ID is 0 keeps that label.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    points, ids = _cache[view_id] if _cache is not None else _foreground_pixels(scene, view_id)
    if points.size == 0:
        raise ValueError(f"view {view_id} has no foreground pixels")
    if points.size <= k:
        idx = rng.permutation(points.size)
    else:
        idx = rng.choice(points.size, size=k, replace=False)
    return SampleBatch(points[idx], ids[idx], view_id)


def lookup_view_embeddings(scene: Scene, view_id: int, table: EmbeddingTable):
    """Per-pixel ``(mu, log_var, present)`` maps; absent pixels hold NaN."""
    corr = scene.view(view_id).correspondence
    present = corr >= 0
    if present.any() and corr.max() >= table.n_points:
        raise ValueError(f"view {view_id} references point {int(corr.max())} but the table has {table.n_points}")
    h, w = corr.shape
    mu = np.full((h, w, table.n_dims), np.nan)
    lv = np.full((h, w, table.n_dims), np.nan)
    mu[present] = table.mu[corr[present]]
    lv[present] = table.log_var[corr[present]]
    return mu, lv, present


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, name, param, grad):
        m, v = self.state.setdefault(name, (np.zeros_like(param), np.zeros_like(param)))
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**self.t)
        v_hat = v / (1 - self.beta2**self.t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def tick(self):
        self.t += 1


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, name, param, grad):
        param -= self.lr * grad

    def tick(self):
        pass


def train(scene: Scene, config: TrainConfig, table: EmbeddingTable | None = None):
    """Optimize the embedding table; returns ``(table, history)``.

    ``history`` holds one dict per epoch with the epoch-mean of each loss term.
    The final ``n_cross_view_epochs`` epochs draw two distinct views per step
    and add the weighted cross-view term; all other epochs use single views.
    """
    config.validate()
    n_cross = config.n_cross_view_epochs if config.w_cross > 0 else 0
    if n_cross > 0 and len(scene.views) < 2:
        raise ValueError("cross-view epochs need a scene with at least 2 views")
    table = init_table(scene, config) if table is None else table.copy()
    if table.n_points != scene.n_points or table.n_dims != config.n_dims:
        raise ValueError("table does not match the scene / config")

    rng = named_rng(config.seed, "sampling")
    cache = {v.view_id: _foreground_pixels(scene, v.view_id) for v in scene.views}
    view_ids = [vid for vid, (pts, _) in cache.items() if pts.size >= 2]
    if not view_ids:
        raise ValueError("no view has at least 2 foreground pixels")
    if config.steps_per_view is None:
        steps = {vid: max(1, math.ceil(cache[vid][0].size / config.batch_pixels)) for vid in view_ids}
    else:
        steps = {vid: config.steps_per_view for vid in view_ids}
    if n_cross > 0 and len(view_ids) < 2:
        raise ValueError("cross-view epochs need at least 2 views with foreground pixels")

    opt = Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)
    learn_var = config.fixed_sigma2 is None
    history = []
    for epoch in range(config.epochs):
        cross = epoch >= config.epochs - n_cross
        sums = dict.fromkeys(HISTORY_FIELDS, 0.0)
        n_steps = 0
        for vid in rng.permutation(view_ids):
            vid = int(vid)
            for _ in range(steps[vid]):
                batches = [sample_batch(scene, vid, config.batch_pixels, rng, cache)]
                pairs = None
                if cross:
                    others = [o for o in view_ids if o != vid]
                    other = others[int(rng.integers(len(others)))]
                    batches.append(sample_batch(scene, other, config.batch_pixels, rng, cache))
                    m, n = batches
                    pairs = mine_cross_view_pairs(
                        (table.mu[m.point_ids], table.log_var[m.point_ids]),
                        (table.mu[n.point_ids], table.log_var[n.point_ids]),
                        config.tau,
                        m.view_id,
                        n.view_id,
                    )
                parts, grad = total_loss(
                    batches, pairs, table, config.w_cross if cross else 0.0, config.w_reg, config.average_mode
                )
                opt.tick()
                opt.step("mu", table.mu, grad.d_mu)
                if learn_var:
                    opt.step("log_var", table.log_var, grad.d_log_var)
                    np.clip(table.log_var, LOG_VAR_MIN, LOG_VAR_MAX, out=table.log_var)
                for key, val in parts.as_dict().items():
                    sums[key] += val
                n_steps += 1
        record = {"epoch": epoch + 1, **{k: v / n_steps for k, v in sums.items()}}
        history.append(record)
        log.debug("epoch %d: %s", epoch + 1, record)
    return table, history


def save_checkpoint(table: EmbeddingTable, path) -> None:
    Path(path).write_text(json.dumps(table.to_dict()) + "\n")


def load_checkpoint(path) -> EmbeddingTable:
    path = Path(path)
    try:
        return EmbeddingTable.from_dict(json.loads(path.read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: invalid checkpoint ({exc})") from exc


__all__ = [
    "TrainConfig",
    "init_table",
    "sample_batch",
    "lookup_view_embeddings",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "LossBreakdown",
]
