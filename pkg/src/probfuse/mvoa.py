"""Multi-view object association.

Per-view instance groups are averaged into single Gaussian features, scored by
how concentrated their members are, and reduced to a prototype set by a greedy
score-ordered suppression much like non-maximum suppression.  Pixels are then
labelled with the index of their most similar prototype.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EmbeddingTable, GaussianEmbedding, log_pp_kernel_arrays, pairwise_kernel, pairwise_log_kernel
from .loss import _group_means
from .metrics import PanopticMask
from .synth import Scene, View

THRESHOLD_MODES = ("mean_of_means", "pooled", "midpoint")


@dataclass(frozen=True)
class GroupedFeature:
    embedding: GaussianEmbedding
    score: float
    view_id: int
    local_instance_id: int

    @property
    def sort_key(self):
        return (-self.score, self.view_id, self.local_instance_id)


@dataclass
class SimilarityGraph:
    nodes: list[GroupedFeature]
    edges: np.ndarray


@dataclass
class PrototypeSet:
    """Selected prototypes; the global instance ID of ``prototypes[i]`` is ``i + 1``."""

    prototypes: list[GaussianEmbedding]
    sources: list[tuple[int, int]]  # (view_id, local_instance_id) of each selected feature
    threshold: float | None = None

    def __len__(self) -> int:
        return len(self.prototypes)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return np.stack([p.mu for p in self.prototypes]), np.stack([p.log_var for p in self.prototypes])

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "prototypes": [
                {**p.to_dict(), "source_view": v, "source_instance": i}
                for p, (v, i) in zip(self.prototypes, self.sources)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> PrototypeSet:
        protos = [GaussianEmbedding(p["mu"], p["log_var"]) for p in data["prototypes"]]
        sources = [(int(p.get("source_view", -1)), int(p.get("source_instance", -1))) for p in data["prototypes"]]
        return cls(protos, sources, data.get("threshold"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> PrototypeSet:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _group_view(view: View, table: EmbeddingTable, mode: str) -> list[GroupedFeature]:
    ok = (view.correspondence >= 0) & (view.instance_mask > 0)
    if not ok.any():
        return []
    pts = view.correspondence[ok]
    ids = view.instance_mask[ok]
    if pts.max() >= table.n_points:
        raise ValueError(f"view {view.view_id} references a point outside the table")
    uniq, inverse = np.unique(ids, return_inverse=True)
    inverse = inverse.reshape(-1)
    mu, lv = table.mu[pts], table.log_var[pts]
    mu_bar, lv_bar, counts, *_ = _group_means(mu, lv, inverse, uniq.size, mode)
    k = np.exp(log_pp_kernel_arrays(mu_bar[inverse], lv_bar[inverse], mu, lv))
    scores = np.bincount(inverse, weights=k, minlength=uniq.size) / counts
    return [
        GroupedFeature(GaussianEmbedding(mu_bar[g], lv_bar[g]), float(scores[g]), view.view_id, int(uniq[g]))
        for g in range(uniq.size)
    ]


def group_instances(scene: Scene, table: EmbeddingTable, mode: str = "parameter", threads: int = 1) -> list[GroupedFeature]:
    """One averaged, scored feature per (view, observed instance ID).

    The score is the mean kernel between the group average and its members.
    Output is ordered by view then local ID regardless of ``threads``.
    """
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_view = list(pool.map(lambda v: _group_view(v, table, mode), scene.views))
    else:
        per_view = [_group_view(v, table, mode) for v in scene.views]
    return [f for feats in per_view for f in feats]


def _stack(features: Sequence[GroupedFeature]):
    return (
        np.stack([f.embedding.mu for f in features]),
        np.stack([f.embedding.log_var for f in features]),
    )


def build_similarity_graph(features: Sequence[GroupedFeature]) -> SimilarityGraph:
    if len(features) == 0:
        raise ValueError("cannot build a similarity graph without features")
    mu, lv = _stack(features)
    edges = pairwise_kernel(mu, lv, mu, lv)
    np.fill_diagonal(edges, 1.0)
    return SimilarityGraph(list(features), edges)


def _within_view_kernels(features: Sequence[GroupedFeature]) -> dict[int, np.ndarray]:
    by_view: dict[int, list[GroupedFeature]] = {}
    for f in features:
        by_view.setdefault(f.view_id, []).append(f)
    out = {}
    for vid, feats in sorted(by_view.items()):
        if len(feats) < 2:
            continue
        mu, lv = _stack(feats)
        k = pairwise_kernel(mu, lv, mu, lv)
        out[vid] = k[np.triu_indices(len(feats), 1)]
    return out


def compute_threshold(
    features: Sequence[GroupedFeature], mode: str = "mean_of_means", override: float | None = None
) -> float:
    """Suppression threshold from the similarity of grouped features that share a view.

    ``mean_of_means`` averages the per-view mean pairwise kernel; ``pooled``
    averages all within-view pairs at once; ``midpoint`` lies halfway between
    the ``mean_of_means`` value and the mean concentration score of the
    features.  ``override`` short-circuits the computation.
    """
    if override is not None:
        if not 0.0 < override < 1.0:
            raise ValueError("threshold override must lie in (0, 1)")
        return float(override)
    if mode not in THRESHOLD_MODES:
        raise ValueError(f"unknown threshold mode {mode!r}; expected one of {THRESHOLD_MODES}")
    per_view = _within_view_kernels(features)
    if not per_view:
        raise ValueError("no view has two or more grouped features; set the threshold manually")
    if mode == "pooled":
        return float(np.mean(np.concatenate(list(per_view.values()))))
    base = float(np.mean([k.mean() for k in per_view.values()]))
    if mode == "midpoint":
        return 0.5 * (base + float(np.mean([f.score for f in features])))
    return base


def select_prototypes(
    features: Sequence[GroupedFeature], graph: SimilarityGraph, threshold: float
) -> PrototypeSet:
    """Greedy prototype extraction.

    Repeatedly take the highest-scoring remaining feature (ties: lowest
    ``(view_id, local_instance_id)``), keep it as a prototype and drop every
    remaining feature whose kernel with it is at least ``threshold``.
    """
    if len(features) != graph.edges.shape[0]:
        raise ValueError("graph does not match the feature list")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    order = sorted(range(len(features)), key=lambda i: features[i].sort_key)
    alive = np.ones(len(features), dtype=bool)
    chosen = []
    for i in order:
        if not alive[i]:
            continue
        chosen.append(i)
        alive[i] = False
        alive &= graph.edges[i] < threshold
    return PrototypeSet(
        [features[i].embedding for i in chosen],
        [(features[i].view_id, features[i].local_instance_id) for i in chosen],
        float(threshold),
    )


def vote_point_semantics(scene: Scene) -> np.ndarray:
    """Per-point majority class over the observed semantic masks (ties -> lowest class)."""
    n_classes = scene.n_thing_classes + 1
    votes = np.zeros((scene.n_points, n_classes), dtype=np.int64)
    for v in scene.views:
        ok = v.correspondence >= 0
        np.add.at(votes, (v.correspondence[ok], np.clip(v.semantic_mask[ok], 0, n_classes - 1)), 1)
    return np.argmax(votes, axis=1)


def assign_point_labels(table: EmbeddingTable, prototypes: PrototypeSet) -> np.ndarray:
    """Global instance ID (1-based prototype index) of the most similar prototype per point."""
    if len(prototypes) == 0:
        raise ValueError("prototype set is empty")
    pmu, plv = prototypes.stacked()
    log_k = pairwise_log_kernel(table.mu, table.log_var, pmu, plv)
    return np.argmax(log_k, axis=1) + 1


def assign_labels(
    scene: Scene,
    view_id: int,
    table: EmbeddingTable,
    prototypes: PrototypeSet,
    semantics: np.ndarray,
    point_labels: np.ndarray | None = None,
) -> PanopticMask:
    """Panoptic prediction for one view.

    Foreground pixels get their voted semantic class and the ID of the most
    similar prototype; everything else is background with instance 0.
    ``point_labels`` may carry a precomputed :func:`assign_point_labels` result.
    """
    if len(prototypes) == 0:
        raise ValueError("prototype set is empty")
    if point_labels is None:
        point_labels = assign_point_labels(table, prototypes)
    corr = scene.view(view_id).correspondence
    present = corr >= 0
    sem = np.zeros(corr.shape, dtype=np.int64)
    inst = np.zeros(corr.shape, dtype=np.int64)
    sem[present] = semantics[corr[present]]
    thing = present & (sem > 0)
    inst[thing] = point_labels[corr[thing]]
    return PanopticMask(sem, inst)


def run_mvoa(
    scene: Scene,
    table: EmbeddingTable,
    threshold_mode: str = "midpoint",
    threshold_override: float | None = None,
    average_mode: str = "parameter",
    threads: int = 1,
) -> tuple[PrototypeSet, list[PanopticMask]]:
    """Extract prototypes once and label every view with them.

    The pipeline uses the ``midpoint`` threshold by default: the plain mean of
    within-view kernels sits below the similarity of distinct instances that
    happen to be close, so it merges them even on clean scenes.
    """
    features = group_instances(scene, table, average_mode, threads)
    if not features:
        raise ValueError("no grouped instance features in any view")
    graph = build_similarity_graph(features)
    threshold = compute_threshold(features, threshold_mode, threshold_override)
    protos = select_prototypes(features, graph, threshold)
    semantics = vote_point_semantics(scene)
    labels = assign_point_labels(table, protos)
    masks = [assign_labels(scene, v.view_id, table, protos, semantics, labels) for v in scene.views]
    return protos, masks
