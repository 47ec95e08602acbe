"""Scene-level panoptic quality and covariance statistics.

Segments are unions of pixels over all views that share a (class, instance)
label, so an object labelled with different IDs in two views yields two
segments and is penalised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

STUFF_CLASSES = frozenset({0})


@dataclass
class PanopticMask:
    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape or self.semantic.ndim != 2:
            raise ValueError("semantic and instance maps must be 2-D and equal in shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.semantic.shape


@dataclass
class SceneSegment:
    semantic_class: int
    instance_id: int
    pixels: np.ndarray  # sorted flat keys view * H * W + y * W + x

    @property
    def area(self) -> int:
        return self.pixels.size


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    per_class: dict[int, dict] = field(default_factory=dict)
    n_tp: int = 0
    n_fp: int = 0
    n_fn: int = 0

    def to_dict(self) -> dict:
        return {
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
            "n_tp": self.n_tp,
            "n_fp": self.n_fp,
            "n_fn": self.n_fn,
        }

    @classmethod
    def from_dict(cls, data: dict) -> PQResult:
        return cls(
            pq=float(data["pq"]),
            sq=float(data["sq"]),
            rq=float(data["rq"]),
            per_class={int(c): v for c, v in data["per_class"].items()},
            n_tp=int(data["n_tp"]),
            n_fp=int(data["n_fp"]),
            n_fn=int(data["n_fn"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def merge_to_scene_segments(masks: Sequence[PanopticMask], stuff_classes=STUFF_CLASSES) -> list[SceneSegment]:
    """Union per-view pixels by (class, instance ID); stuff classes ignore the ID."""
    if not masks:
        raise ValueError("no masks given")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise ValueError("all masks must share dimensions")
    h, w = shape
    sem = np.stack([m.semantic for m in masks]).reshape(-1)
    inst = np.stack([m.instance for m in masks]).reshape(-1)
    inst = np.where(np.isin(sem, list(stuff_classes)), 0, inst)
    keys = sem * (int(inst.max()) + 1) + inst
    order = np.argsort(keys, kind="stable")
    uniq, starts = np.unique(keys[order], return_index=True)
    bounds = list(starts[1:]) + [order.size]
    segments = []
    for key, s, e in zip(uniq, starts, bounds):
        first = order[s]
        segments.append(SceneSegment(int(sem[first]), int(inst[first]), np.sort(order[s:e])))
    return segments


def _iou(a: SceneSegment, b: SceneSegment) -> float:
    inter = np.intersect1d(a.pixels, b.pixels, assume_unique=True).size
    return inter / (a.area + b.area - inter)


def pq_scene(pred: Sequence[SceneSegment], gt: Sequence[SceneSegment], iou_threshold: float = 0.5) -> PQResult:
    """PQ / SQ / RQ averaged over the classes present in the ground truth.

    Pairs of equal class with IoU above the threshold match; with a threshold
    of at least 0.5 such matches are necessarily one-to-one.
    """
    if not gt:
        raise ValueError("ground truth has no segments")
    if iou_threshold < 0.5:
        raise ValueError("matching is only unique for IoU thresholds >= 0.5")
    per_class = {}
    n_tp = n_fp = n_fn = 0
    for c in sorted({s.semantic_class for s in gt}):
        gts = [s for s in gt if s.semantic_class == c]
        preds = [s for s in pred if s.semantic_class == c]
        matched_pred: set[int] = set()
        ious = []
        for g in gts:
            hits = [(j, iou) for j, p in enumerate(preds) if (iou := _iou(g, p)) > iou_threshold]
            assert len(hits) <= 1, "a ground-truth segment matched two predictions"
            if hits:
                j, iou = hits[0]
                assert j not in matched_pred, "a prediction matched two ground-truth segments"
                matched_pred.add(j)
                ious.append(iou)
        tp = len(ious)
        fp = len(preds) - tp
        fn = len(gts) - tp
        sq = float(sum(ious) / tp) if tp else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn)
        per_class[c] = {"pq": sq * rq, "sq": sq, "rq": rq, "tp": tp, "fp": fp, "fn": fn}
        n_tp, n_fp, n_fn = n_tp + tp, n_fp + fp, n_fn + fn
    vals = per_class.values()
    return PQResult(
        pq=float(np.mean([v["pq"] for v in vals])),
        sq=float(np.mean([v["sq"] for v in vals])),
        rq=float(np.mean([v["rq"] for v in vals])),
        per_class=per_class,
        n_tp=n_tp,
        n_fp=n_fp,
        n_fn=n_fn,
    )


def evaluate_masks(pred: Sequence[PanopticMask], gt: Sequence[PanopticMask]) -> PQResult:
    if len(pred) != len(gt):
        raise ValueError("prediction and ground truth cover different view sets")
    return pq_scene(merge_to_scene_segments(pred), merge_to_scene_segments(gt))


@dataclass
class UncertaintyStats:
    bin_edges: np.ndarray  # over log10 of the variance product
    boundary_counts: np.ndarray
    interior_counts: np.ndarray
    boundary_mean: float
    interior_mean: float

    def to_csv(self, path) -> None:
        rows = ["log10_lo,log10_hi,boundary,interior"]
        for lo, hi, b, i in zip(self.bin_edges[:-1], self.bin_edges[1:], self.boundary_counts, self.interior_counts):
            rows.append(f"{lo:.6g},{hi:.6g},{int(b)},{int(i)}")
        rows.append(f"# mean_variance_product,boundary={self.boundary_mean:.9g},interior={self.interior_mean:.9g}")
        Path(path).write_text("\n".join(rows) + "\n")


def boundary_band(gt_instance: np.ndarray, band_radius: int) -> np.ndarray:
    """Pixels within ``band_radius`` (Chebyshev) of a change in ground-truth label."""
    if band_radius <= 0:
        return np.zeros(gt_instance.shape, dtype=bool)
    size = 2 * band_radius + 1
    hi = ndimage.maximum_filter(gt_instance, size=size, mode="nearest")
    lo = ndimage.minimum_filter(gt_instance, size=size, mode="nearest")
    return hi != lo


def uncertainty_stats(scene, table, band_radius: int = 2, bins: int = 30) -> UncertaintyStats:
    """Histograms of the per-pixel variance product near boundaries vs. inside instances."""
    boundary, interior = [], []
    var_prod = table.variance_product()
    for v in scene.views:
        if band_radius >= min(v.width, v.height) / 2:
            raise ValueError("band_radius must be smaller than half the view size")
        fg = v.correspondence >= 0
        band = boundary_band(v.gt_instance_mask, band_radius)
        boundary.append(var_prod[v.correspondence[fg & band]])
        interior.append(var_prod[v.correspondence[fg & ~band]])
    b = np.concatenate(boundary)
    i = np.concatenate(interior)
    logs = np.log10(np.concatenate([b, i]))
    lo, hi = (float(logs.min()), float(logs.max())) if logs.size else (0.0, 1.0)
    edges = np.histogram_bin_edges(logs, bins=bins, range=(lo, hi) if hi > lo else (lo - 0.5, lo + 0.5))
    return UncertaintyStats(
        bin_edges=edges,
        boundary_counts=np.histogram(np.log10(b), edges)[0],
        interior_counts=np.histogram(np.log10(i), edges)[0],
        boundary_mean=float(b.mean()) if b.size else float("nan"),
        interior_mean=float(i.mean()) if i.size else float("nan"),
    )
