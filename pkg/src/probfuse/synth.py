"""Synthetic multi-view scenes with controllable 2D label noise.

A scene is a canvas of non-overlapping axis-aligned rectangles.  Every canvas
cell covered by an instance is one 3D point; views are translation windows
into the canvas, so pixel-to-point correspondences are exact.  Noise only ever
touches a view's observed instance mask; ground truth and correspondences are
left alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .raster import RasterError, read_pgm16, write_pgm16

SCENE_FORMAT = "probfuse-scene/1"


class SceneError(ValueError):
    pass


@dataclass
class View:
    view_id: int
    offset: tuple[int, int]
    correspondence: np.ndarray  # point ID per pixel, -1 where absent
    instance_mask: np.ndarray  # observed view-local IDs, 0 = background
    semantic_mask: np.ndarray
    gt_instance_mask: np.ndarray

    @property
    def height(self) -> int:
        return self.correspondence.shape[0]

    @property
    def width(self) -> int:
        return self.correspondence.shape[1]

    @property
    def foreground(self) -> np.ndarray:
        return self.correspondence >= 0


@dataclass
class Scene:
    canvas_width: int
    canvas_height: int
    point_instance: np.ndarray
    point_class: np.ndarray
    point_xy: np.ndarray
    views: list[View]
    n_thing_classes: int
    seed: int
    noise: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return self.point_instance.size

    @property
    def n_instances(self) -> int:
        return int(self.point_instance.max()) if self.n_points else 0

    def view(self, view_id: int) -> View:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(f"no view with id {view_id}")


def _place_rectangles(rng, k, canvas_w, canvas_h, size_range, max_tries):
    lo, hi = size_range
    grid = np.zeros((canvas_h, canvas_w), dtype=np.int64)
    for inst in range(1, k + 1):
        for _ in range(max_tries):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            if w > canvas_w or h > canvas_h:
                continue
            x = int(rng.integers(0, canvas_w - w + 1))
            y = int(rng.integers(0, canvas_h - h + 1))
            if not grid[y : y + h, x : x + w].any():
                grid[y : y + h, x : x + w] = inst
                break
        else:
            raise SceneError(
                f"could not place instance {inst} of {k} after {max_tries} tries; "
                "use fewer instances, smaller sizes or a bigger canvas"
            )
    return grid


def generate_scene(
    k_instances: int = 10,
    n_views: int = 6,
    canvas_size: tuple[int, int] = (64, 64),
    window_size: tuple[int, int] = (48, 48),
    seed: int = 0,
    size_range: tuple[int, int] = (6, 14),
    n_thing_classes: int = 3,
    max_tries: int = 2000,
) -> Scene:
    """Place ``k_instances`` rectangles and cut ``n_views`` translation windows.

    Views are redrawn until every instance has at least one pixel in two views.
    """
    canvas_w, canvas_h = canvas_size
    win_w, win_h = window_size
    if k_instances < 1:
        raise SceneError("k_instances must be >= 1")
    if n_views < 2:
        raise SceneError("n_views must be >= 2")
    if win_w > canvas_w or win_h > canvas_h or win_w < 1 or win_h < 1:
        raise SceneError("view window must fit inside the canvas")
    if size_range[0] < 1 or size_range[0] > size_range[1]:
        raise SceneError("invalid instance size range")

    rng = np.random.default_rng(seed)
    grid = _place_rectangles(rng, k_instances, canvas_w, canvas_h, size_range, max_tries)

    ys, xs = np.nonzero(grid)
    point_grid = np.full(grid.shape, -1, dtype=np.int64)
    point_grid[ys, xs] = np.arange(ys.size)
    point_instance = grid[ys, xs]
    point_class = (point_instance - 1) % n_thing_classes + 1
    class_grid = np.zeros_like(grid)
    class_grid[ys, xs] = point_class

    for _ in range(max_tries):
        offsets = [
            (int(rng.integers(0, canvas_w - win_w + 1)), int(rng.integers(0, canvas_h - win_h + 1)))
            for _ in range(n_views)
        ]
        seen = np.zeros(k_instances + 1, dtype=np.int64)
        for ox, oy in offsets:
            seen[np.unique(grid[oy : oy + win_h, ox : ox + win_w])] += 1
        if np.all(seen[1:] >= 2):
            break
    else:
        raise SceneError("could not find views showing every instance twice; use larger windows or more views")

    views = []
    for vid, (ox, oy) in enumerate(offsets):
        sl = (slice(oy, oy + win_h), slice(ox, ox + win_w))
        gt = grid[sl].copy()
        views.append(
            View(
                view_id=vid,
                offset=(ox, oy),
                correspondence=point_grid[sl].copy(),
                instance_mask=gt.copy(),
                semantic_mask=class_grid[sl].copy(),
                gt_instance_mask=gt,
            )
        )
    return Scene(
        canvas_width=canvas_w,
        canvas_height=canvas_h,
        point_instance=point_instance,
        point_class=point_class,
        point_xy=np.stack([xs, ys], axis=1),
        views=views,
        n_thing_classes=n_thing_classes,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Noise protocols
# ---------------------------------------------------------------------------


def permute_ids(view: View, seed) -> View:
    """Relabel the view's nonzero instance IDs with a random bijection onto the same ID set."""
    rng = np.random.default_rng(seed)
    mask = view.instance_mask
    ids = np.unique(mask[mask > 0])
    lut = {int(a): int(b) for a, b in zip(ids, rng.permutation(ids))}
    out = mask.copy()
    for a, b in lut.items():
        out[mask == a] = b
    return replace(view, instance_mask=out)


def split_instances(view: View, split_probability: float, seed) -> View:
    """Independently split each instance in two along a random axis-aligned line."""
    if not 0.0 <= split_probability <= 1.0:
        raise ValueError("split_probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    mask = view.instance_mask
    out = mask.copy()
    next_id = int(mask.max()) + 1
    for inst in np.unique(mask[mask > 0]):
        if rng.random() >= split_probability:
            continue
        ys, xs = np.nonzero(mask == inst)
        axes = [c for c in (ys, xs) if np.unique(c).size >= 2]
        if not axes:
            continue
        coords = axes[int(rng.integers(len(axes)))]
        levels = np.unique(coords)
        cut = levels[int(rng.integers(1, levels.size))]
        upper = coords >= cut
        out[ys[upper], xs[upper]] = next_id
        next_id += 1
    return replace(view, instance_mask=out)


def inject_boundary_noise(view: View, n_anchors: int = 100, window_w: int = 3, seed=None) -> View:
    """Anchor-window label corruption.

    For each anchor, one pixel is drawn inside the ``window_w`` square around it
    (clipped at the border) and its ID is copied over the whole window.  Anchors
    are applied in draw order, so later windows overwrite earlier ones.
    """
    if window_w < 1 or window_w % 2 == 0:
        raise ValueError(f"window_w must be odd and >= 1, got {window_w}")
    if n_anchors < 0:
        raise ValueError("n_anchors must be >= 0")
    rng = np.random.default_rng(seed)
    out = view.instance_mask.copy()
    h, w = out.shape
    n = min(n_anchors, h * w)
    r = window_w // 2
    for flat in rng.choice(h * w, size=n, replace=False):
        ay, ax = divmod(int(flat), w)
        y0, y1 = max(ay - r, 0), min(ay + r + 1, h)
        x0, x1 = max(ax - r, 0), min(ax + r + 1, w)
        py = int(rng.integers(y0, y1))
        px = int(rng.integers(x0, x1))
        out[y0:y1, x0:x1] = out[py, px]
    return replace(view, instance_mask=out)


def apply_noise(
    scene: Scene,
    permute: bool = False,
    split_prob: float = 0.0,
    n_anchors: int = 0,
    window_w: int = 3,
    seed: int = 0,
) -> Scene:
    """Apply permute -> split -> boundary noise to every view (fixed order)."""
    if window_w < 1 or window_w % 2 == 0:
        raise ValueError(f"window_w must be odd and >= 1, got {window_w}")
    children = np.random.SeedSequence(seed).spawn(len(scene.views))
    views = []
    for view, ss in zip(scene.views, children):
        rng = np.random.default_rng(ss)
        if permute:
            view = permute_ids(view, rng)
        if split_prob > 0:
            view = split_instances(view, split_prob, rng)
        if n_anchors > 0:
            view = inject_boundary_noise(view, n_anchors, window_w, rng)
        views.append(view)
    noise = {
        "permute": bool(permute),
        "split_prob": float(split_prob),
        "n_anchors": int(n_anchors),
        "window_w": int(window_w),
        "seed": int(seed),
    }
    return replace(scene, views=views, noise=noise)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

_RASTERS = (("corr", "correspondence"), ("inst", "instance_mask"), ("sem", "semantic_mask"), ("gt", "gt_instance_mask"))


def save_scene(scene: Scene, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": SCENE_FORMAT,
        "canvas_width": scene.canvas_width,
        "canvas_height": scene.canvas_height,
        "n_instances": scene.n_instances,
        "n_thing_classes": scene.n_thing_classes,
        "class_table": {"0": "background", **{str(c): f"thing_{c}" for c in range(1, scene.n_thing_classes + 1)}},
        "seeds": {"scene": scene.seed, "noise": scene.noise.get("seed")},
        "noise": scene.noise,
        "points": {
            "instance": scene.point_instance.tolist(),
            "class": scene.point_class.tolist(),
            "x": scene.point_xy[:, 0].tolist(),
            "y": scene.point_xy[:, 1].tolist(),
        },
        "views": [
            {"view_id": v.view_id, "width": v.width, "height": v.height, "offset": list(v.offset)} for v in scene.views
        ],
    }
    (directory / "scene.json").write_text(json.dumps(meta, indent=1) + "\n")
    for v in scene.views:
        for suffix, attr in _RASTERS:
            data = getattr(v, attr)
            write_pgm16(directory / f"view_{v.view_id}_{suffix}.pgm", data + 1 if suffix == "corr" else data)
    return directory


def load_scene(directory) -> Scene:
    directory = Path(directory)
    meta_path = directory / "scene.json"
    try:
        meta = json.loads(meta_path.read_text())
        points = meta["points"]
        n_points = len(points["instance"])
        views = []
        for vm in meta["views"]:
            vid = int(vm["view_id"])
            arrays = {}
            for suffix, attr in _RASTERS:
                path = directory / f"view_{vid}_{suffix}.pgm"
                try:
                    arr = read_pgm16(path)
                except (OSError, RasterError) as exc:
                    raise SceneError(f"{path}: {exc}") from exc
                if arr.shape != (int(vm["height"]), int(vm["width"])):
                    raise SceneError(f"{path}: size {arr.shape[::-1]} does not match scene.json")
                arrays[attr] = arr - 1 if suffix == "corr" else arr
            if arrays["correspondence"].max() >= n_points:
                raise SceneError(f"{directory / f'view_{vid}_corr.pgm'}: correspondence references a missing point")
            views.append(View(view_id=vid, offset=tuple(vm["offset"]), **arrays))
        return Scene(
            canvas_width=int(meta["canvas_width"]),
            canvas_height=int(meta["canvas_height"]),
            point_instance=np.asarray(points["instance"], dtype=np.int64),
            point_class=np.asarray(points["class"], dtype=np.int64),
            point_xy=np.stack([np.asarray(points["x"], dtype=np.int64), np.asarray(points["y"], dtype=np.int64)], axis=1)
            if n_points
            else np.zeros((0, 2), dtype=np.int64),
            views=views,
            n_thing_classes=int(meta["n_thing_classes"]),
            seed=int(meta["seeds"]["scene"]),
            noise=meta.get("noise", {}),
        )
    except SceneError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise SceneError(f"{meta_path}: {exc}") from exc
