import numpy as np
import pytest

from probfuse.synth import (
    SceneError,
    apply_noise,
    generate_scene,
    inject_boundary_noise,
    load_scene,
    permute_ids,
    save_scene,
    split_instances,
)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(k_instances=6, n_views=4, canvas_size=(40, 36), window_size=(30, 28), seed=3)


def assert_views_equal(a, b):
    for va, vb in zip(a.views, b.views):
        for attr in ("correspondence", "instance_mask", "semantic_mask", "gt_instance_mask"):
            np.testing.assert_array_equal(getattr(va, attr), getattr(vb, attr))
        assert va.offset == vb.offset


def test_scene_structure(scene):
    assert scene.n_instances == 6
    assert len(scene.views) == 4
    seen = np.zeros(7, int)
    for v in scene.views:
        assert v.correspondence.shape == (28, 30)
        fg = v.correspondence >= 0
        # before noise: observed mask is nonzero exactly where a point is visible
        np.testing.assert_array_equal(v.instance_mask > 0, fg)
        np.testing.assert_array_equal(v.instance_mask, v.gt_instance_mask)
        np.testing.assert_array_equal(v.gt_instance_mask[fg], scene.point_instance[v.correspondence[fg]])
        seen[np.unique(v.gt_instance_mask)] += 1
    assert np.all(seen[1:] >= 2)


def test_points_follow_canvas_geometry(scene):
    for v in scene.views:
        ox, oy = v.offset
        ys, xs = np.nonzero(v.correspondence >= 0)
        pts = v.correspondence[ys, xs]
        np.testing.assert_array_equal(scene.point_xy[pts], np.stack([xs + ox, ys + oy], axis=1))


def test_round_robin_classes(scene):
    np.testing.assert_array_equal(scene.point_class, (scene.point_instance - 1) % 3 + 1)


def test_same_seed_same_scene(scene):
    again = generate_scene(k_instances=6, n_views=4, canvas_size=(40, 36), window_size=(30, 28), seed=3)
    assert_views_equal(scene, again)
    np.testing.assert_array_equal(scene.point_xy, again.point_xy)


def test_single_instance_views():
    s = generate_scene(k_instances=1, n_views=3, canvas_size=(20, 20), window_size=(16, 16), seed=0)
    for v in s.views:
        assert np.unique(v.instance_mask[v.instance_mask > 0]).size <= 1


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(k_instances=0),
        dict(n_views=1),
        dict(window_size=(80, 10)),
        dict(k_instances=200, canvas_size=(20, 20), window_size=(10, 10), max_tries=50),
    ],
)
def test_generation_errors(kwargs):
    with pytest.raises(SceneError):
        generate_scene(**kwargs)


def test_permute_is_bijection_on_present_ids(scene):
    v = scene.views[0]
    p = permute_ids(v, 5)
    ids = np.unique(v.instance_mask[v.instance_mask > 0])
    np.testing.assert_array_equal(np.unique(p.instance_mask[p.instance_mask > 0]), ids)
    np.testing.assert_array_equal(p.instance_mask == 0, v.instance_mask == 0)
    # every original region maps onto exactly one new ID and back: invert it
    inverse = {int(p.instance_mask[v.instance_mask == i][0]): int(i) for i in ids}
    restored = np.vectorize(lambda x: inverse.get(int(x), 0))(p.instance_mask)
    np.testing.assert_array_equal(restored, v.instance_mask)
    np.testing.assert_array_equal(p.gt_instance_mask, v.gt_instance_mask)


def test_split_probability_zero_and_one(scene):
    v = scene.views[1]
    np.testing.assert_array_equal(split_instances(v, 0.0, 1).instance_mask, v.instance_mask)
    s = split_instances(v, 1.0, 1)
    for i in np.unique(v.instance_mask[v.instance_mask > 0]):
        region = v.instance_mask == i
        assert np.unique(s.instance_mask[region]).size == 2
    np.testing.assert_array_equal(s.instance_mask > 0, v.instance_mask > 0)
    np.testing.assert_array_equal(s.correspondence, v.correspondence)
    with pytest.raises(ValueError):
        split_instances(v, 1.5, 0)


def test_one_pixel_instance_never_splits(scene):
    from dataclasses import replace

    v = scene.views[0]
    tiny = np.zeros_like(v.instance_mask)
    tiny[3, 4] = 9
    out = split_instances(replace(v, instance_mask=tiny), 1.0, 0)
    np.testing.assert_array_equal(out.instance_mask, tiny)


def test_boundary_noise_identities(scene):
    v = scene.views[2]
    np.testing.assert_array_equal(inject_boundary_noise(v, 100, 1, 0).instance_mask, v.instance_mask)
    np.testing.assert_array_equal(inject_boundary_noise(v, 0, 9, 0).instance_mask, v.instance_mask)
    with pytest.raises(ValueError):
        inject_boundary_noise(v, 10, 4, 0)


def test_boundary_noise_copies_window_labels(scene):
    v = scene.views[2]
    out = inject_boundary_noise(v, 1, 5, 7)
    changed = out.instance_mask != v.instance_mask
    if changed.any():
        ys, xs = np.nonzero(changed)
        assert ys.max() - ys.min() < 5 and xs.max() - xs.min() < 5
        assert np.unique(out.instance_mask[changed]).size == 1
    np.testing.assert_array_equal(out.gt_instance_mask, v.gt_instance_mask)


def test_boundary_noise_replays_by_hand(scene):
    # re-derive the result from the same random stream
    v = scene.views[3]
    w_ = 3
    out = inject_boundary_noise(v, 20, w_, 11)
    rng = np.random.default_rng(11)
    mask = v.instance_mask.copy()
    h, w = mask.shape
    for flat in rng.choice(h * w, size=20, replace=False):
        ay, ax = divmod(int(flat), w)
        y0, y1, x0, x1 = max(ay - 1, 0), min(ay + 2, h), max(ax - 1, 0), min(ax + 2, w)
        val = mask[int(rng.integers(y0, y1)), int(rng.integers(x0, x1))]
        mask[y0:y1, x0:x1] = val
    np.testing.assert_array_equal(out.instance_mask, mask)


def test_apply_noise_deterministic_and_gt_untouched(scene):
    a = apply_noise(scene, permute=True, split_prob=0.3, n_anchors=50, window_w=5, seed=4)
    b = apply_noise(scene, permute=True, split_prob=0.3, n_anchors=50, window_w=5, seed=4)
    assert_views_equal(a, b)
    for va, vs in zip(a.views, scene.views):
        np.testing.assert_array_equal(va.gt_instance_mask, vs.gt_instance_mask)
        np.testing.assert_array_equal(va.correspondence, vs.correspondence)
    assert a.noise["window_w"] == 5
    with pytest.raises(ValueError):
        apply_noise(scene, n_anchors=5, window_w=2)


def test_save_load_roundtrip(scene, tmp_path):
    noisy = apply_noise(scene, permute=True, split_prob=0.5, seed=1)
    save_scene(noisy, tmp_path / "s")
    files = sorted(p.name for p in (tmp_path / "s").iterdir())
    assert "scene.json" in files and len(files) == 1 + 4 * len(scene.views)
    back = load_scene(tmp_path / "s")
    assert_views_equal(noisy, back)
    np.testing.assert_array_equal(back.point_instance, scene.point_instance)
    assert back.noise == noisy.noise
    # correspondence stored as point_id + 1 with 0 = absent
    raw = (tmp_path / "s" / "view_0_corr.pgm").read_bytes()
    assert raw.startswith(b"P5\n")


def test_save_is_byte_identical(scene, tmp_path):
    save_scene(scene, tmp_path / "a")
    save_scene(scene, tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_load_errors_name_the_file(scene, tmp_path):
    save_scene(scene, tmp_path / "s")
    bad = tmp_path / "s" / "view_1_inst.pgm"
    bad.write_bytes(b"P5\n3 3\n255\n" + bytes(9))
    with pytest.raises(SceneError, match="view_1_inst.pgm"):
        load_scene(tmp_path / "s")
    (tmp_path / "s" / "view_1_inst.pgm").unlink()
    with pytest.raises(SceneError, match="view_1_inst.pgm"):
        load_scene(tmp_path / "s")
    with pytest.raises(SceneError, match="scene.json"):
        load_scene(tmp_path / "nowhere")
