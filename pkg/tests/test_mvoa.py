import math

import numpy as np
import pytest

from oracles import alg1_reference
from probfuse.core import EmbeddingTable, GaussianEmbedding, pp_kernel
from probfuse.mvoa import (
    GroupedFeature,
    PrototypeSet,
    SimilarityGraph,
    assign_labels,
    assign_point_labels,
    build_similarity_graph,
    compute_threshold,
    group_instances,
    run_mvoa,
    select_prototypes,
    vote_point_semantics,
)
from probfuse.synth import generate_scene

G = GaussianEmbedding


def feat(mu, score, view, local, lv=None):
    mu = np.atleast_1d(np.asarray(mu, float))
    return GroupedFeature(G(mu, np.zeros_like(mu) if lv is None else lv), score, view, local)


def graph_from(edges, features):
    return SimilarityGraph(list(features), np.asarray(edges, float))


def test_hand_traced_three_features():
    feats = [feat(0.0, 0.9, 0, 1), feat(1.0, 0.8, 0, 2), feat(2.0, 0.7, 1, 1)]
    edges = [[1.0, 0.95, 0.1], [0.95, 1.0, 0.1], [0.1, 0.1, 1.0]]
    protos = select_prototypes(feats, graph_from(edges, feats), 0.5)
    assert protos.sources == [(0, 1), (1, 1)]
    assert alg1_reference([0.9, 0.8, 0.7], edges, 0.5, [(0, 1), (0, 2), (1, 1)]) == [0, 2]


def test_all_similar_gives_one_prototype():
    feats = [feat(0.0, s, 0, i) for i, s in enumerate([0.3, 0.8, 0.5])]
    protos = select_prototypes(feats, graph_from(np.ones((3, 3)), feats), 0.5)
    assert protos.sources == [(0, 1)]


def _random_instance(rng):
    n = int(rng.integers(1, 11))
    keys = sorted({(int(rng.integers(0, 4)), int(rng.integers(1, 6))) for _ in range(n)})
    # coarse scores make ties common
    scores = [float(rng.choice([0.5, 0.6, 0.7, 0.8])) for _ in keys]
    feats = [feat(rng.normal(0, 1, 2), s, v, i, rng.uniform(-1, 1, 2)) for (v, i), s in zip(keys, scores)]
    return feats, keys, scores


def test_matches_reference_simulation_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        feats, keys, scores = _random_instance(rng)
        graph = build_similarity_graph(feats)
        thr = float(rng.uniform(0.05, 0.95))
        want = alg1_reference(scores, graph.edges.tolist(), thr, keys)
        got = select_prototypes(feats, graph, thr)
        assert got.sources == [keys[i] for i in want]


def test_storage_order_does_not_matter():
    rng = np.random.default_rng(1)
    feats, _, _ = _random_instance(rng)
    perm = rng.permutation(len(feats))
    shuffled = [feats[i] for i in perm]
    a = select_prototypes(feats, build_similarity_graph(feats), 0.5)
    b = select_prototypes(shuffled, build_similarity_graph(shuffled), 0.5)
    assert a.sources == b.sources


def test_suppression_soundness_coverage_and_monotonicity():
    rng = np.random.default_rng(2)
    for _ in range(30):
        feats, _, _ = _random_instance(rng)
        graph = build_similarity_graph(feats)
        counts = []
        for thr in (0.2, 0.4, 0.6, 0.8, 0.95):
            protos = select_prototypes(feats, graph, thr)
            chosen = [next(i for i, f in enumerate(feats) if (f.view_id, f.local_instance_id) == s) for s in protos.sources]
            assert len(protos) >= 1
            for i in range(len(feats)):
                if i not in chosen:
                    assert max(graph.edges[i, c] for c in chosen) >= thr
            counts.append(len(protos))
        assert counts == sorted(counts)


def test_select_validates_threshold_and_graph():
    feats = [feat(0.0, 0.5, 0, 1)]
    g = build_similarity_graph(feats)
    assert g.edges.tolist() == [[1.0]]
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            select_prototypes(feats, g, bad)
    with pytest.raises(ValueError):
        select_prototypes(feats + feats, g, 0.5)
    with pytest.raises(ValueError):
        build_similarity_graph([])


def test_graph_is_symmetric_and_matches_scalar_kernel():
    rng = np.random.default_rng(3)
    feats, _, _ = _random_instance(rng)
    g = build_similarity_graph(feats)
    np.testing.assert_array_equal(g.edges, g.edges.T)
    for i, a in enumerate(feats):
        for j, b in enumerate(feats):
            if i != j:
                assert g.edges[i, j] == pytest.approx(pp_kernel(a.embedding, b.embedding), rel=1e-12)


# -- threshold -------------------------------------------------------------------


def _feature_pair_with_kernel(k, view, start=1):
    # 1-D unit variance: K = exp(-d^2 / 8)
    d = math.sqrt(-8.0 * math.log(k))
    return [feat(0.0, 0.9, view, start), feat(d, 0.7, view, start + 1)]


def test_threshold_single_view():
    assert compute_threshold(_feature_pair_with_kernel(0.4, 0)) == pytest.approx(0.4)


def test_threshold_mean_of_means_and_pooled():
    feats = _feature_pair_with_kernel(0.2, 0) + _feature_pair_with_kernel(0.6, 1)
    feats.append(feat(50.0, 0.5, 1, 9))  # view 1 now has three pairs: 0.6, ~0, ~0
    assert compute_threshold(feats) == pytest.approx((0.2 + 0.2) / 2, abs=1e-9)
    assert compute_threshold(feats, "pooled") == pytest.approx((0.2 + 0.6) / 4, abs=1e-9)
    two = _feature_pair_with_kernel(0.2, 0) + _feature_pair_with_kernel(0.6, 1)
    assert compute_threshold(two) == pytest.approx(0.4)


def test_threshold_midpoint_and_override():
    feats = _feature_pair_with_kernel(0.4, 0)
    assert compute_threshold(feats, "midpoint") == pytest.approx(0.5 * (0.4 + 0.8))
    assert compute_threshold(feats, override=0.5) == 0.5
    with pytest.raises(ValueError):
        compute_threshold(feats, override=1.5)
    with pytest.raises(ValueError):
        compute_threshold(feats, "median")


def test_threshold_needs_a_view_with_two_features():
    with pytest.raises(ValueError, match="manually"):
        compute_threshold([feat(0.0, 0.5, 0, 1), feat(0.0, 0.5, 1, 1)])


# -- grouping and labelling ----------------------------------------------------------


@pytest.fixture(scope="module")
def clean_scene():
    return generate_scene(k_instances=4, n_views=3, canvas_size=(24, 24), window_size=(18, 18), seed=5, size_range=(4, 7))


def one_hot_table(scene, scale=10.0):
    n = scene.n_instances
    mu = np.eye(n)[scene.point_instance - 1] * scale
    return EmbeddingTable(mu, np.zeros_like(mu))


def test_grouping_counts_and_scores(clean_scene):
    table = one_hot_table(clean_scene)
    feats = group_instances(clean_scene, table)
    expected = sum(np.unique(v.instance_mask[v.instance_mask > 0]).size for v in clean_scene.views)
    assert len(feats) == expected
    assert all(f.score == pytest.approx(1.0) for f in feats)
    assert [(f.view_id, f.local_instance_id) for f in feats] == sorted((f.view_id, f.local_instance_id) for f in feats)
    threaded = group_instances(clean_scene, table, threads=3)
    assert [(f.view_id, f.local_instance_id, f.score) for f in threaded] == [
        (f.view_id, f.local_instance_id, f.score) for f in feats
    ]


def test_group_score_hand_value():
    from probfuse.synth import Scene, View

    corr = np.array([[0, 1]])
    view = View(0, (0, 0), corr, np.array([[1, 1]]), np.array([[1, 1]]), np.array([[1, 1]]))
    scene = Scene(2, 1, np.array([1, 1]), np.array([1, 1]), np.array([[0, 0], [1, 0]]), [view], 1, 0)
    table = EmbeddingTable([[0.0], [2.0]], [[0.0], [0.0]])
    (f,) = group_instances(scene, table)
    assert f.embedding.mu[0] == pytest.approx(1.0)
    assert f.score == pytest.approx(math.exp(-1 / 8))


def test_one_hot_embeddings_recover_instances(clean_scene):
    table = one_hot_table(clean_scene)
    for thr in (0.01, 0.5, 0.99):
        protos, masks = run_mvoa(clean_scene, table, threshold_override=thr)
        assert len(protos) == clean_scene.n_instances
        for v, m in zip(clean_scene.views, masks):
            fg = v.gt_instance_mask > 0
            # a bijective relabelling of the GT IDs
            pairs = set(zip(v.gt_instance_mask[fg].tolist(), m.instance[fg].tolist()))
            assert len(pairs) == len({a for a, _ in pairs}) == len({b for _, b in pairs})
            np.testing.assert_array_equal(m.instance == 0, ~fg)


def test_assignment_rules():
    table = EmbeddingTable([[0.0], [5.0], [2.5]], [[0.0], [0.0], [0.0]])
    protos = PrototypeSet([G([0.0], [0.0]), G([5.0], [0.0])], [(0, 1), (0, 2)])
    # point 2 is equidistant: lowest prototype index wins
    np.testing.assert_array_equal(assign_point_labels(table, protos), [1, 2, 1])
    single = PrototypeSet([G([9.0], [0.0])], [(0, 1)])
    np.testing.assert_array_equal(assign_point_labels(table, single), [1, 1, 1])
    with pytest.raises(ValueError):
        assign_point_labels(table, PrototypeSet([], []))


def test_assign_labels_background_and_semantics(clean_scene):
    table = one_hot_table(clean_scene)
    protos, _ = run_mvoa(clean_scene, table)
    sem = vote_point_semantics(clean_scene)
    seen = np.zeros(clean_scene.n_points, bool)
    for v in clean_scene.views:
        seen[v.correspondence[v.correspondence >= 0]] = True
    np.testing.assert_array_equal(sem[seen], clean_scene.point_class[seen])
    assert not sem[~seen].any()  # never observed -> no votes -> background
    m = assign_labels(clean_scene, 1, table, protos, sem)
    v = clean_scene.view(1)
    np.testing.assert_array_equal(m.semantic, v.semantic_mask)
    assert m.instance[v.correspondence < 0].max() == 0


def test_prototype_json_roundtrip(tmp_path):
    protos = PrototypeSet([G([0.5, 1.0], [0.0, -1.0])], [(2, 3)], 0.42)
    path = tmp_path / "p.json"
    protos.save(path)
    back = PrototypeSet.load(path)
    assert back.sources == [(2, 3)] and back.threshold == 0.42
    np.testing.assert_array_equal(back.prototypes[0].log_var, [0.0, -1.0])
    import json

    data = json.loads(path.read_text())
    assert set(data["prototypes"][0]) >= {"mu", "log_var"}
