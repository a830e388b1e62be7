from __future__ import annotations

import numpy as np
import pytest
from scipy.special import log_softmax

from ai.neuralnet import BranchMlpSpec, BranchSpec, init_glorot
from config.settings import ClassifierConfig
from processors.geomfeat import Standardizer
from processors.hierarchy import hierarchy_from_template
from processors.mrfseg import (
    FaceClassifier,
    LabeledShape,
    LeafLabelSet,
    SegModel,
    area_accuracy,
    bottom_up_group,
    build_ancestor_table,
    cc_probs,
    deepest_face_labels,
    face_edge_weights,
    load_seg_model,
    marginalized_grad,
    marginalized_loss,
    sampling_weights,
    save_seg_model,
    segment,
    segment_from_probs,
    train_face_classifier,
    xval_lambda,
)
from services.errors import DataError, UsageError
from services.meshio import Mesh, connected_components, face_adjacency, scene_graph_from_dict
from services.synth import box

# table(0) -> top(1), leg(2) -> shaft(3), foot(4); leaves 1, 3, 4
TABLE = {"name": "table", "children": [
    {"name": "top"},
    {"name": "leg", "children": [{"name": "shaft"}, {"name": "foot"}]},
]}

CLASSIFIER = BranchMlpSpec(
    branches=(BranchSpec("all", 4, (8,)),),
    trunk=(8,),
    activate_output=True,
    head=3,
)


@pytest.fixture
def hierarchy():
    return hierarchy_from_template(TABLE)


def _cubes(n: int) -> Mesh:
    vs, fs = [], []
    for i in range(n):
        v, f = box((3.0 * i, 0.0, 0.0), (1.0, 1.0, 1.0), subdiv=1)
        fs.append(f + 8 * i)
        vs.append(v)
    return Mesh(np.vstack(vs), np.vstack(fs))


def _model(hierarchy, lam=1.0) -> SegModel:
    leafset = LeafLabelSet(hierarchy)
    table = build_ancestor_table(np.array([1, 3, 4]), leafset)
    clf = FaceClassifier(init_glorot(CLASSIFIER, seed=0), list(leafset.leaves), Standardizer(np.zeros(4), np.ones(4)))
    return SegModel(clf, hierarchy, table, lam)


def _face_probs(mesh: Mesh, truth_pos: list[int], confidence: float = 0.7) -> np.ndarray:
    comps = connected_components(mesh)
    out = np.full((mesh.n_faces, 3), (1.0 - confidence) / 2)
    for comp, t in zip(comps, truth_pos):
        out[comp.face_indices, t] = confidence
    return out


def test_leaf_label_set(hierarchy):
    leafset = LeafLabelSet(hierarchy)
    assert leafset.leaves == [1, 3, 4]
    assert leafset.names == ["top", "shaft", "foot"]
    np.testing.assert_array_equal(leafset.td, [[0, 3, 3], [3, 0, 2], [3, 2, 0]])


def test_ancestor_table_counts_paths(hierarchy):
    table = build_ancestor_table(np.array([1, 1, 3, 4, 4, 4, -1]), LeafLabelSet(hierarchy))
    assert table.labels == [0, 1, 2, 3, 4]
    np.testing.assert_array_equal(table.counts[:, 0], [2, 1, 3])
    np.testing.assert_array_equal(table.counts[:, 2], [0, 1, 3])
    np.testing.assert_allclose(table.A[:, 0], [2 / 6, 1 / 6, 3 / 6])
    np.testing.assert_allclose(table.A[:, 2], [0.0, 0.25, 0.75])
    np.testing.assert_allclose(table.A[:, 3], [0.0, 1.0, 0.0])
    np.testing.assert_allclose(table.A.sum(axis=0), 1.0)
    assert table.uniform_columns == []


def test_unseen_labels_get_uniform_columns(hierarchy):
    table = build_ancestor_table(np.array([1]), LeafLabelSet(hierarchy))
    assert table.uniform_columns == [2, 3, 4]
    np.testing.assert_allclose(table.A[:, 2], [0.0, 0.5, 0.5])
    np.testing.assert_allclose(table.A[:, 4], [0.0, 0.0, 1.0])
    with pytest.raises(DataError):
        build_ancestor_table(np.array([2]), LeafLabelSet(hierarchy))
    with pytest.raises(DataError):
        table.columns(np.array([7]))


def test_marginalized_loss_is_cross_entropy_on_leaves(hierarchy, rng):
    table = build_ancestor_table(np.array([1, 3, 4, 4]), LeafLabelSet(hierarchy))
    scores = rng.standard_normal((6, 3))
    leaf_cols = table.columns(np.array([1, 3, 4, 1, 3, 4]))
    loss = marginalized_loss(scores, table.A, leaf_cols)
    expected = -log_softmax(scores, axis=1)[np.arange(6), [0, 1, 2, 0, 1, 2]]
    np.testing.assert_allclose(loss, expected)
    # the root column covers every leaf, so its loss is -log sum_i A(i) P(i)
    root = marginalized_loss(scores, table.A, table.columns(np.array([0])).repeat(6))
    probs = np.exp(log_softmax(scores, axis=1))
    np.testing.assert_allclose(root, -np.log(probs @ table.A[:, 0]))


def test_marginalized_grad_matches_differences(hierarchy, rng):
    table = build_ancestor_table(np.array([1, 3, 4, 4]), LeafLabelSet(hierarchy))
    scores = rng.standard_normal((4, 3))
    cols = table.columns(np.array([0, 2, 3, 1]))
    grad = marginalized_grad(scores, table.A, cols)
    h = 1e-6
    for i in range(4):
        for j in range(3):
            up, down = scores.copy(), scores.copy()
            up[i, j] += h
            down[i, j] -= h
            numeric = (marginalized_loss(up, table.A, cols)[i] - marginalized_loss(down, table.A, cols)[i]) / (2 * h)
            assert grad[i, j] == pytest.approx(numeric, abs=1e-6)


def test_sampling_weights_balance_labels():
    w = sampling_weights(np.array([1.0, 3.0, 2.0]), np.array([0, 0, 1]))
    np.testing.assert_allclose(w, [0.125, 0.375, 0.5])
    np.testing.assert_allclose(sampling_weights(np.zeros(2), np.array([0, 1])), [0.5, 0.5])


def test_train_face_classifier_separates_clusters(hierarchy):
    rng = np.random.default_rng(0)
    leafset = LeafLabelSet(hierarchy)
    centers = np.array([[4.0, 0, 0, 0], [0, 4.0, 0, 0], [0, 0, 4.0, 0]])
    leaf_of = rng.integers(0, 3, 300)
    y = centers[leaf_of] + rng.normal(0.0, 0.3, (300, 4))
    b = np.array(leafset.leaves)[leaf_of]
    # a third of the shaft and foot faces only know they belong to a leg
    coarse = (leaf_of > 0) & (rng.random(300) < 0.33)
    b[coarse] = 2
    table = build_ancestor_table(b[b != 2], leafset)
    cfg = ClassifierConfig(epochs=40, batch_size=32, lr=0.01, seed=1)
    result = train_face_classifier(y, b, np.ones(300), table, cfg, spec=CLASSIFIER)
    assert list(result.trace.columns) == ["epoch", "loss"]
    assert result.trace["loss"].iloc[-1] < result.trace["loss"].iloc[0]
    pred = result.classifier.scores(y).argmax(axis=1)
    assert np.mean(pred == leaf_of) > 0.9

    with pytest.raises(DataError):
        train_face_classifier(y[:0], b[:0], np.ones(0), table, cfg, spec=CLASSIFIER)
    wrong = BranchMlpSpec(branches=CLASSIFIER.branches, trunk=(8,), activate_output=True, head=2)
    with pytest.raises(DataError):
        train_face_classifier(y, b, np.ones(300), table, cfg, spec=wrong)


def test_deepest_face_labels(hierarchy, tags):
    data = {"root": {"name": "table", "children": [
        {"name": "top", "faces": [0]},
        {"name": "leg", "children": [{"name": "foot", "faces": [1]}, {"name": "x", "faces": [2]}]},
    ]}}
    graph = scene_graph_from_dict(data, tags, n_faces=3)
    np.testing.assert_array_equal(deepest_face_labels(graph, [0, 1, 2, 4, 2], hierarchy, 3), [1, 4, 2])
    np.testing.assert_array_equal(deepest_face_labels(graph, [0, 1, 2, 99, 2], hierarchy, 3), [1, -1, 2])


def test_bottom_up_group_merges_siblings(hierarchy):
    faces = [np.array([u]) for u in range(4)]
    graph, labels = bottom_up_group(np.array([3, 4, 3, 1]), np.array([[0, 1], [1, 2], [2, 3]]), faces, hierarchy)
    assert labels == [0, 2, 3, 4, 3, 1]
    assert graph.nodes[0].is_root
    assert graph.nodes[0].children == [1, 5]
    np.testing.assert_array_equal(graph.nodes[1].faces, [0, 1, 2])
    np.testing.assert_array_equal(graph.nodes[0].faces, [0, 1, 2, 3])
    assert [graph.nodes[j].name for j in graph.nodes[1].children] == ["shaft", "foot", "shaft"]


def test_bottom_up_group_keeps_separate_legs(hierarchy):
    faces = [np.array([u]) for u in range(4)]
    _, labels = bottom_up_group(np.array([3, 4, 3, 1]), np.array([[0, 1], [2, 3]]), faces, hierarchy)
    assert labels.count(2) == 2
    assert labels[0] == 0


def test_same_label_neighbors_form_one_leaf(hierarchy):
    faces = [np.array([u]) for u in range(3)]
    graph, labels = bottom_up_group(np.array([1, 1, 1]), np.array([[0, 1], [1, 2]]), faces, hierarchy)
    assert labels == [0, 1]
    np.testing.assert_array_equal(graph.nodes[1].faces, [0, 1, 2])


def test_cc_probs_area_weighting():
    face_p = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(cc_probs(face_p, [np.array([0, 1])]), [[0.5, 0.5]])
    np.testing.assert_allclose(cc_probs(face_p, [np.array([0, 1])], np.array([3.0, 1.0])), [[0.75, 0.25]])


def test_segment_from_probs_without_smoothing(hierarchy):
    mesh = _cubes(4)
    face_p = _face_probs(mesh, [0, 1, 1, 2])
    result = segment_from_probs(mesh, face_p, _model(hierarchy), lam=0.0)
    assert result.granularity == "component" and not result.fallback
    np.testing.assert_array_equal(result.unit_labels, [1, 3, 3, 4])
    np.testing.assert_array_equal(result.face_labels, np.repeat([1, 3, 3, 4], 12))
    assert result.energy == pytest.approx(result.unary_energy)
    np.testing.assert_array_equal(result.graph.nodes[0].faces, np.arange(48))


def test_smoothing_never_raises_the_energy(hierarchy):
    mesh = _cubes(5)
    face_p = _face_probs(mesh, [0, 1, 0, 2, 1], confidence=0.5)
    for lam in (0.1, 1.0, 10.0):
        result = segment_from_probs(mesh, face_p, _model(hierarchy), lam=lam)
        assert result.energy <= result.unary_energy + 1e-9
        for faces, label in zip(result.unit_faces, result.unit_labels):
            assert np.all(result.face_labels[faces] == label)
    # strong smoothing pulls every component onto one leaf
    assert len(set(segment_from_probs(mesh, face_p, _model(hierarchy), lam=100.0).unit_labels)) == 1


def test_single_component_falls_back_to_faces(hierarchy, cube):
    face_p = np.tile([0.6, 0.3, 0.1], (cube.n_faces, 1))
    result = segment_from_probs(cube, face_p, _model(hierarchy))
    assert result.fallback
    assert result.granularity == "face"
    assert len(result.unit_labels) == cube.n_faces
    out = result.to_dict(hierarchy, "cube")
    assert out["fallback"] is True
    assert out["label_names"]["3"] == "shaft"
    assert out["scene_graph"]["root"]["label"] == "table"


def test_segment_argument_errors(hierarchy, cube):
    model = _model(hierarchy)
    with pytest.raises(DataError):
        segment_from_probs(cube, np.ones((3, 3)) / 3, model)
    with pytest.raises(UsageError):
        segment_from_probs(_cubes(2), np.ones((24, 3)) / 3, model, granularity="vertex")
    with pytest.raises(UsageError):
        segment_from_probs(_cubes(2), np.ones((24, 3)) / 3, model, lam=-1.0)
    with pytest.raises(UsageError):
        segment(cube, model)


def test_segment_runs_the_classifier(hierarchy, rng):
    mesh = _cubes(3)
    result = segment(mesh, _model(hierarchy), face_features=rng.standard_normal((mesh.n_faces, 4)))
    assert result.unit_probs.shape == (3, 3)
    np.testing.assert_allclose(result.unit_probs.sum(axis=1), 1.0)


def test_face_edge_weights(cube):
    shared = face_adjacency(cube)
    pairs = {tuple(p) for p in shared.tolist()}
    other = next((a, b) for a in range(12) for b in range(a + 1, 12) if (a, b) not in pairs)
    w = face_edge_weights(cube, np.array([shared[0], other]))
    assert np.all(w > 0)
    assert w[1] <= 1.0
    assert w[0] <= 10.0
    assert len(face_edge_weights(cube, np.zeros((0, 2)))) == 0


def test_area_accuracy():
    assert area_accuracy(np.array([1, 2, 3]), np.array([1, 2, 4]), np.array([1.0, 1.0, 2.0])) == pytest.approx(0.5)
    assert area_accuracy(np.array([1]), np.array([1]), np.zeros(1)) == 0.0


def test_xval_prefers_the_smaller_lambda_on_ties(hierarchy):
    mesh = _cubes(3)
    shapes = []
    for i in range(3):
        face_p = _face_probs(mesh, [0, 1, 2], confidence=0.9)
        shapes.append(LabeledShape(f"s{i}", mesh, face_p, np.repeat([1, 3, 4], 12)))
    result = xval_lambda(shapes, _model(hierarchy), grid=[0.001, 0.0], folds=5)
    assert result.lam == 0.0
    assert len(result.table) == 3 * 2
    assert np.allclose(result.table["accuracy"], 1.0)
    with pytest.raises(UsageError):
        xval_lambda(shapes, _model(hierarchy), grid=[])
    with pytest.raises(DataError):
        xval_lambda(shapes[:1], _model(hierarchy), grid=[1.0])


def test_xval_picks_the_lambda_that_fixes_a_noisy_component(hierarchy):
    # three shafts in a row; the middle one leans toward "top" on its own
    mesh = _cubes(3)
    face_p = np.repeat([[0.05, 0.9, 0.05], [0.5, 0.45, 0.05], [0.05, 0.9, 0.05]], 12, axis=0)
    truth = np.full(mesh.n_faces, 3)
    shapes = [LabeledShape(f"s{i}", mesh, face_p, truth) for i in range(3)]

    alone = segment_from_probs(mesh, face_p, _model(hierarchy), lam=0.0)
    np.testing.assert_array_equal(alone.unit_labels, [3, 1, 3])
    result = xval_lambda(shapes, _model(hierarchy), grid=[10.0, 0.0, 1.0], folds=3)
    assert result.lam == 1.0
    means = result.table.groupby("lambda")["accuracy"].mean()
    assert means[0.0] == pytest.approx(2.0 / 3.0)
    assert means[1.0] == pytest.approx(1.0)
    assert means[10.0] == pytest.approx(1.0)


def test_xval_fold_table_matches_per_shape_accuracy(hierarchy):
    rng = np.random.default_rng(8)
    mesh = _cubes(4)
    shapes = []
    for i in range(5):
        comp_p = rng.dirichlet(np.ones(3), size=4)
        truth = np.repeat(rng.choice([1, 3, 4], size=4), 12)
        shapes.append(LabeledShape(f"s{i}", mesh, np.repeat(comp_p, 12, axis=0), truth))
    grid = [0.0, 0.3, 3.0]
    model = _model(hierarchy)
    result = xval_lambda(shapes, model, grid=grid, folds=2, seed=4)

    assert sorted(set(result.fold_of.tolist())) == [0, 1]
    assert len(result.table) == 2 * len(grid)
    acc = np.array([
        [area_accuracy(segment_from_probs(s.mesh, s.face_p, model, lam=lam).face_labels, s.truth, s.mesh.face_areas)
         for lam in grid]
        for s in shapes
    ])
    for row in result.table.to_dict("records"):
        held = result.fold_of == row["fold"]
        assert row["accuracy"] == pytest.approx(acc[held, grid.index(row["lambda"])].mean())
    means = result.table.groupby("lambda")["accuracy"].mean()
    assert means[result.lam] == pytest.approx(means.max())


def test_seg_model_round_trip(hierarchy, tmp_path):
    model = _model(hierarchy, lam=0.3)
    path = tmp_path / "seg_model.npz"
    save_seg_model(path, model, meta={"category": "table"})
    back = load_seg_model(path)
    assert back.lam == pytest.approx(0.3)
    assert back.classifier.leaves == [1, 3, 4]
    assert back.meta["category"] == "table"
    np.testing.assert_allclose(back.ancestors.A, model.ancestors.A)
    assert back.hierarchy.names == hierarchy.names
    with pytest.raises(DataError):
        load_seg_model(tmp_path / "absent.npz")


def test_resaved_model_keeps_the_new_lambda(hierarchy, tmp_path):
    path = tmp_path / "seg_model.npz"
    save_seg_model(path, _model(hierarchy, lam=1.0), meta={"category": "table"})
    model = load_seg_model(path)
    model.lam = 0.03
    save_seg_model(path, model, meta=model.meta)
    back = load_seg_model(path)
    assert back.lam == pytest.approx(0.03)
    assert back.meta["category"] == "table"
