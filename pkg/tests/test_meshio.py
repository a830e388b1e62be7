from __future__ import annotations

import json

import numpy as np
import pytest

from services.errors import DataError, ObjParseError, SceneGraphError, TagDictionaryError
from services.meshio import (
    Mesh,
    connected_components,
    face_adjacency,
    graph_from_groups,
    is_consistently_oriented,
    knn_k,
    knn_pairs,
    load_mesh,
    load_scene_graph,
    load_tag_dictionary,
    normalize_name,
    scene_graph_from_dict,
    write_mesh,
)


def test_load_mesh_triangulates_polygons_and_keeps_groups(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text(
        "# square\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\ng Wheel_01\nf 1//1 2//1 3//1 4//1\n",
        encoding="utf-8",
    )
    mesh = load_mesh(path)
    assert mesh.n_faces == 2
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])
    assert mesh.groups[0][0] == "Wheel_01"
    np.testing.assert_array_equal(mesh.groups[0][1], [0, 1])
    assert mesh.face_areas.sum() == pytest.approx(1.0)


def test_load_mesh_negative_indices(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n", encoding="utf-8")
    np.testing.assert_array_equal(load_mesh(path).faces, [[0, 1, 2]])


def test_load_mesh_reports_line_of_bad_index(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\n\nf 1 2 9\n", encoding="utf-8")
    with pytest.raises(ObjParseError) as err:
        load_mesh(path)
    assert err.value.line == 5


def test_mesh_rejects_out_of_range_faces():
    with pytest.raises(DataError):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]])


def test_write_mesh_round_trip(tmp_path, two_cubes):
    path = tmp_path / "out.obj"
    write_mesh(two_cubes, path)
    back = load_mesh(path)
    np.testing.assert_allclose(back.vertices, two_cubes.vertices)
    np.testing.assert_array_equal(back.faces, two_cubes.faces)


def test_components_follow_smallest_face(two_cubes):
    comps = connected_components(two_cubes)
    assert [c.id for c in comps] == [0, 1]
    assert len(comps[0].face_indices) == len(comps[1].face_indices) == 12
    np.testing.assert_allclose(comps[0].centroid, [0.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(comps[1].centroid, [3.0, 0.0, 0.0], atol=1e-12)
    assert comps[0].area == pytest.approx(6.0)


def test_closed_box_is_consistently_oriented(cube):
    assert is_consistently_oriented(cube)
    flipped = Mesh(cube.vertices, np.vstack([cube.faces[:1, ::-1], cube.faces[1:]]))
    assert not is_consistently_oriented(flipped)


def test_face_adjacency_of_a_box(cube):
    adj = face_adjacency(cube)
    # 12 triangles, 18 undirected edges, each shared by two faces
    assert len(adj) == 18
    assert np.all(adj[:, 0] < adj[:, 1])


def test_knn_k():
    assert knn_k(10) == 1
    assert knn_k(250) == 3
    assert knn_k(100_000) == 30
    assert knn_k(5000, cap=30, fraction=0.01) == 30


def test_knn_pairs_line():
    points = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [7.0, 0, 0]])
    np.testing.assert_array_equal(knn_pairs(points, 1), [[0, 1], [1, 2], [2, 3]])
    np.testing.assert_array_equal(knn_pairs(points, 1, mutual=True), [[0, 1]])


def test_normalize_name():
    assert normalize_name("Wheel_01") == "wheel"
    assert normalize_name("TYRE.002") == "tyre"
    assert normalize_name("door - 12345") == "door"
    assert normalize_name(None) == ""


def test_tag_dictionary_grammar(tmp_path):
    path = tmp_path / "tags.txt"
    path.write_text("# tags\nwheel: wheels, Tyre Assembly\nbody\n", encoding="utf-8")
    tags = load_tag_dictionary(path)
    assert tags.tags == ["wheel", "body"]
    assert tags.root_tag == 2
    assert tags.lookup("Wheels_07") == 0
    assert tags.lookup("tyre assembly") == 0
    assert tags.lookup("Body.001") == 1
    assert tags.lookup("polySurface12") is None


def test_tag_dictionary_rejects_conflicts(tmp_path):
    path = tmp_path / "tags.txt"
    path.write_text("wheel: rim\nhub: rim\n", encoding="utf-8")
    with pytest.raises(TagDictionaryError):
        load_tag_dictionary(path)


def test_fuzzy_lookup_only_when_enabled(tmp_path):
    path = tmp_path / "tags.txt"
    path.write_text("wheel: wheels\n", encoding="utf-8")
    assert load_tag_dictionary(path).lookup("wheeel") is None
    assert load_tag_dictionary(path, fuzzy_threshold=80).lookup("wheeel") == 0


def test_scene_graph_fills_internal_faces(tags):
    data = {"root": {"name": "table", "children": [
        {"name": "Tabletop", "faces": [0, 1]},
        {"name": "legs", "children": [{"name": "feet", "faces": [3]}, {"name": "x", "faces": [2]}]},
    ]}}
    graph = scene_graph_from_dict(data, tags, shape_index=4, n_faces=4)
    assert len(graph) == 5
    assert graph.nodes[0].is_root and graph.nodes[0].tag == tags.root_tag
    assert [n.tag for n in graph.nodes[1:]] == [0, 1, 2, None]
    np.testing.assert_array_equal(graph.nodes[2].faces, [2, 3])
    np.testing.assert_array_equal(graph.nodes[0].faces, [0, 1, 2, 3])
    assert graph.nodes[3].id == (4, 3)
    assert graph.depth(3) == 2
    np.testing.assert_array_equal(graph.deepest_part_per_face(4), [1, 1, 4, 3])


def test_flat_scene_graph_cycle(tags):
    data = {"root": "a", "nodes": [
        {"id": "a", "children": ["b"]},
        {"id": "b", "children": ["a"]},
    ]}
    with pytest.raises(SceneGraphError):
        scene_graph_from_dict(data, tags)


def test_scene_graph_missing_faces(tmp_path, tags):
    path = tmp_path / "g.json"
    path.write_text(json.dumps({"root": {"name": "r", "children": [{"name": "top", "faces": [7]}]}}), encoding="utf-8")
    with pytest.raises(SceneGraphError):
        load_scene_graph(path, tags, n_faces=4)


def test_graph_from_groups(tmp_path, tags):
    path = tmp_path / "g.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\ng board\nf 1 2 3\ng legs\nf 2 4 3\n", encoding="utf-8")
    graph = graph_from_groups(load_mesh(path), tags)
    assert [n.tag for n in graph.nodes] == [tags.root_tag, 0, 1]
