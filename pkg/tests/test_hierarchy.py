from __future__ import annotations

import itertools

import numpy as np
import pytest

from processors.hierarchy import (
    CanonicalHierarchy,
    assign_tags,
    distance_table,
    extract_canonical_hierarchy,
    hierarchy_from_template,
    load_hierarchy,
    prune_unused,
    same_tree,
    tree_cost,
    tree_distance,
    write_hierarchy,
)
from services.errors import DataError

TABLE = {"name": "table", "children": [
    {"name": "top"},
    {"name": "leg", "children": [{"name": "shaft"}, {"name": "foot"}]},
]}


def _best_by_enumeration(M: np.ndarray, root: int) -> float:
    k = len(M)
    others = [u for u in range(k) if u != root]
    cost = -np.log(M)
    best = np.inf
    for choice in itertools.product(range(k), repeat=len(others)):
        parent = dict(zip(others, choice))
        if any(parent[u] == u for u in others):
            continue
        ok = True
        for u in others:
            seen, v = set(), u
            while v != root:
                if v in seen:
                    ok = False
                    break
                seen.add(v)
                v = parent[v]
            if not ok:
                break
        if ok:
            best = min(best, sum(cost[parent[u], u] for u in others))
    return best


@pytest.mark.parametrize("seed", range(10))
def test_arborescence_is_minimal(seed):
    rng = np.random.default_rng(seed)
    M = rng.dirichlet(np.ones(5), size=5).T
    h = extract_canonical_hierarchy(M, root=4)
    assert h.parent[4] == -1
    assert all(h.ancestors(u)[-1] == 4 for u in range(5))
    assert tree_cost(h, M) == pytest.approx(_best_by_enumeration(M, 4))


def test_arborescence_follows_dominant_parents():
    # 2 -> root, 0 and 1 -> 2
    M = np.full((4, 4), 0.01)
    M[3, 2] = M[2, 0] = M[2, 1] = 0.97
    h = extract_canonical_hierarchy(M, root=3, names=["a", "b", "c", "root"])
    np.testing.assert_array_equal(h.parent, [2, 2, 3, -1])
    assert h.leaves() == [0, 1]
    assert h.children(2) == [0, 1]
    with pytest.raises(DataError):
        extract_canonical_hierarchy(np.zeros((3, 3)), root=2)


def test_equal_cost_trees_resolve_to_the_smallest_arcs():
    # every tree costs the same; the smallest parents are 3 -> 0 -> {1, 2}
    h = extract_canonical_hierarchy(np.full((4, 4), 0.25), root=3)
    np.testing.assert_array_equal(h.parent, [3, 0, 0, -1])
    again = extract_canonical_hierarchy(np.full((4, 4), 0.25), root=3)
    np.testing.assert_array_equal(again.parent, h.parent)


def test_assign_tags_maximizes_agreement():
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 20, size=(3, 5))
    labels, tags = [], []
    for t in range(3):
        for k in range(5):
            labels += [k] * int(counts[t, k])
            tags += [t] * int(counts[t, k])
    names = assign_tags(np.array(labels), np.array(tags), ["a", "b", "c"], 5, root_name="table")
    assert names[-1] == "table"
    matched = {names.index(n): t for t, n in enumerate("abc")}
    best = max(
        sum(counts[t, k] for t, k in enumerate(perm))
        for perm in itertools.permutations(range(5), 3)
    )
    assert sum(counts[t, k] for k, t in matched.items()) == best
    assert sum(n.startswith("cluster_") for n in names) == 2


def test_untagged_parts_do_not_vote():
    names = assign_tags(np.array([0, 1, 1]), np.array([-1, 0, 0]), ["wheel"], 2)
    assert names == ["cluster_0", "wheel", "root"]


def test_tree_distances():
    h = hierarchy_from_template(TABLE)
    ids = h.name_index()
    assert tree_distance(h, ids["shaft"], ids["shaft"]) == 0
    assert tree_distance(h, ids["shaft"], ids["foot"]) == 2
    assert tree_distance(h, ids["top"], ids["foot"]) == 3
    table = distance_table(h, [ids["top"], ids["shaft"], ids["foot"]])
    np.testing.assert_array_equal(table, [[0, 3, 3], [3, 0, 2], [3, 2, 0]])
    assert h.depth(ids["foot"]) == 2
    assert h.leaves_under(ids["leg"]) == [ids["shaft"], ids["foot"]]


def test_prune_moves_children_up():
    h = hierarchy_from_template(TABLE)
    pruned = prune_unused(h, [1, 3, 4])
    assert pruned.nodes == [0, 1, 3, 4]
    assert pruned.parent[3] == 0 and pruned.parent[4] == 0
    assert pruned.leaves() == [1, 3, 4]
    with pytest.raises(DataError):
        pruned.ancestors(2)


def test_same_tree_ignores_ids_and_root_name():
    a = hierarchy_from_template(TABLE)
    shuffled = CanonicalHierarchy(
        parent=[4, 4, 0, 0, -1],
        names=["leg", "top", "foot", "shaft", "desk"],
        root=4,
    )
    assert same_tree(a, shuffled)
    renamed = CanonicalHierarchy(np.array(shuffled.parent), ["leg", "top", "foot", "stem", "desk"], 4)
    assert not same_tree(a, renamed)


def test_json_round_trip(tmp_path):
    h = prune_unused(hierarchy_from_template(TABLE), [1, 2, 4])
    path = tmp_path / "hierarchy.json"
    write_hierarchy(h, path)
    back = load_hierarchy(path)
    assert back.nodes == h.nodes
    assert back.root == 0
    assert same_tree(back, h)
    assert back.names[4] == "foot"


def test_malformed_hierarchies(tmp_path):
    with pytest.raises(DataError):
        load_hierarchy(tmp_path / "absent.json")
    two_roots = {"root": 0, "nodes": [{"id": 0, "name": "a", "parent": None}, {"id": 1, "name": "b", "parent": None}]}
    with pytest.raises(DataError):
        CanonicalHierarchy.from_dict(two_roots)
    cycle = {"root": 0, "nodes": [
        {"id": 0, "name": "r", "parent": None},
        {"id": 1, "name": "a", "parent": 2},
        {"id": 2, "name": "b", "parent": 1},
    ]}
    with pytest.raises(DataError):
        CanonicalHierarchy.from_dict(cycle)
    with pytest.raises(DataError):
        CanonicalHierarchy.from_dict({"nodes": [{"id": 0}]})
