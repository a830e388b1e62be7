# processors/hierarchy.py
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, List, Optional, Sequence

import networkx as nx
import numpy as np
from scipy.optimize import linear_sum_assignment

from services.errors import DataError

logger = logging.getLogger(__name__)

# per-arc offset in (u, v) order; keeps equal-cost trees from depending on graph iteration order
TIE_BREAK = 1e-12


@dataclass
class CanonicalHierarchy:
    """
    Tree over cluster labels 0..D-1 plus the root label D.

    ``parent[u]`` is -1 for the root and for clusters that are not in the tree
    (``active[u]`` False after pruning).
    """

    parent: np.ndarray
    names: List[str]
    root: int
    active: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.parent = np.asarray(self.parent, dtype=np.int64)
        if self.active is None:
            self.active = np.ones(len(self.parent), dtype=bool)
        self.active = np.asarray(self.active, dtype=bool)
        if len(self.names) != len(self.parent):
            raise DataError(f"{len(self.names)} names for {len(self.parent)} hierarchy nodes")

    @property
    def size(self) -> int:
        return len(self.parent)

    @property
    def nodes(self) -> List[int]:
        return [int(u) for u in np.flatnonzero(self.active)]

    def children(self, u: int) -> List[int]:
        return [int(v) for v in np.flatnonzero((self.parent == u) & self.active)]

    def leaves(self) -> List[int]:
        out = [u for u in self.nodes if u != self.root and not self.children(u)]
        return out or [self.root]

    def ancestors(self, u: int) -> List[int]:
        """Path from ``u`` (included) up to the root."""
        if not self.active[u]:
            raise DataError(f"label {u} is not in the hierarchy")
        path = [int(u)]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
            if len(path) > self.size:
                raise DataError("hierarchy has a cycle")
        return path

    def depth(self, u: int) -> int:
        return len(self.ancestors(u)) - 1

    def descendants(self, u: int) -> List[int]:
        out, stack = [], [u]
        while stack:
            v = stack.pop()
            out.append(v)
            stack.extend(self.children(v))
        return sorted(out)

    def leaves_under(self, u: int) -> List[int]:
        leaves = set(self.leaves())
        return [v for v in self.descendants(u) if v in leaves]

    def name_index(self) -> dict[str, int]:
        return {self.names[u]: u for u in self.nodes}

    @cached_property
    def tree(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from((int(self.parent[u]), u) for u in self.nodes if self.parent[u] >= 0)
        return g

    def to_dict(self) -> dict[str, Any]:
        return {
            "root": int(self.root),
            "nodes": [
                {"id": u, "name": self.names[u], "parent": None if self.parent[u] < 0 else int(self.parent[u])}
                for u in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CanonicalHierarchy":
        try:
            nodes = data["nodes"]
            size = 1 + max(int(n["id"]) for n in nodes)
            parent = np.full(size, -1, dtype=np.int64)
            active = np.zeros(size, dtype=bool)
            names = [f"cluster_{u}" for u in range(size)]
            roots = []
            for n in nodes:
                u = int(n["id"])
                active[u] = True
                names[u] = str(n["name"])
                if n["parent"] is None:
                    roots.append(u)
                else:
                    parent[u] = int(n["parent"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed hierarchy: {exc}") from exc
        root = int(data.get("root", roots[0] if roots else -1))
        if roots != [root]:
            raise DataError(f"hierarchy must have exactly one root, found {roots}")
        out = cls(parent, names, root, active)
        for u in out.nodes:
            out.ancestors(u)
        return out


def write_hierarchy(h: CanonicalHierarchy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(h.to_dict(), indent=1), encoding="utf-8")


def load_hierarchy(path: str | Path) -> CanonicalHierarchy:
    path = Path(path)
    if not path.exists():
        raise DataError(f"hierarchy file not found: {path}")
    return CanonicalHierarchy.from_dict(json.loads(path.read_text(encoding="utf-8")))


def hierarchy_from_template(template: dict) -> CanonicalHierarchy:
    """Nested ``{"name", "children"}`` tree (root first, preorder ids)."""
    parent: List[int] = []
    names: List[str] = []

    def visit(node: dict, up: int) -> None:
        me = len(names)
        names.append(str(node["name"]))
        parent.append(up)
        for child in node.get("children") or []:
            visit(child, me)

    visit(template, -1)
    return CanonicalHierarchy(np.asarray(parent), names, root=0)


# ---------- extraction ----------

def arc_costs(M: np.ndarray) -> np.ndarray:
    return -np.log(np.asarray(M, dtype=np.float64))


def extract_canonical_hierarchy(M: np.ndarray, root: int, names: Optional[Sequence[str]] = None) -> CanonicalHierarchy:
    """
    Minimum arborescence of the complete digraph with arc cost -ln M[u, v]
    for u -> v; the root has no incoming arcs. Equal-cost trees resolve
    toward arcs with smaller (u, v).
    """
    M = np.asarray(M, dtype=np.float64)
    k = M.shape[0]
    if np.any(M <= 0):
        raise DataError("parent/child matrix must be strictly positive")
    cost = arc_costs(M) + TIE_BREAK * np.arange(k * k, dtype=np.float64).reshape(k, k) / (k * k)
    g = nx.DiGraph()
    g.add_nodes_from(range(k))
    g.add_weighted_edges_from(
        (u, v, float(cost[u, v])) for u in range(k) for v in range(k) if u != v and v != root
    )
    parent = np.full(k, -1, dtype=np.int64)
    if k > 1:
        arb = nx.minimum_spanning_arborescence(g, attr="weight")
        for u, v in arb.edges():
            parent[v] = u
    names = list(names) if names is not None else [f"cluster_{u}" for u in range(k)]
    return CanonicalHierarchy(parent, names, root)


def tree_cost(h: CanonicalHierarchy, M: np.ndarray) -> float:
    cost = arc_costs(M)
    return float(sum(cost[h.parent[u], u] for u in h.nodes if h.parent[u] >= 0))


def prune_unused(h: CanonicalHierarchy, used: Sequence[int]) -> CanonicalHierarchy:
    """Drop clusters outside ``used`` (root always kept); children move to the nearest kept ancestor."""
    keep = np.zeros(h.size, dtype=bool)
    keep[np.asarray(list(used), dtype=np.int64)] = True
    keep &= h.active
    keep[h.root] = True
    parent = np.full(h.size, -1, dtype=np.int64)
    for u in np.flatnonzero(keep):
        up = h.parent[u]
        while up >= 0 and not keep[up]:
            up = h.parent[up]
        parent[u] = up
    dropped = [u for u in h.nodes if not keep[u]]
    if dropped:
        logger.info("pruned unused clusters %s from the hierarchy", dropped)
    return CanonicalHierarchy(parent, list(h.names), h.root, keep)


# ---------- naming ----------

def tag_agreement(labels: np.ndarray, tags: np.ndarray, n_tags: int, n_clusters: int) -> np.ndarray:
    """counts[t, k] = parts tagged t with hard label k."""
    labels = np.asarray(labels)
    tags = np.asarray(tags)
    ok = (tags >= 0) & (tags < n_tags) & (labels < n_clusters)
    counts = np.zeros((n_tags, n_clusters), dtype=np.int64)
    np.add.at(counts, (tags[ok], labels[ok]), 1)
    return counts


def assign_tags(
    labels: np.ndarray,
    tags: np.ndarray,
    tag_names: Sequence[str],
    n_clusters: int,
    root_name: str = "root",
) -> List[str]:
    """
    One name per cluster plus the root: the one-to-one tag matching that
    maximizes agreeing parts; clusters left over are called ``cluster_<k>``.
    """
    counts = tag_agreement(labels, tags, len(tag_names), n_clusters)
    names = [f"cluster_{k}" for k in range(n_clusters)] + [root_name]
    if len(tag_names) == 0:
        return names
    rows, cols = linear_sum_assignment(counts, maximize=True)
    for t, k in zip(rows, cols):
        names[k] = tag_names[t]
        if counts[t, k] == 0:
            logger.warning("tag %r matched to cluster %d without agreeing parts", tag_names[t], k)
    return names


# ---------- distances / comparison ----------

def tree_distance(h: CanonicalHierarchy, a: int, b: int) -> int:
    return int(nx.shortest_path_length(h.tree, a, b))


def distance_table(h: CanonicalHierarchy, labels: Sequence[int]) -> np.ndarray:
    """td between every pair of ``labels`` (edge counts)."""
    labels = list(labels)
    lengths = dict(nx.all_pairs_shortest_path_length(h.tree))
    return np.array([[lengths[a][b] for b in labels] for a in labels], dtype=np.float64)


def canonical_form(h: CanonicalHierarchy, include_root_name: bool = False) -> tuple:
    def form(u: int) -> tuple:
        name = h.names[u] if (u != h.root or include_root_name) else ""
        return (name, tuple(sorted(form(v) for v in h.children(u))))

    return form(h.root)


def same_tree(a: CanonicalHierarchy, b: CanonicalHierarchy) -> bool:
    """Isomorphic with matching names (root names ignored)."""
    return canonical_form(a) == canonical_form(b)
