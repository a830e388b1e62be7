# services/meshio.py
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
from rapidfuzz import fuzz, process
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components
from scipy.spatial import cKDTree

from services.errors import DataError, ObjParseError, SceneGraphError, TagDictionaryError

logger = logging.getLogger(__name__)

# Raw part names in repositories: "Wheel_01", "door - 12345", "Tyre.002"
_NUM_TAIL_RE = re.compile(r"[\s_.\-]*\d+\s*$")


# ---------- geometry ----------

@dataclass
class Mesh:
    """Triangle mesh. ``groups`` keeps OBJ ``g``/``o`` names with their face ids."""

    vertices: np.ndarray                      # (V, 3) float64, model units
    faces: np.ndarray                         # (F, 3) int64
    groups: List[tuple[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataError("face index out of range")

    @property
    def n_faces(self) -> int:
        return int(len(self.faces))

    @cached_property
    def _cross(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Unit normals; degenerate faces get +z."""
        n = self._cross.copy()
        norm = np.linalg.norm(n, axis=1)
        bad = norm <= 1e-300
        n[~bad] /= norm[~bad, None]
        n[bad] = (0.0, 0.0, 1.0)
        return n

    @cached_property
    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def submesh_vertices(self, face_ids: Sequence[int]) -> np.ndarray:
        """Corner positions (n, 3, 3) of the given faces."""
        return self.vertices[self.faces[np.asarray(face_ids, dtype=np.int64)]]


def _parse_index(token: str, n_vertices: int, line_no: int, path: str) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError as exc:
        raise ObjParseError(f"bad face index {token!r}", line_no, path) from exc
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if not 0 <= idx < n_vertices:
        raise ObjParseError(f"face index {token!r} out of range", line_no, path)
    return idx


def load_mesh(path: str | Path) -> Mesh:
    """
    Read a Wavefront OBJ.

    - ``v`` and ``f`` records only; texture/normal indices are ignored.
    - Polygons are fan-triangulated.
    - ``g``/``o`` lines start a named group; faces after it belong to it.
    """
    path = str(path)
    vertices: List[tuple[float, float, float]] = []
    faces: List[tuple[int, int, int]] = []
    group_faces: dict[str, List[int]] = {}
    group_order: List[str] = []
    current: Optional[str] = None

    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind = parts[0]
            if kind == "v":
                if len(parts) < 4:
                    raise ObjParseError("vertex needs 3 coordinates", line_no, path)
                try:
                    vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError as exc:
                    raise ObjParseError(f"bad vertex {line!r}", line_no, path) from exc
            elif kind == "f":
                if len(parts) < 4:
                    raise ObjParseError("face needs at least 3 vertices", line_no, path)
                ids = [_parse_index(t, len(vertices), line_no, path) for t in parts[1:]]
                for k in range(1, len(ids) - 1):
                    if current is not None:
                        group_faces[current].append(len(faces))
                    faces.append((ids[0], ids[k], ids[k + 1]))
            elif kind in ("g", "o"):
                name = " ".join(parts[1:]) or f"group_{len(group_order)}"
                if name not in group_faces:
                    group_faces[name] = []
                    group_order.append(name)
                current = name
            # vt, vn, usemtl, mtllib, s, l ... are not geometry we keep

    groups = [(g, np.asarray(group_faces[g], dtype=np.int64)) for g in group_order if group_faces[g]]
    mesh = Mesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3), groups)
    logger.debug("loaded %s: %d vertices, %d faces, %d groups", path, len(vertices), len(faces), len(groups))
    return mesh


def write_mesh(mesh: Mesh, path: str | Path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    grouped = np.zeros(mesh.n_faces, dtype=bool)
    for name, ids in mesh.groups:
        lines.append(f"g {name}")
        for f in ids:
            a, b, c = mesh.faces[f] + 1
            lines.append(f"f {a} {b} {c}")
        grouped[ids] = True
    rest = np.flatnonzero(~grouped)
    if len(rest):
        if mesh.groups:
            lines.append("g ungrouped")
        for f in rest:
            a, b, c = mesh.faces[f] + 1
            lines.append(f"f {a} {b} {c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------- tags ----------

def normalize_name(text: Optional[str]) -> str:
    """Lower-case, drop punctuation and trailing numeric ids ("Wheel_01" -> "wheel")."""
    if not text:
        return ""
    s = _NUM_TAIL_RE.sub("", str(text).strip())
    s = "".join(ch.lower() if (ch.isalnum() or ch.isspace()) else " " for ch in s)
    return " ".join(s.split())


@dataclass
class TagDictionary:
    tags: List[str]
    synonyms: dict[str, int]                  # normalized raw string -> tag id
    fuzzy_threshold: Optional[int] = None

    @property
    def root_tag(self) -> int:
        return len(self.tags)

    def __len__(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        try:
            return self.tags.index(tag)
        except ValueError as exc:
            raise TagDictionaryError(f"Unknown tag {tag!r}") from exc

    def lookup(self, raw: Optional[str]) -> Optional[int]:
        """Tag id for a raw part name, or None when the dictionary does not cover it."""
        key = normalize_name(raw)
        if not key:
            return None
        if key in self.synonyms:
            return self.synonyms[key]
        if self.fuzzy_threshold is not None and self.synonyms:
            best = process.extractOne(key, list(self.synonyms), scorer=fuzz.token_set_ratio)
            if best and best[1] >= self.fuzzy_threshold:
                return self.synonyms[best[0]]
        return None


def load_tag_dictionary(path: str | Path, fuzzy_threshold: Optional[int] = None) -> TagDictionary:
    """Read ``canonical_tag: synonym1, synonym2, ...`` lines."""
    tags: List[str] = []
    synonyms: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, sep, tail = line.partition(":")
            tag = head.strip()
            if not tag:
                raise TagDictionaryError(f"{path}:{line_no}: missing canonical tag")
            if tag in tags:
                raise TagDictionaryError(f"{path}:{line_no}: duplicate tag {tag!r}")
            tag_id = len(tags)
            tags.append(tag)
            for name in [tag] + (tail.split(",") if sep else []):
                key = normalize_name(name)
                if not key:
                    continue
                if synonyms.get(key, tag_id) != tag_id:
                    raise TagDictionaryError(f"{path}:{line_no}: {name!r} already maps to {tags[synonyms[key]]!r}")
                synonyms[key] = tag_id
    return TagDictionary(tags=tags, synonyms=synonyms, fuzzy_threshold=fuzzy_threshold)


def write_tag_dictionary(tags: TagDictionary, path: str | Path) -> None:
    by_tag: dict[int, List[str]] = {i: [] for i in range(len(tags))}
    for key, tag_id in tags.synonyms.items():
        if key != normalize_name(tags.tags[tag_id]):
            by_tag[tag_id].append(key)
    lines = [f"{t}: {', '.join(sorted(by_tag[i]))}".rstrip(": ").rstrip() for i, t in enumerate(tags.tags)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------- scene graphs ----------

@dataclass
class PartNode:
    id: tuple[int, int]                       # (shape i, part j)
    faces: np.ndarray                         # sorted face ids
    name: Optional[str] = None                # raw name as given
    tag: Optional[int] = None
    children: List[int] = field(default_factory=list)
    parent: Optional[int] = None
    is_root: bool = False


@dataclass
class SceneGraph:
    shape_index: int
    nodes: List[PartNode]
    root: int = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def edges(self) -> List[tuple[int, int]]:
        """(parent j, child k) pairs."""
        return [(n.parent, j) for j, n in enumerate(self.nodes) if n.parent is not None]

    def leaves(self) -> List[int]:
        return [j for j, n in enumerate(self.nodes) if not n.children]

    def preorder(self) -> Iterator[int]:
        stack = [self.root]
        while stack:
            j = stack.pop()
            yield j
            stack.extend(reversed(self.nodes[j].children))

    def depth(self, j: int) -> int:
        d = 0
        while self.nodes[j].parent is not None:
            j = self.nodes[j].parent
            d += 1
        return d

    def deepest_part_per_face(self, n_faces: int) -> np.ndarray:
        """Leaf part id owning each face (-1 when no leaf covers it)."""
        owner = np.full(n_faces, -1, dtype=np.int64)
        for j in self.leaves():
            owner[self.nodes[j].faces] = j
        return owner


def _node_from_nested(obj: dict, out: List[dict], parent: Optional[int], depth: int) -> int:
    if depth > 10_000:
        raise SceneGraphError("scene graph too deep (cycle?)")
    if not isinstance(obj, dict):
        raise SceneGraphError(f"node must be an object, got {type(obj).__name__}")
    idx = len(out)
    out.append({"name": obj.get("name"), "faces": obj.get("faces"), "parent": parent, "children": []})
    for child in obj.get("children") or []:
        cid = _node_from_nested(child, out, idx, depth + 1)
        out[idx]["children"].append(cid)
    return idx


def _nodes_from_flat(data: dict) -> List[dict]:
    """``{"root": id, "nodes": [{"id", "name", "faces", "children": [ids]}]}``."""
    by_id = {n["id"]: n for n in data["nodes"]}
    root_id = data.get("root", data["nodes"][0]["id"])
    if root_id not in by_id:
        raise SceneGraphError(f"root id {root_id!r} not among nodes")
    out: List[dict] = []
    index: dict = {}
    on_path: set = set()

    def visit(nid, parent: Optional[int]) -> int:
        if nid in on_path:
            raise SceneGraphError(f"cycle detected at node {nid!r}")
        if nid in index:
            raise SceneGraphError(f"node {nid!r} has two parents")
        if nid not in by_id:
            raise SceneGraphError(f"unknown child id {nid!r}")
        on_path.add(nid)
        node = by_id[nid]
        idx = len(out)
        index[nid] = idx
        out.append({"name": node.get("name"), "faces": node.get("faces"), "parent": parent, "children": []})
        for cid in node.get("children") or []:
            out[idx]["children"].append(visit(cid, idx))
        on_path.discard(nid)
        return idx

    visit(root_id, None)
    return out


def scene_graph_from_dict(
    data: dict,
    tags: TagDictionary,
    shape_index: int = 0,
    n_faces: Optional[int] = None,
) -> SceneGraph:
    if "nodes" in data:
        raw_nodes = _nodes_from_flat(data)
    elif "root" in data:
        raw_nodes: List[dict] = []
        _node_from_nested(data["root"], raw_nodes, None, 0)
    else:
        raise SceneGraphError("scene graph needs a 'root' node")

    # post-order: complete internal geometry as the union of children
    geometry: List[Optional[np.ndarray]] = [None] * len(raw_nodes)
    for j in reversed(range(len(raw_nodes))):
        node = raw_nodes[j]
        if node["children"]:
            union = np.unique(np.concatenate([geometry[c] for c in node["children"]]))
            given = node["faces"]
            if given is not None and not np.array_equal(np.unique(np.asarray(given, dtype=np.int64)), union):
                logger.debug("shape %d part %d: faces replaced by union of children", shape_index, j)
            geometry[j] = union
            seen: dict[int, int] = {}
            for c in node["children"]:
                for f in geometry[c]:
                    if f in seen:
                        logger.warning("shape %d: siblings %d and %d overlap (kept)", shape_index, seen[f], c)
                        break
                    seen[int(f)] = c
        else:
            if node["faces"] is None:
                raise SceneGraphError(f"shape {shape_index}: leaf {node['name']!r} has no faces")
            faces = np.unique(np.asarray(node["faces"], dtype=np.int64))
            if faces.size and (faces.min() < 0 or (n_faces is not None and faces.max() >= n_faces)):
                raise SceneGraphError(f"shape {shape_index}: leaf {node['name']!r} references missing faces")
            geometry[j] = faces

    nodes: List[PartNode] = []
    for j, node in enumerate(raw_nodes):
        is_root = node["parent"] is None
        tag = tags.root_tag if is_root else tags.lookup(node["name"])
        nodes.append(PartNode(
            id=(shape_index, j),
            faces=geometry[j],
            name=node["name"],
            tag=tag,
            children=list(node["children"]),
            parent=node["parent"],
            is_root=is_root,
        ))
    return SceneGraph(shape_index=shape_index, nodes=nodes, root=0)


def load_scene_graph(
    path: str | Path,
    tags: TagDictionary,
    shape_index: int = 0,
    n_faces: Optional[int] = None,
) -> SceneGraph:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneGraphError(f"{path}: invalid JSON ({exc})") from exc
    return scene_graph_from_dict(data, tags, shape_index=shape_index, n_faces=n_faces)


def scene_graph_to_dict(graph: SceneGraph, labels: Optional[Sequence[Optional[str]]] = None) -> dict:
    def encode(j: int) -> dict:
        node = graph.nodes[j]
        out = {"name": node.name, "faces": [int(f) for f in node.faces]}
        if labels is not None:
            out["label"] = labels[j]
        out["children"] = [encode(c) for c in node.children]
        return out

    return {"root": encode(graph.root)}


def write_scene_graph(graph: SceneGraph, path: str | Path, labels: Optional[Sequence[Optional[str]]] = None) -> None:
    Path(path).write_text(json.dumps(scene_graph_to_dict(graph, labels), indent=1), encoding="utf-8")


def graph_from_groups(mesh: Mesh, tags: TagDictionary, shape_index: int = 0) -> SceneGraph:
    """One leaf per OBJ group under a synthetic root (for meshes without a JSON graph)."""
    children = [{"name": name, "faces": ids.tolist(), "children": []} for name, ids in mesh.groups]
    if not children:
        children = [{"name": None, "faces": list(range(mesh.n_faces)), "children": []}]
    return scene_graph_from_dict({"root": {"name": None, "children": children}}, tags, shape_index, mesh.n_faces)


# ---------- components ----------

@dataclass
class ConnectedComponent:
    id: int
    face_indices: np.ndarray
    centroid: np.ndarray                      # area-weighted
    area: float


def edge_keys(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edge key per face corner pair, and the owning face of each."""
    f = mesh.faces
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    pairs.sort(axis=1)
    owner = np.tile(np.arange(mesh.n_faces), 3)
    return pairs, owner


def face_adjacency(mesh: Mesh) -> np.ndarray:
    """(m, 2) face pairs, a < b, sharing an undirected edge."""
    if mesh.n_faces == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs, owner = edge_keys(mesh)
    _, inverse = np.unique(pairs, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    inv_sorted, own_sorted = inverse[order], owner[order]
    out: List[tuple[int, int]] = []
    starts = np.flatnonzero(np.r_[True, inv_sorted[1:] != inv_sorted[:-1]])
    ends = np.r_[starts[1:], len(inv_sorted)]
    for s, e in zip(starts, ends):
        if e - s < 2:
            continue
        members = np.unique(own_sorted[s:e])
        for a_i in range(len(members)):
            for b_i in range(a_i + 1, len(members)):
                out.append((int(members[a_i]), int(members[b_i])))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.asarray(out, dtype=np.int64), axis=0)


def is_consistently_oriented(mesh: Mesh) -> bool:
    """True when every shared edge is traversed in opposite directions by its two faces."""
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    if len(directed) == 0:
        return True
    _, counts = np.unique(directed, axis=0, return_counts=True)
    return bool(counts.max() == 1)


def _component_record(mesh: Mesh, cid: int, faces: np.ndarray) -> ConnectedComponent:
    areas = mesh.face_areas[faces]
    total = float(areas.sum())
    cents = mesh.face_centroids[faces]
    centroid = (areas[:, None] * cents).sum(axis=0) / total if total > 0 else cents.mean(axis=0)
    return ConnectedComponent(id=cid, face_indices=faces, centroid=centroid, area=total)


def connected_components(mesh: Mesh) -> List[ConnectedComponent]:
    """Faces linked through shared undirected edges; ordered by smallest face id."""
    n = mesh.n_faces
    if n == 0:
        return []
    adj = face_adjacency(mesh)
    graph = coo_matrix((np.ones(len(adj)), (adj[:, 0], adj[:, 1])), shape=(n, n))
    _, labels = _csgraph_components(graph, directed=False)
    # relabel by first face so ids follow smallest face id
    _, first = np.unique(labels, return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    labels = rank[labels]
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(len(first) + 1))
    return [_component_record(mesh, c, order[bounds[c]:bounds[c + 1]]) for c in range(len(first))]


def component_of_faces(components: Sequence[ConnectedComponent], n_faces: int) -> np.ndarray:
    out = np.full(n_faces, -1, dtype=np.int64)
    for c in components:
        out[c.face_indices] = c.id
    return out


# ---------- neighborhoods ----------

def knn_k(n: int, cap: int = 30, fraction: float = 0.01) -> int:
    """K = min(cap, ceil(fraction * n)), at least 1."""
    return max(1, min(cap, math.ceil(round(n * fraction, 9))))


def knn_pairs(points: np.ndarray, k: int, mutual: bool = False) -> np.ndarray:
    """
    Undirected K-nearest-neighbor edges as sorted (u, v) rows, u < v.

    - ``mutual=False``: u-v kept when either is among the other's K nearest.
    - ``mutual=True``: kept only when both are.
    Ties in distance go to the lower index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2 or k < 1:
        return np.zeros((0, 2), dtype=np.int64)
    k = min(k, n - 1)
    query_k = min(n, k + 1 + 8)
    dist, idx = cKDTree(points).query(points, k=query_k)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    chosen = np.empty((n, k), dtype=np.int64)
    for u in range(n):
        keep = idx[u] != u
        cand_i, cand_d = idx[u][keep], dist[u][keep]
        order = np.lexsort((cand_i, cand_d))
        chosen[u] = cand_i[order[:k]]
    src = np.repeat(np.arange(n), k)
    dst = chosen.reshape(-1)
    pairs = np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    if mutual:
        uniq = uniq[counts == 2]
    return uniq


def knn_components(components: Sequence[ConnectedComponent], k: int) -> np.ndarray:
    """Edge set between component centroids; empty below two components."""
    if len(components) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    return knn_pairs(np.stack([c.centroid for c in components]), k)
