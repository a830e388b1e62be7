# processors/mrfseg.py
"""
Hierarchical mesh labeling.

A face classifier is trained on faces whose deepest known label may be an
internal hierarchy node: the loss marginalizes over the leaves under it with
the ancestor table A(leaf | deepest label). New meshes are labeled with an
MRF over connected components (or faces) whose pairwise cost is the tree
distance between leaves, solved by alpha-beta swap, and the labeled scene
graph is rebuilt bottom-up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components
from scipy.spatial import cKDTree
from scipy.special import log_softmax, logsumexp, softmax
from tqdm import tqdm

from ai.neuralnet import (
    AdamState,
    BranchMlpSpec,
    NetParams,
    adam_step,
    backward,
    face_classifier_spec,
    forward,
    init_glorot,
    load_checkpoint,
    save_checkpoint,
)
from config.settings import AdamConfig, ClassifierConfig, SegConfig
from processors.geomfeat import Standardizer, mesh_face_features
from processors.graphcut import MrfProblem, alpha_beta_swap, energy_of_labeling, unary_argmin
from processors.hierarchy import CanonicalHierarchy, distance_table
from services.errors import DataError, NumericFailureError, UsageError
from services.meshio import (
    Mesh,
    PartNode,
    SceneGraph,
    connected_components,
    face_adjacency,
    is_consistently_oriented,
    knn_components,
    knn_k,
    knn_pairs,
    scene_graph_to_dict,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


# ---------- label sets ----------

@dataclass
class LeafLabelSet:
    hierarchy: CanonicalHierarchy

    @cached_property
    def leaves(self) -> List[int]:
        return sorted(self.hierarchy.leaves())

    @cached_property
    def position(self) -> dict[int, int]:
        return {u: i for i, u in enumerate(self.leaves)}

    @cached_property
    def td(self) -> np.ndarray:
        """Tree distance between leaves, in ``leaves`` order."""
        return distance_table(self.hierarchy, self.leaves)

    @property
    def names(self) -> List[str]:
        return [self.hierarchy.names[u] for u in self.leaves]

    def __len__(self) -> int:
        return len(self.leaves)


@dataclass
class AncestorTable:
    labels: List[int]                         # hierarchy nodes, one column each
    leaves: List[int]                         # rows
    counts: np.ndarray                        # (n_leaves, n_labels)
    A: np.ndarray                             # column-normalized counts
    uniform_columns: List[int] = field(default_factory=list)

    @cached_property
    def column_of(self) -> dict[int, int]:
        return {b: j for j, b in enumerate(self.labels)}

    def columns(self, b: np.ndarray) -> np.ndarray:
        """Column index of every deepest label in ``b``."""
        try:
            return np.array([self.column_of[int(v)] for v in np.asarray(b).ravel()], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"label {exc.args[0]} is not in the hierarchy") from exc


def build_ancestor_table(known_leaf: np.ndarray, leafset: LeafLabelSet) -> AncestorTable:
    """
    Count every face with a known leaf ``a`` once for each label on the path
    from ``a`` to the root (``a`` included), then normalize columns. A label
    that never appears above a known leaf gets a uniform column over the leaves
    beneath it.
    """
    h = leafset.hierarchy
    labels = h.nodes
    col = {b: j for j, b in enumerate(labels)}
    counts = np.zeros((len(leafset), len(labels)))
    known = np.asarray(known_leaf, dtype=np.int64)
    known = known[known >= 0]
    values, freq = np.unique(known, return_counts=True)
    for a, n in zip(values, freq):
        if int(a) not in leafset.position:
            raise DataError(f"label {a} is not a leaf of the hierarchy")
        for b in h.ancestors(int(a)):
            counts[leafset.position[int(a)], col[b]] += n

    A = np.zeros_like(counts)
    total = counts.sum(axis=0)
    uniform: List[int] = []
    for b, j in col.items():
        if total[j] > 0:
            A[:, j] = counts[:, j] / total[j]
        else:
            below = [leafset.position[v] for v in h.leaves_under(b)]
            A[below, j] = 1.0 / len(below)
            uniform.append(b)
    if uniform:
        logger.warning("ancestor table: labels %s never refined to a known leaf (uniform columns)",
                       [h.names[b] for b in uniform])
    return AncestorTable(labels, list(leafset.leaves), counts, A, uniform)


# ---------- classifier ----------

@dataclass
class FaceClassifier:
    params: NetParams
    leaves: List[int]
    standardizer: Standardizer

    def scores(self, y: np.ndarray) -> np.ndarray:
        return forward(self.params, self.standardizer.apply(y))[0]


def face_log_probs(clf: FaceClassifier, y: np.ndarray) -> np.ndarray:
    if len(y) == 0:
        return np.zeros((0, len(clf.leaves)))
    return log_softmax(clf.scores(y), axis=1)


def face_probs(clf: FaceClassifier, y: np.ndarray) -> np.ndarray:
    return np.exp(face_log_probs(clf, y))


def _log_columns(A: np.ndarray, cols: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(A[:, cols].T)


def marginalized_loss(scores: np.ndarray, A: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Per-face -log sum_i A(i, b) P(i | y)."""
    log_a = _log_columns(A, cols)
    return -(logsumexp(scores + log_a, axis=1) - logsumexp(scores, axis=1))


def marginalized_grad(scores: np.ndarray, A: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """d loss / d scores = softmax(s) - softmax(s + log A[:, b]), per face."""
    return softmax(scores, axis=1) - softmax(scores + _log_columns(A, cols), axis=1)


def classifier_loss_and_grad(params: NetParams, y_std: np.ndarray, A: np.ndarray, cols: np.ndarray) -> tuple[float, NetParams]:
    """Mean marginalized loss over the batch and its gradient."""
    scores, cache = forward(params, y_std)
    n = max(len(y_std), 1)
    loss = float(marginalized_loss(scores, A, cols).sum()) / n
    return loss, backward(params, cache, marginalized_grad(scores, A, cols) / n)


def sampling_weights(areas: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Face area over the total area of its label, normalized to a distribution."""
    areas = np.asarray(areas, dtype=np.float64)
    b = np.asarray(b)
    _, inverse = np.unique(b, return_inverse=True)
    label_area = np.bincount(inverse.reshape(-1), weights=areas)
    denom = label_area[inverse.reshape(-1)]
    w = np.where(denom > 0, areas / np.where(denom > 0, denom, 1.0), 0.0)
    if w.sum() <= 0:
        return np.full(len(areas), 1.0 / max(len(areas), 1))
    return w / w.sum()


@dataclass
class ClassifierTrainResult:
    classifier: FaceClassifier
    trace: pd.DataFrame


def train_face_classifier(
    y: np.ndarray,
    b: np.ndarray,
    areas: np.ndarray,
    table: AncestorTable,
    cfg: ClassifierConfig,
    adam: Optional[AdamConfig] = None,
    spec: Optional[BranchMlpSpec] = None,
) -> ClassifierTrainResult:
    """
    Minimize the marginalized loss by mini-batch Adam. ``b`` holds the
    deepest known hierarchy label of each training face. Each epoch draws as
    many faces as there are, with probability proportional to face area over
    the area of its label.
    """
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise DataError("no labeled training faces")
    cols = table.columns(b)
    standardizer = Standardizer.fit(y)
    y_std = standardizer.apply(y)
    spec = spec or face_classifier_spec(len(table.leaves))
    if spec.output_dim != len(table.leaves):
        raise DataError(f"classifier has {spec.output_dim} outputs for {len(table.leaves)} leaves")

    rng = np.random.default_rng((cfg.seed, 5))
    params = init_glorot(spec, seed=(cfg.seed, 6))
    state = AdamState.create(params.size, adam, lr=cfg.lr)
    weights = sampling_weights(areas, b)
    n = len(y)
    batch = max(1, cfg.batch_size)
    trace = []

    for epoch in tqdm(range(1, cfg.epochs + 1), disable=not cfg.progress, desc="classifier"):
        draw = rng.choice(n, size=n, p=weights)
        losses = []
        for start in range(0, n, batch):
            idx = draw[start:start + batch]
            loss, grads = classifier_loss_and_grad(params, y_std[idx], table.A, cols[idx])
            if not np.isfinite(loss):
                raise NumericFailureError(f"classifier loss became {loss} in epoch {epoch}", last_good=params)
            vec = adam_step(params.vector(), grads.vector(), state)
            params = NetParams.from_vector(spec, vec)
            losses.append(loss)
        trace.append({"epoch": epoch, "loss": float(np.mean(losses))})
        logger.debug("classifier epoch %d: loss %.5f", epoch, trace[-1]["loss"])

    clf = FaceClassifier(params, list(table.leaves), standardizer)
    return ClassifierTrainResult(clf, pd.DataFrame(trace, columns=["epoch", "loss"]))


def deepest_face_labels(graph: SceneGraph, part_labels: Sequence[int], hierarchy: CanonicalHierarchy, n_faces: int) -> np.ndarray:
    """Hierarchy label of the leaf part owning each face; -1 when none applies."""
    owner = graph.deepest_part_per_face(n_faces)
    labels = np.asarray(part_labels, dtype=np.int64)
    out = np.full(n_faces, -1, dtype=np.int64)
    has = owner >= 0
    out[has] = labels[owner[has]]
    valid = (out >= 0) & (out < hierarchy.size)
    out[valid] = np.where(hierarchy.active[out[valid]], out[valid], -1)
    out[~valid] = -1
    return out


# ---------- unit probabilities ----------

def cc_probs(face_p: np.ndarray, components: Sequence, areas: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean face distribution per component; area-weighted when ``areas`` is given."""
    out = np.zeros((len(components), face_p.shape[1]))
    for c, comp in enumerate(components):
        faces = np.asarray(comp.face_indices if hasattr(comp, "face_indices") else comp, dtype=np.int64)
        if len(faces) == 0:
            raise DataError(f"component {c} has no faces")
        if areas is None:
            out[c] = face_p[faces].mean(axis=0)
        else:
            w = areas[faces]
            out[c] = (w[:, None] * face_p[faces]).sum(axis=0) / w.sum() if w.sum() > 0 else face_p[faces].mean(axis=0)
    return out


def unary_costs(probs: np.ndarray) -> np.ndarray:
    return -np.log(np.maximum(probs, PROB_FLOOR))


# ---------- MRF construction ----------

def build_cc_mrf(
    components: Sequence,
    unit_p: np.ndarray,
    leafset: LeafLabelSet,
    lam: float,
    cfg: Optional[SegConfig] = None,
) -> MrfProblem:
    cfg = cfg or SegConfig()
    if lam < 0:
        raise UsageError(f"lambda must be nonnegative, got {lam}")
    edges = knn_components(components, knn_k(len(components), cfg.knn_cap, cfg.knn_fraction))
    return MrfProblem(unary_costs(unit_p), edges, np.full(len(edges), float(lam)), leafset.td)


def face_edge_weights(mesh: Mesh, edges: np.ndarray, cfg: Optional[SegConfig] = None) -> np.ndarray:
    """
    lambda_t * exp(-kappa1 * 2 phi / pi - d^2 / (2 (kappa2 d_r)^2)) per edge;
    lambda_t = edge_bonus for faces sharing a mesh edge, else 1.
    """
    cfg = cfg or SegConfig()
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        return np.zeros(0)
    cents = mesh.face_centroids
    nearest, _ = cKDTree(cents).query(cents, k=2)
    d_r = float(np.mean(nearest[:, 1]))
    if d_r <= 0:
        d_r = 1.0

    normals = mesh.face_normals
    dots = (normals[edges[:, 0]] * normals[edges[:, 1]]).sum(axis=1)
    if not is_consistently_oriented(mesh):
        dots = np.abs(dots)
    phi = np.arccos(np.clip(dots, -1.0, 1.0))
    d = np.linalg.norm(cents[edges[:, 0]] - cents[edges[:, 1]], axis=1)

    shared = face_adjacency(mesh)
    n = mesh.n_faces
    bonus = np.isin(edges[:, 0] * n + edges[:, 1], shared[:, 0] * n + shared[:, 1])
    lam_t = np.where(bonus, cfg.edge_bonus, 1.0)
    return lam_t * np.exp(-cfg.kappa1 * 2.0 * phi / np.pi - d ** 2 / (2.0 * (cfg.kappa2 * d_r) ** 2))


def build_face_mrf(
    mesh: Mesh,
    face_p: np.ndarray,
    leafset: LeafLabelSet,
    lam: float,
    cfg: Optional[SegConfig] = None,
) -> MrfProblem:
    cfg = cfg or SegConfig()
    if lam < 0:
        raise UsageError(f"lambda must be nonnegative, got {lam}")
    k = knn_k(mesh.n_faces, cfg.knn_cap, cfg.knn_fraction)
    edges = knn_pairs(mesh.face_centroids, k, mutual=True)
    weights = lam * face_edge_weights(mesh, edges, cfg)
    return MrfProblem(unary_costs(face_p), edges, weights, leafset.td)


# ---------- bottom-up grouping ----------

@dataclass
class _Group:
    label: int
    units: List[int]
    children: List["_Group"] = field(default_factory=list)


def _connected(n: int, pairs: List[tuple[int, int]]) -> np.ndarray:
    if not pairs:
        return np.arange(n)
    arr = np.asarray(pairs, dtype=np.int64)
    graph = coo_matrix((np.ones(len(arr)), (arr[:, 0], arr[:, 1])), shape=(n, n))
    return _csgraph_components(graph, directed=False)[1]


def bottom_up_group(
    unit_labels: np.ndarray,
    adjacency: np.ndarray,
    unit_faces: Sequence[np.ndarray],
    hierarchy: CanonicalHierarchy,
    shape_index: int = 0,
) -> tuple[SceneGraph, List[int]]:
    """
    Scene graph from labeled units; returns the graph and the hierarchy label of every node.

    Adjacent units with the same leaf label form the leaf nodes. Then, deepest
    labels first, adjacent nodes whose labels share a parent are merged under
    a new node carrying that parent label (a node without such a neighbor still
    gets its own parent node), until every node hangs below the root.
    """
    unit_labels = np.asarray(unit_labels, dtype=np.int64)
    adjacency = np.asarray(adjacency, dtype=np.int64).reshape(-1, 2)
    n_units = len(unit_labels)

    same = [(int(u), int(v)) for u, v in adjacency if unit_labels[u] == unit_labels[v]]
    comp = _connected(n_units, same)
    frontier: List[_Group] = []
    first_unit: dict[int, int] = {}
    for unit in range(n_units):
        c = int(comp[unit])
        if c not in first_unit:
            first_unit[c] = len(frontier)
            frontier.append(_Group(int(unit_labels[unit]), []))
        frontier[first_unit[c]].units.append(unit)

    while True:
        depths = [hierarchy.depth(g.label) for g in frontier]
        deep = max(depths, default=0)
        if deep <= 1:
            break
        owner = np.full(n_units, -1, dtype=np.int64)
        for gi, g in enumerate(frontier):
            owner[g.units] = gi
        cand = [gi for gi, d in enumerate(depths) if d == deep]
        cand_pos = {gi: k for k, gi in enumerate(cand)}
        links = set()
        for u, v in adjacency:
            a, b = int(owner[u]), int(owner[v])
            if a != b and a in cand_pos and b in cand_pos:
                if hierarchy.parent[frontier[a].label] == hierarchy.parent[frontier[b].label]:
                    links.add((cand_pos[a], cand_pos[b]))
        merged = _connected(len(cand), sorted(links))
        new_groups: dict[int, _Group] = {}
        for k, gi in enumerate(cand):
            g = frontier[gi]
            key = int(merged[k])
            if key not in new_groups:
                new_groups[key] = _Group(int(hierarchy.parent[g.label]), [])
            new_groups[key].children.append(g)
            new_groups[key].units.extend(g.units)
        keep = [g for gi, g in enumerate(frontier) if gi not in cand_pos]
        frontier = keep + list(new_groups.values())
        frontier.sort(key=lambda g: min(g.units))

    root = _Group(hierarchy.root, list(range(n_units)), sorted(frontier, key=lambda g: min(g.units)))

    nodes: List[PartNode] = []
    labels: List[int] = []

    def emit(g: _Group, parent: Optional[int]) -> int:
        j = len(nodes)
        faces = np.unique(np.concatenate([np.asarray(unit_faces[u], dtype=np.int64) for u in g.units])) if g.units else np.zeros(0, dtype=np.int64)
        nodes.append(PartNode(id=(shape_index, j), faces=faces, name=hierarchy.names[g.label], parent=parent, is_root=parent is None))
        labels.append(g.label)
        for child in sorted(g.children, key=lambda c: min(c.units)):
            nodes[j].children.append(emit(child, j))
        return j

    emit(root, None)
    return SceneGraph(shape_index=shape_index, nodes=nodes, root=0), labels


# ---------- segmentation ----------

@dataclass
class SegModel:
    classifier: FaceClassifier
    hierarchy: CanonicalHierarchy
    ancestors: AncestorTable
    lam: float = 1.0
    meta: dict[str, Any] = field(default_factory=dict)

    @cached_property
    def leafset(self) -> LeafLabelSet:
        return LeafLabelSet(self.hierarchy)


@dataclass
class SegmentationResult:
    face_labels: np.ndarray                   # hierarchy leaf per face
    unit_labels: np.ndarray                   # hierarchy leaf per unit
    unit_faces: List[np.ndarray]
    unit_probs: np.ndarray                    # (n_units, n_leaves)
    graph: SceneGraph
    node_labels: List[int]
    energy: float
    unary_energy: float                       # energy of the per-unit argmax labeling
    granularity: str
    lam: float
    fallback: bool = False

    def to_dict(self, hierarchy: CanonicalHierarchy, shape_id: str = "") -> dict[str, Any]:
        return {
            "shape_id": shape_id,
            "granularity": self.granularity,
            "lambda": self.lam,
            "fallback": self.fallback,
            "energy": self.energy,
            "unary_energy": self.unary_energy,
            "face_labels": [int(v) for v in self.face_labels],
            "label_names": {str(u): hierarchy.names[u] for u in hierarchy.nodes},
            "unit_probs": np.round(self.unit_probs, 6).tolist(),
            "scene_graph": scene_graph_to_dict(self.graph, [hierarchy.names[u] for u in self.node_labels]),
        }


def segment_from_probs(
    mesh: Mesh,
    face_p: np.ndarray,
    model: SegModel,
    granularity: str = "component",
    lam: Optional[float] = None,
    cfg: Optional[SegConfig] = None,
    area_weighted_cc: bool = False,
    shape_index: int = 0,
) -> SegmentationResult:
    cfg = cfg or SegConfig()
    lam = model.lam if lam is None else float(lam)
    leafset = model.leafset
    if face_p.shape != (mesh.n_faces, len(leafset)):
        raise DataError(f"face probabilities {face_p.shape} do not fit {mesh.n_faces} faces x {len(leafset)} leaves")

    fallback = False
    if granularity == "component":
        comps = connected_components(mesh)
        if len(comps) <= 1:
            logger.warning("mesh has a single connected component; labeling faces instead")
            granularity, fallback = "face", True
    if granularity == "component":
        unit_faces = [c.face_indices for c in comps]
        unit_p = cc_probs(face_p, comps, mesh.face_areas if area_weighted_cc else None)
        problem = build_cc_mrf(comps, unit_p, leafset, lam, cfg)
    elif granularity == "face":
        unit_faces = [np.array([f]) for f in range(mesh.n_faces)]
        unit_p = face_p
        problem = build_face_mrf(mesh, face_p, leafset, lam, cfg)
    else:
        raise UsageError(f"granularity must be component or face, got {granularity!r}")

    init = unary_argmin(problem)
    solved = alpha_beta_swap(problem, init)
    leaves = np.asarray(leafset.leaves, dtype=np.int64)
    unit_labels = leaves[solved.labels]
    face_labels = np.full(mesh.n_faces, -1, dtype=np.int64)
    for faces, label in zip(unit_faces, unit_labels):
        face_labels[faces] = label
    graph, node_labels = bottom_up_group(unit_labels, problem.edges, unit_faces, model.hierarchy, shape_index)
    return SegmentationResult(
        face_labels=face_labels,
        unit_labels=unit_labels,
        unit_faces=unit_faces,
        unit_probs=unit_p,
        graph=graph,
        node_labels=node_labels,
        energy=solved.energy,
        unary_energy=energy_of_labeling(problem, init),
        granularity=granularity,
        lam=lam,
        fallback=fallback,
    )


def segment(
    mesh: Mesh,
    model: SegModel,
    granularity: str = "component",
    face_features: Optional[np.ndarray] = None,
    feature_cfg=None,
    cfg: Optional[SegConfig] = None,
    area_weighted_cc: bool = False,
    lam: Optional[float] = None,
) -> SegmentationResult:
    """Face features (computed unless given) -> classifier -> MRF -> scene graph."""
    if face_features is None:
        if feature_cfg is None:
            raise UsageError("segment needs face features or a feature config")
        face_features = mesh_face_features(mesh, feature_cfg).matrix()
    face_p = face_probs(model.classifier, face_features)
    return segment_from_probs(mesh, face_p, model, granularity, lam, cfg, area_weighted_cc)


# ---------- lambda selection ----------

def area_accuracy(pred: np.ndarray, truth: np.ndarray, areas: np.ndarray) -> float:
    areas = np.asarray(areas, dtype=np.float64)
    total = areas.sum()
    if total <= 0:
        return 0.0
    return float(areas[np.asarray(pred) == np.asarray(truth)].sum() / total)


@dataclass
class LabeledShape:
    shape_id: str
    mesh: Mesh
    face_p: np.ndarray                        # classifier output per face
    truth: np.ndarray                         # true hierarchy leaf per face (-1 unknown)


@dataclass
class XvalResult:
    lam: float
    table: pd.DataFrame                       # fold, lambda, accuracy
    fold_of: np.ndarray                       # fold index per shape


def xval_lambda(
    shapes: Sequence[LabeledShape],
    model: SegModel,
    grid: Sequence[float],
    folds: int = 5,
    granularity: str = "component",
    cfg: Optional[SegConfig] = None,
    seed: int = 0,
) -> XvalResult:
    """
    Grid search over lambda on labeled shapes the classifier was not fit on.

    Nothing is refit per fold: every shape is segmented once per lambda with
    the fixed classifier, and the k = min(folds, #shapes) folds only group
    those accuracies. The lambda with the best mean fold accuracy wins,
    smaller on ties. ``table`` holds one row per (fold, lambda).
    """
    grid = sorted(float(v) for v in grid)
    if not grid:
        raise UsageError("lambda grid is empty")
    if len(shapes) < 2:
        raise DataError("cross-validation needs at least two labeled shapes")
    k = min(folds, len(shapes))
    order = np.random.default_rng(seed).permutation(len(shapes))
    fold_of = np.empty(len(shapes), dtype=np.int64)
    fold_of[order] = np.arange(len(shapes)) % k

    acc = np.zeros((len(shapes), len(grid)))
    for i, shape in enumerate(shapes):
        for j, lam in enumerate(grid):
            res = segment_from_probs(shape.mesh, shape.face_p, model, granularity, lam, cfg, shape_index=i)
            acc[i, j] = area_accuracy(res.face_labels, shape.truth, shape.mesh.face_areas)

    rows = []
    for f in range(k):
        held = fold_of == f
        for j, lam in enumerate(grid):
            rows.append({"fold": f, "lambda": lam, "accuracy": float(acc[held, j].mean())})
    table = pd.DataFrame(rows, columns=["fold", "lambda", "accuracy"])
    means = table.groupby("lambda", sort=True)["accuracy"].mean()
    best_lam, best = grid[0], -np.inf
    for lam in grid:
        if means[lam] > best + 1e-12:
            best_lam, best = lam, float(means[lam])
    logger.info("cross-validated lambda %.3g (mean accuracy %.4f over %d folds)", best_lam, best, k)
    return XvalResult(best_lam, table, fold_of)


# ---------- bundle ----------

def save_seg_model(path: str | Path, model: SegModel, meta: Optional[Mapping[str, Any]] = None) -> None:
    # model fields win over caller meta
    header = dict(meta or {})
    header.update({
        "hierarchy": model.hierarchy.to_dict(),
        "leaves": list(model.classifier.leaves),
        "ancestor_labels": list(model.ancestors.labels),
        "uniform_columns": list(model.ancestors.uniform_columns),
        "lambda": model.lam,
    })
    arrays = {
        "A": model.ancestors.A,
        "counts": model.ancestors.counts,
        "feature_mean": model.classifier.standardizer.mean,
        "feature_std": model.classifier.standardizer.std,
    }
    save_checkpoint(path, model.classifier.params, arrays, header)


def load_seg_model(path: str | Path) -> SegModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"segmentation model not found: {path}")
    params, arrays, meta = load_checkpoint(path)
    try:
        hierarchy = CanonicalHierarchy.from_dict(meta["hierarchy"])
        leaves = [int(v) for v in meta["leaves"]]
        table = AncestorTable(
            labels=[int(v) for v in meta["ancestor_labels"]],
            leaves=leaves,
            counts=arrays["counts"].astype(np.float64),
            A=arrays["A"].astype(np.float64),
            uniform_columns=[int(v) for v in meta.get("uniform_columns", [])],
        )
        standardizer = Standardizer(arrays["feature_mean"].astype(np.float64), arrays["feature_std"].astype(np.float64))
    except KeyError as exc:
        raise DataError(f"{path}: segmentation model is missing {exc.args[0]!r}") from exc
    if sorted(hierarchy.leaves()) != leaves:
        raise DataError(f"{path}: classifier leaves do not match the stored hierarchy")
    clf = FaceClassifier(params, leaves, standardizer)
    return SegModel(clf, hierarchy, table, float(meta.get("lambda", 1.0)), meta)
