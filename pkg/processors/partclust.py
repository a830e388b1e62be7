# processors/partclust.py
"""
Joint part clustering.

Every part of every scene graph becomes one row of a ``PartTable``. The model
holds an embedding network f, D cluster centers, soft assignments p over the
D clusters plus a dedicated root label (index D), and the parent/child matrix
M with M[u, v] = P(parent label u | child label v). Training minimizes

    lambda_c E_c + lambda_s E_s + lambda_d E_d + lambda_m E_m - H

by alternating a coordinate-wise E-step on p, Adam steps on (theta, c) and a
stochastic-EM update of M, one mini-batch of shapes at a time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import entr, softmax
from tqdm import tqdm

from ai.neuralnet import (
    AdamState,
    BranchMlpSpec,
    NetParams,
    activation_pattern,
    adam_step,
    backward,
    embedding_spec,
    forward,
    init_glorot,
    load_checkpoint,
    save_checkpoint,
)
from config.settings import AdamConfig, EmConfig
from processors.geomfeat import Standardizer
from services.errors import DataError
from services.meshio import SceneGraph

logger = logging.getLogger(__name__)

# trailing non-image columns of a part descriptor (pca 9, com 3, diameter 1, area 1)
_GEOMETRY_TAIL = 14

TRACE_COLUMNS = ["epoch", "objective", "E_c", "E_s", "E_d", "E_m", "H"]


# ---------- part table ----------

@dataclass
class PartTable:
    shape_ids: List[str]
    shape_of: np.ndarray                      # (n,) shape position
    local: np.ndarray                         # (n,) node index inside its scene graph
    parent: np.ndarray                        # (n,) parent row, -1 on roots
    tag: np.ndarray                           # (n,) tag id, -1 untagged, n_tags on roots
    is_root: np.ndarray                       # (n,) bool
    x: np.ndarray                             # (n, dim) standardized descriptors
    n_tags: int
    standardizer: Optional[Standardizer] = None

    @classmethod
    def build(
        cls,
        graphs: Sequence[SceneGraph],
        features: Sequence[np.ndarray],
        n_tags: int,
        shape_ids: Optional[Sequence[str]] = None,
        standardizer: Optional[Standardizer] = None,
    ) -> "PartTable":
        if len(graphs) != len(features):
            raise DataError(f"{len(graphs)} scene graphs but {len(features)} feature matrices")
        if not graphs:
            raise DataError("no shapes to cluster")
        shape_of, local, parent, tag, is_root = [], [], [], [], []
        offset = 0
        for i, (graph, feats) in enumerate(zip(graphs, features)):
            if len(feats) != len(graph):
                raise DataError(f"shape {i}: {len(graph)} parts but {len(feats)} descriptor rows")
            for j, node in enumerate(graph.nodes):
                shape_of.append(i)
                local.append(j)
                parent.append(-1 if node.parent is None else offset + node.parent)
                is_root.append(node.is_root)
                if node.is_root:
                    tag.append(n_tags)
                else:
                    tag.append(-1 if node.tag is None else int(node.tag))
            offset += len(graph)
        raw = np.vstack([np.asarray(f, dtype=np.float64) for f in features])
        standardizer = standardizer or Standardizer.fit(raw)
        ids = list(shape_ids) if shape_ids is not None else [str(i) for i in range(len(graphs))]
        return cls(
            shape_ids=ids,
            shape_of=np.asarray(shape_of, dtype=np.int64),
            local=np.asarray(local, dtype=np.int64),
            parent=np.asarray(parent, dtype=np.int64),
            tag=np.asarray(tag, dtype=np.int64),
            is_root=np.asarray(is_root, dtype=bool),
            x=standardizer.apply(raw),
            n_tags=n_tags,
            standardizer=standardizer,
        )

    @property
    def n_rows(self) -> int:
        return len(self.shape_of)

    @property
    def n_shapes(self) -> int:
        return len(self.shape_ids)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.searchsorted(self.shape_of, np.arange(self.n_shapes + 1))

    def rows_for(self, shapes: Sequence[int]) -> np.ndarray:
        """Rows of the given shapes, ascending."""
        shapes = np.sort(np.asarray(shapes, dtype=np.int64))
        if len(shapes) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(self.offsets[s], self.offsets[s + 1]) for s in shapes])

    @cached_property
    def edges(self) -> np.ndarray:
        """(m, 2) rows of (parent, child)."""
        child = np.flatnonzero(self.parent >= 0)
        return np.stack([self.parent[child], child], axis=1)

    @cached_property
    def children(self) -> csr_matrix:
        """C[parent, child] = 1."""
        e = self.edges
        return csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(self.n_rows, self.n_rows))

    @cached_property
    def nonroot(self) -> np.ndarray:
        return np.flatnonzero(~self.is_root)

    def edges_within(self, rows: np.ndarray) -> np.ndarray:
        mask = np.zeros(self.n_rows, dtype=bool)
        mask[rows] = True
        e = self.edges
        return e[mask[e[:, 1]]]


# ---------- energies ----------

def l1_distances(emb: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return cdist(np.asarray(emb, dtype=np.float64), np.asarray(centers, dtype=np.float64), "cityblock")


def energy_Ec(p: np.ndarray, emb: np.ndarray, centers: np.ndarray) -> float:
    """sum_i sum_k p_ik |f_i - c_k|_1 over the first D columns of p."""
    if len(emb) == 0:
        return 0.0
    d = len(centers)
    return float((np.asarray(p)[:, :d] * l1_distances(emb, centers)).sum())


def energy_Es(emb: np.ndarray, pairs: np.ndarray) -> float:
    if len(pairs) == 0:
        return 0.0
    return float(np.abs(emb[pairs[:, 0]] - emb[pairs[:, 1]]).sum())


def energy_Ed(emb: np.ndarray, pairs: np.ndarray, sigma: float) -> float:
    if len(pairs) == 0:
        return 0.0
    dist = np.abs(emb[pairs[:, 0]] - emb[pairs[:, 1]]).sum(axis=1)
    return float(np.maximum(0.0, sigma - dist).sum())


def energy_Em(p: np.ndarray, M: np.ndarray, edges: np.ndarray) -> float:
    """-sum over (parent a, child b) of p_a^T ln(M) p_b."""
    if len(edges) == 0:
        return 0.0
    return float(-np.einsum("eu,uv,ev->", p[edges[:, 0]], np.log(M), p[edges[:, 1]]))


def entropy_H(p: np.ndarray) -> float:
    return float(entr(np.asarray(p, dtype=np.float64)).sum())


@dataclass(frozen=True)
class ObjectiveTerms:
    E_c: float
    E_s: float
    E_d: float
    E_m: float
    H: float
    objective: float

    def as_dict(self) -> dict[str, float]:
        return {
            "objective": self.objective,
            "E_c": self.E_c,
            "E_s": self.E_s,
            "E_d": self.E_d,
            "E_m": self.E_m,
            "H": self.H,
        }


# ---------- model ----------

@dataclass
class EmModel:
    params: NetParams
    centers: np.ndarray                       # (D, 64)
    p: np.ndarray                             # (n, D + 1), last column is the root label
    M: np.ndarray                             # (D + 1, D + 1)
    M_bar: np.ndarray                         # running parent/child statistics
    empty_tags: List[int] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.centers)

    @property
    def root_label(self) -> int:
        return len(self.centers)


def embed(params: NetParams, x: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return np.zeros((0, params.spec.output_dim))
    return forward(params, x)[0]


def objective_terms(
    model: EmModel,
    table: PartTable,
    cfg: EmConfig,
    rows: Optional[np.ndarray] = None,
    similar: Optional[np.ndarray] = None,
    dissimilar: Optional[np.ndarray] = None,
    emb: Optional[np.ndarray] = None,
) -> ObjectiveTerms:
    """
    Objective over ``rows`` (all rows by default). ``similar`` / ``dissimilar``
    hold global row pairs; ``emb`` may pass precomputed embeddings of ``rows``.
    """
    rows = np.arange(table.n_rows) if rows is None else np.asarray(rows, dtype=np.int64)
    if emb is None:
        emb = embed(model.params, table.x[rows])
    pos = np.full(table.n_rows, -1, dtype=np.int64)
    pos[rows] = np.arange(len(rows))
    keep = ~table.is_root[rows]
    sim = np.zeros((0, 2), dtype=np.int64) if similar is None else pos[similar]
    dis = np.zeros((0, 2), dtype=np.int64) if dissimilar is None else pos[dissimilar]

    e_c = energy_Ec(model.p[rows][keep], emb[keep], model.centers)
    e_s = energy_Es(emb, sim)
    e_d = energy_Ed(emb, dis, cfg.sigma_d)
    e_m = energy_Em(model.p, model.M, table.edges_within(rows))
    h = entropy_H(model.p[rows][keep])
    total = cfg.lambda_c * e_c + cfg.lambda_s * e_s + cfg.lambda_d * e_d + cfg.lambda_m * e_m - h
    return ObjectiveTerms(e_c, e_s, e_d, e_m, h, total)


# ---------- E-step ----------

def e_step(
    p: np.ndarray,
    emb: np.ndarray,
    centers: np.ndarray,
    M: np.ndarray,
    table: PartTable,
    cfg: EmConfig,
    rows: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Coordinate-wise update of the non-root rows among ``rows`` (``emb`` aligned
    with ``rows``), ``cfg.e_step_passes`` sweeps in scene-graph preorder.

    Each node gets the exact minimizer of lambda_c E_c + lambda_m E_m - H with
    every other node held fixed. Shapes do not interact, so all nodes with the
    same preorder index are updated together.
    """
    rows = np.arange(table.n_rows) if rows is None else np.asarray(rows, dtype=np.int64)
    d = len(centers)
    p = np.array(p, dtype=np.float64, copy=True)
    keep = ~table.is_root[rows]
    sel = rows[keep]
    if len(sel) == 0:
        return p

    base = np.full((len(sel), d + 1), -np.inf)
    base[:, :d] = -cfg.lambda_c * l1_distances(emb[keep], centers)
    ln_m = np.log(M)

    order = np.argsort(table.local[sel], kind="stable")
    locals_sorted = table.local[sel][order]
    bounds = np.flatnonzero(np.r_[True, locals_sorted[1:] != locals_sorted[:-1], True])
    groups = [order[bounds[g]:bounds[g + 1]] for g in range(len(bounds) - 1)]

    children = table.children
    for _ in range(cfg.e_step_passes):
        for g in groups:
            nodes = sel[g]
            child_sum = np.asarray(children[nodes] @ p)
            parent_p = p[table.parent[nodes]]
            score = base[g] + cfg.lambda_m * (child_sum @ ln_m.T + parent_p @ ln_m)
            p[nodes] = softmax(score, axis=1)
    return p


# ---------- M updates ----------

def parent_child_stats(p: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """sum over edges of p_parent p_child^T."""
    k = p.shape[1]
    if len(edges) == 0:
        return np.zeros((k, k))
    return p[edges[:, 0]].T @ p[edges[:, 1]]


def normc_eps(stats: np.ndarray, eps: float, root_label: Optional[int] = None) -> tuple[np.ndarray, List[int]]:
    """Column-normalize, all-zero columns become uniform, then add ``eps``; returns (M, zero columns)."""
    stats = np.asarray(stats, dtype=np.float64)
    k = stats.shape[0]
    col = stats.sum(axis=0)
    zero = col <= 0.0
    M = stats / np.where(zero, 1.0, col)
    M[:, zero] = 1.0 / k
    flagged = [int(v) for v in np.flatnonzero(zero)]
    unexpected = [v for v in flagged if v != root_label]
    if unexpected:
        logger.warning("parent/child matrix: no child evidence for clusters %s (set uniform)", unexpected)
    if root_label in flagged:
        logger.debug("parent/child matrix: root column uniform")
    return M + eps, flagged


def m_step_M(p: np.ndarray, edges: np.ndarray, eps: float, root_label: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch update; returns (M, statistics)."""
    stats = parent_child_stats(p, edges)
    M, _ = normc_eps(stats, eps, root_label)
    return M, stats


def m_step_M_minibatch(
    M_bar: np.ndarray,
    p: np.ndarray,
    batch_edges: np.ndarray,
    eta: float,
    eps: float,
    root_label: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """M_bar <- (1 - eta) M_bar + eta * batch statistics; returns (M_bar, M)."""
    M_bar = (1.0 - eta) * M_bar + eta * parent_child_stats(p, batch_edges)
    M, _ = normc_eps(M_bar, eps, root_label)
    return M_bar, M


# ---------- pairs ----------

def near_duplicate_pairs(x: np.ndarray, delta: float, rows: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Row pairs (a < b) whose standardized descriptors are within squared L2 ``delta``.
    The geometry tail prefilters candidates with a KD-tree; the full vector decides.
    """
    rows = np.arange(len(x)) if rows is None else np.asarray(rows, dtype=np.int64)
    if len(rows) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    tail = x[rows][:, -min(_GEOMETRY_TAIL, x.shape[1]):]
    cand = cKDTree(tail).query_pairs(np.sqrt(delta), output_type="ndarray")
    if len(cand) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    a, b = rows[cand[:, 0]], rows[cand[:, 1]]
    close = ((x[a] - x[b]) ** 2).sum(axis=1) <= delta
    out = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)[close]
    return out[np.lexsort((out[:, 1], out[:, 0]))]


def sample_similar_pairs(
    table: PartTable,
    rows: np.ndarray,
    n_pairs: int,
    rng: np.random.Generator,
    near_duplicates: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    ``n_pairs`` random same-tag pairs among the tagged non-root ``rows`` (with
    replacement), plus every near-duplicate pair lying inside ``rows``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    rows = rows[~table.is_root[rows]]
    tagged = rows[table.tag[rows] >= 0]
    out = [np.zeros((0, 2), dtype=np.int64)]
    if len(tagged) >= 2 and n_pairs > 0:
        order = np.argsort(table.tag[tagged], kind="stable")
        tagged = tagged[order]
        tags = table.tag[tagged]
        starts = np.searchsorted(tags, tags, side="left")
        sizes = np.searchsorted(tags, tags, side="right") - starts
        eligible = np.flatnonzero(sizes >= 2)
        if len(eligible):
            a_pos = eligible[rng.integers(len(eligible), size=n_pairs)]
            b_off = rng.integers(sizes[a_pos] - 1)
            b_pos = starts[a_pos] + b_off
            b_pos = b_pos + (b_pos >= a_pos)
            a, b = tagged[a_pos], tagged[b_pos]
            out.append(np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1))
    if near_duplicates is not None and len(near_duplicates):
        inside = np.zeros(table.n_rows, dtype=bool)
        inside[rows] = True
        out.append(near_duplicates[inside[near_duplicates[:, 0]] & inside[near_duplicates[:, 1]]])
    return np.concatenate(out)


def is_similar(table: PartTable, a: np.ndarray, b: np.ndarray, near_duplicates: Optional[np.ndarray] = None) -> np.ndarray:
    """Membership in S: both tagged with the same tag, or a near-duplicate pair."""
    same = (table.tag[a] >= 0) & (table.tag[a] == table.tag[b])
    if near_duplicates is not None and len(near_duplicates):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        key = lo * table.n_rows + hi
        dup_key = near_duplicates[:, 0] * table.n_rows + near_duplicates[:, 1]
        same |= np.isin(key, dup_key)
    return same


def sample_dissimilar_pairs(
    table: PartTable,
    shapes: Sequence[int],
    n_pairs: int,
    rng: np.random.Generator,
    near_duplicates: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Same-shape non-root pairs outside S; sampled down to ``n_pairs`` when there are more."""
    out = []
    for s in shapes:
        rows = np.arange(table.offsets[s], table.offsets[s + 1])
        rows = rows[~table.is_root[rows]]
        if len(rows) < 2:
            continue
        iu, ju = np.triu_indices(len(rows), k=1)
        out.append(np.stack([rows[iu], rows[ju]], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate(out)
    pairs = pairs[~is_similar(table, pairs[:, 0], pairs[:, 1], near_duplicates)]
    if len(pairs) > n_pairs:
        pairs = pairs[np.sort(rng.choice(len(pairs), size=n_pairs, replace=False))]
    return pairs


# ---------- M-step for theta and c ----------

@dataclass
class SgdBatch:
    x: np.ndarray                             # (r, dim) non-root descriptors
    p: np.ndarray                             # (r, D) assignments without the root column
    similar: np.ndarray                       # (s, 2) positions into x
    dissimilar: np.ndarray                    # (q, 2) positions into x


def make_sgd_batch(table: PartTable, p: np.ndarray, rows: np.ndarray, similar: np.ndarray, dissimilar: np.ndarray, n_clusters: int) -> SgdBatch:
    rows = np.asarray(rows, dtype=np.int64)
    rows = rows[~table.is_root[rows]]
    pos = np.full(table.n_rows, -1, dtype=np.int64)
    pos[rows] = np.arange(len(rows))
    sim = pos[similar] if len(similar) else np.zeros((0, 2), dtype=np.int64)
    dis = pos[dissimilar] if len(dissimilar) else np.zeros((0, 2), dtype=np.int64)
    if (sim < 0).any() or (dis < 0).any():
        raise DataError("pair references a row outside the batch")
    return SgdBatch(table.x[rows], p[rows, :n_clusters], sim, dis)


def sgd_loss_and_grad(
    params: NetParams,
    centers: np.ndarray,
    batch: SgdBatch,
    cfg: EmConfig,
) -> tuple[float, NetParams, np.ndarray]:
    """
    lambda_c E_c + lambda_s E_s + lambda_d E_d on the batch and its subgradient
    (sign(0) = 0) with respect to the network weights and the centers.
    """
    emb, cache = forward(params, batch.x)
    g_emb = np.zeros_like(emb)
    g_c = np.zeros_like(centers)
    loss = 0.0

    if cfg.lambda_c:
        diff = emb[:, None, :] - centers[None, :, :]
        sgn = np.sign(diff)
        loss += cfg.lambda_c * float((batch.p * np.abs(diff).sum(axis=2)).sum())
        g_emb += cfg.lambda_c * np.einsum("rk,rkd->rd", batch.p, sgn)
        g_c -= cfg.lambda_c * np.einsum("rk,rkd->kd", batch.p, sgn)

    if cfg.lambda_s and len(batch.similar):
        a, b = batch.similar[:, 0], batch.similar[:, 1]
        diff = emb[a] - emb[b]
        s = np.sign(diff)
        loss += cfg.lambda_s * float(np.abs(diff).sum())
        np.add.at(g_emb, a, cfg.lambda_s * s)
        np.add.at(g_emb, b, -cfg.lambda_s * s)

    if cfg.lambda_d and len(batch.dissimilar):
        a, b = batch.dissimilar[:, 0], batch.dissimilar[:, 1]
        diff = emb[a] - emb[b]
        dist = np.abs(diff).sum(axis=1)
        active = dist < cfg.sigma_d
        loss += cfg.lambda_d * float((cfg.sigma_d - dist[active]).sum())
        s = np.sign(diff[active])
        np.add.at(g_emb, a[active], -cfg.lambda_d * s)
        np.add.at(g_emb, b[active], cfg.lambda_d * s)

    return loss, backward(params, cache, g_emb), g_c


def kink_pattern(params: NetParams, centers: np.ndarray, batch: SgdBatch, cfg: EmConfig) -> np.ndarray:
    """ReLU masks, L1 signs and active hinges; the loss is smooth while this stays fixed."""
    emb, cache = forward(params, batch.x)
    parts = [activation_pattern(cache), np.sign(emb[:, None, :] - centers[None, :, :]).ravel()]
    if len(batch.similar):
        parts.append(np.sign(emb[batch.similar[:, 0]] - emb[batch.similar[:, 1]]).ravel())
    if len(batch.dissimilar):
        diff = emb[batch.dissimilar[:, 0]] - emb[batch.dissimilar[:, 1]]
        parts.append(np.sign(diff).ravel())
        parts.append((np.abs(diff).sum(axis=1) < cfg.sigma_d).astype(np.float64))
    return np.concatenate([np.asarray(v, dtype=np.float64) for v in parts])


def pack(params: NetParams, centers: np.ndarray) -> np.ndarray:
    return np.concatenate([params.vector(), np.asarray(centers, dtype=np.float64).ravel()])


def unpack(spec: BranchMlpSpec, vec: np.ndarray, n_clusters: int) -> tuple[NetParams, np.ndarray]:
    n_c = n_clusters * spec.output_dim
    split = len(vec) - n_c
    return NetParams.from_vector(spec, vec[:split]), np.asarray(vec[split:]).reshape(n_clusters, spec.output_dim)


def m_step_sgd(
    params: NetParams,
    centers: np.ndarray,
    batch: SgdBatch,
    cfg: EmConfig,
    state: AdamState,
) -> tuple[NetParams, np.ndarray, float]:
    """One Adam step on (theta, c); p and M stay fixed."""
    loss, g_params, g_c = sgd_loss_and_grad(params, centers, batch, cfg)
    vec = adam_step(pack(params, centers), pack(g_params, g_c), state)
    new_params, new_centers = unpack(params.spec, vec, len(centers))
    return new_params, new_centers, loss


# ---------- initialization ----------

def _one_hot_nearest(dist: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(dist), width))
    if len(dist):
        out[np.arange(len(dist)), np.argmin(dist, axis=1)] = 1.0
    return out


def init_model(table: PartTable, cfg: EmConfig, spec: Optional[BranchMlpSpec] = None) -> EmModel:
    """
    Glorot weights; centers at the mean embedding of each tag (random normal
    for tags without parts and for the extra clusters); hard nearest-center p;
    M from the full-batch update.
    """
    d = cfg.clusters_for(table.n_tags)
    if d < table.n_tags:
        raise DataError(f"{d} clusters cannot hold {table.n_tags} tags")
    spec = spec or embedding_spec(table.x.shape[1] - _GEOMETRY_TAIL)
    rng = np.random.default_rng((cfg.seed, 1))
    params = init_glorot(spec, seed=(cfg.seed, 0))
    emb = embed(params, table.x)

    centers = rng.standard_normal((d, spec.output_dim))
    empty: List[int] = []
    for t in range(table.n_tags):
        members = np.flatnonzero((table.tag == t) & ~table.is_root)
        if len(members):
            centers[t] = emb[members].mean(axis=0)
        else:
            empty.append(t)
    if empty:
        logger.warning("tags %s label no parts; their centers start at random", empty)

    p = np.zeros((table.n_rows, d + 1))
    p[table.is_root, d] = 1.0
    nonroot = table.nonroot
    p[nonroot] = _one_hot_nearest(l1_distances(emb[nonroot], centers), d + 1)
    M, stats = m_step_M(p, table.edges, cfg.epsilon, root_label=d)
    return EmModel(params=params, centers=centers, p=p, M=M, M_bar=stats, empty_tags=empty)


# ---------- training ----------

@dataclass
class TrainResult:
    model: EmModel
    trace: pd.DataFrame


@dataclass
class _Monitor:
    rows: np.ndarray
    similar: np.ndarray
    dissimilar: np.ndarray


def _monitor_set(table: PartTable, cfg: EmConfig, near: np.ndarray) -> _Monitor:
    rng = np.random.default_rng((cfg.seed, 3))
    chosen: List[int] = []
    count = 0
    for s in rng.permutation(table.n_shapes):
        chosen.append(int(s))
        count += int(np.count_nonzero(~table.is_root[table.offsets[s]:table.offsets[s + 1]]))
        if count >= cfg.monitor_parts:
            break
    rows = table.rows_for(chosen)
    similar = sample_similar_pairs(table, rows, cfg.pairs_per_batch, rng, near)
    dissimilar = sample_dissimilar_pairs(table, sorted(chosen), cfg.pairs_per_batch, rng, near)
    return _Monitor(rows, similar, dissimilar)


def _trace_row(epoch: int, model: EmModel, table: PartTable, cfg: EmConfig, monitor: _Monitor) -> dict[str, Any]:
    terms = objective_terms(model, table, cfg, monitor.rows, monitor.similar, monitor.dissimilar)
    return {"epoch": epoch, **terms.as_dict()}


def train(
    table: PartTable,
    cfg: EmConfig,
    adam: Optional[AdamConfig] = None,
    model: Optional[EmModel] = None,
) -> TrainResult:
    """
    Mini-batch training. Per epoch the shapes are shuffled; per batch of
    ``cfg.batch_shapes`` shapes: sample S and D pairs, run the E-step on the
    batch, take ``cfg.m_step_iters`` Adam steps on (theta, c) and fold the
    batch statistics into M. The monitor objective is recorded after each epoch
    (epoch 0 is the initialization).
    """
    model = model or init_model(table, cfg)
    rng = np.random.default_rng((cfg.seed, 2))
    near = near_duplicate_pairs(table.x, cfg.delta, table.nonroot)
    logger.info("%d parts in %d shapes, %d near-duplicate pairs, D = %d",
                len(table.nonroot), table.n_shapes, len(near), model.n_clusters)
    monitor = _monitor_set(table, cfg, near)
    rows_trace = [_trace_row(0, model, table, cfg, monitor)]
    if cfg.epochs <= 0:
        return TrainResult(model, pd.DataFrame(rows_trace, columns=TRACE_COLUMNS))

    batch_size = max(1, min(cfg.batch_shapes, table.n_shapes))
    model.M_bar = model.M_bar * (batch_size / table.n_shapes)
    state = AdamState.create(model.params.size + model.centers.size, adam)
    root = model.root_label

    for epoch in tqdm(range(1, cfg.epochs + 1), disable=not cfg.progress, desc="em"):
        order = rng.permutation(table.n_shapes)
        for start in range(0, table.n_shapes, batch_size):
            shapes = np.sort(order[start:start + batch_size])
            rows = table.rows_for(shapes)
            similar = sample_similar_pairs(table, rows, cfg.pairs_per_batch, rng, near)
            dissimilar = sample_dissimilar_pairs(table, shapes, cfg.pairs_per_batch, rng, near)

            emb = embed(model.params, table.x[rows])
            model.p = e_step(model.p, emb, model.centers, model.M, table, cfg, rows)

            batch = make_sgd_batch(table, model.p, rows, similar, dissimilar, model.n_clusters)
            for _ in range(cfg.m_step_iters):
                model.params, model.centers, _ = m_step_sgd(model.params, model.centers, batch, cfg, state)

            model.M_bar, model.M = m_step_M_minibatch(
                model.M_bar, model.p, table.edges_within(rows), cfg.eta, cfg.epsilon, root
            )
        row = _trace_row(epoch, model, table, cfg, monitor)
        rows_trace.append(row)
        logger.info("epoch %d: objective %.4f", epoch, row["objective"])

    model.p = e_step(model.p, embed(model.params, table.x), model.centers, model.M, table, cfg)
    return TrainResult(model, pd.DataFrame(rows_trace, columns=TRACE_COLUMNS))


def alternate_full_batch(model: EmModel, table: PartTable, cfg: EmConfig, rounds: int = 10) -> List[float]:
    """
    Exact E-step and exact M update on all rows with theta and c frozen.
    Returns the objective before the first round and after every round.
    """
    emb = embed(model.params, table.x)
    rng = np.random.default_rng((cfg.seed, 4))
    all_shapes = list(range(table.n_shapes))
    similar = sample_similar_pairs(table, np.arange(table.n_rows), cfg.pairs_per_batch, rng)
    dissimilar = sample_dissimilar_pairs(table, all_shapes, cfg.pairs_per_batch, rng)

    def value() -> float:
        return objective_terms(model, table, cfg, None, similar, dissimilar, emb).objective

    out = [value()]
    for _ in range(rounds):
        model.p = e_step(model.p, emb, model.centers, model.M, table, cfg)
        model.M, model.M_bar = m_step_M(model.p, table.edges, cfg.epsilon, model.root_label)
        out.append(value())
    return out


# ---------- hard labels ----------

def label_parts(p: np.ndarray) -> np.ndarray:
    """argmax per row, lowest index on ties."""
    return np.argmax(np.asarray(p), axis=1)


def naive_labels(table: PartTable) -> np.ndarray:
    """
    Tags used as-is; each untagged part takes the tag whose mean standardized
    descriptor is nearest in L1. Roots keep the root tag.
    """
    out = table.tag.copy()
    nonroot = table.nonroot
    tagged = nonroot[table.tag[nonroot] >= 0]
    untagged = nonroot[table.tag[nonroot] < 0]
    present = np.unique(table.tag[tagged])
    if len(untagged) == 0 or len(present) == 0:
        return out
    means = np.stack([table.x[tagged[table.tag[tagged] == t]].mean(axis=0) for t in present])
    out[untagged] = present[np.argmin(l1_distances(table.x[untagged], means), axis=1)]
    return out


# ---------- bundle ----------

def save_part_model(
    path: str | Path,
    model: EmModel,
    table: PartTable,
    tags: Sequence[str],
    meta: Optional[Mapping[str, Any]] = None,
) -> None:
    arrays = {
        "centers": model.centers,
        "M": model.M,
        "M_bar": model.M_bar,
        "p": model.p,
        "feature_mean": table.standardizer.mean if table.standardizer else np.zeros(table.x.shape[1]),
        "feature_std": table.standardizer.std if table.standardizer else np.ones(table.x.shape[1]),
    }
    header = {"tags": list(tags), "shape_ids": table.shape_ids, "empty_tags": model.empty_tags}
    header.update(meta or {})
    save_checkpoint(path, model.params, arrays, header)


@dataclass
class PartModelBundle:
    model: EmModel
    standardizer: Standardizer
    meta: dict[str, Any]


def load_part_model(path: str | Path) -> PartModelBundle:
    params, arrays, meta = load_checkpoint(path)
    for key in ("centers", "M", "M_bar", "p", "feature_mean", "feature_std"):
        if key not in arrays:
            raise DataError(f"{path}: part model is missing {key!r}")
    model = EmModel(
        params=params,
        centers=arrays["centers"].astype(np.float64),
        p=arrays["p"].astype(np.float64),
        M=arrays["M"].astype(np.float64),
        M_bar=arrays["M_bar"].astype(np.float64),
        empty_tags=list(meta.get("empty_tags", [])),
    )
    return PartModelBundle(model, Standardizer(arrays["feature_mean"], arrays["feature_std"]), meta)
