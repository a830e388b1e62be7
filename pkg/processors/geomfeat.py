# processors/geomfeat.py
from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from tqdm import tqdm

from config.settings import FeatureConfig
from processors.render import hog_length, lightfield_hog
from services.errors import DataError, DegenerateGeometryError
from services.meshio import Mesh, SceneGraph

logger = logging.getLogger(__name__)


# Descriptor layouts (block name, width)
FACE_BLOCKS = (
    ("curvature", 2),
    ("lpca", 6),
    ("lvar", 1),
    ("si", 64),
    ("sc", 36),
    ("dd", 32),
    ("pp", 3),
    ("pn", 3),
)


def part_blocks(render_size: int = 64) -> tuple[tuple[str, int], ...]:
    return (
        ("lfd", 3 * hog_length(render_size)),
        ("pca", 9),
        ("com", 3),
        ("diameter", 1),
        ("area", 1),
    )


def block_slices(blocks: Sequence[tuple[str, int]]) -> dict[str, slice]:
    out, start = {}, 0
    for name, width in blocks:
        out[name] = slice(start, start + width)
        start += width
    return out


SI_BINS = 8
SC_RADIAL = 6
SC_ELEVATION = 6
DD_BINS = 32


# ---------- normalization ----------

@dataclass(frozen=True)
class Transform:
    """p -> (p + translation) * scale."""

    translation: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + self.translation) * self.scale


def normalize_for_features(mesh: Mesh, faces: Optional[Sequence[int]] = None) -> Transform:
    """Center the bounding box of the geometry at the origin and scale its diagonal to 1."""
    if faces is None:
        pts = mesh.vertices[np.unique(mesh.faces)] if mesh.n_faces else mesh.vertices
    else:
        ids = np.asarray(faces, dtype=np.int64)
        pts = mesh.vertices[np.unique(mesh.faces[ids])] if ids.size else np.zeros((0, 3))
    if len(pts) == 0:
        raise DegenerateGeometryError("cannot normalize empty geometry")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diameter = float(np.linalg.norm(hi - lo))
    if diameter <= 1e-12:
        raise DegenerateGeometryError("geometry has zero bounding-box diameter")
    return Transform(translation=-(lo + hi) / 2.0, scale=1.0 / diameter)


def normalized_mesh(mesh: Mesh) -> tuple[Mesh, Transform]:
    t = normalize_for_features(mesh)
    return Mesh(t.apply(mesh.vertices), mesh.faces.copy()), t


# ---------- PCA frames ----------

@dataclass(frozen=True)
class PcaFrame:
    axes: np.ndarray                          # rows, descending eigenvalue
    eigenvalues: np.ndarray
    degenerate: bool = False


def _fix_signs(axes: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip each row so its z component is positive; ties fall back to y, then x."""
    out = axes.copy()
    for r in range(3):
        for c in (2, 1, 0):
            if abs(out[r, c]) > tol:
                if out[r, c] < 0:
                    out[r] = -out[r]
                break
    return out


def _orthogonal(a: np.ndarray) -> np.ndarray:
    helper = np.eye(3)[int(np.argmin(np.abs(a)))]
    b = np.cross(a, helper)
    return b / np.linalg.norm(b)


def pca_frame(points: np.ndarray) -> PcaFrame:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        return PcaFrame(np.eye(3), np.zeros(3), degenerate=True)
    cov = np.cov(pts.T, bias=True)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(-w, kind="stable")
    w = np.clip(w[order], 0.0, None)
    axes = v[:, order].T.copy()

    rank = int((w > 1e-10 * w[0]).sum()) if w[0] > 1e-24 else 0
    if rank == 2:
        axes[2] = np.cross(axes[0], axes[1])
    elif rank == 1:
        axes[1] = _orthogonal(axes[0])
        axes[2] = np.cross(axes[0], axes[1])
    elif rank == 0:
        axes = np.eye(3)
    if rank < 3:
        logger.debug("degenerate PCA frame (rank %d)", rank)
    return PcaFrame(_fix_signs(axes), w, degenerate=rank < 3)


# ---------- point samples ----------

@dataclass
class PointSampleSet:
    points: np.ndarray                        # (n, 3)
    normals: np.ndarray                       # (n, 3), normal of the source face
    face_of: np.ndarray                       # (n,)
    seed: object = None

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.points)

    def neighbors(self, query: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
        """Indices (m, k') of the nearest samples; k' < k (flagged) when the set is small."""
        kk = min(k, len(self))
        _, idx = self.tree.query(np.asarray(query, dtype=np.float64), k=kk)
        idx = np.asarray(idx).reshape(len(query), kk)
        return idx, kk < k


def sample_surface(
    mesh: Mesh,
    n: int,
    seed: int | Sequence[int] = 0,
    faces: Optional[Sequence[int]] = None,
) -> PointSampleSet:
    """
    Area-uniform samples with stratified per-face counts: each face gets
    floor(n * area share), leftovers go to the largest fractional shares.
    """
    ids = np.arange(mesh.n_faces) if faces is None else np.asarray(faces, dtype=np.int64)
    areas = mesh.face_areas[ids] if ids.size else np.zeros(0)
    total = float(areas.sum())
    if n <= 0 or total <= 0.0:
        return PointSampleSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), seed)

    expected = n * areas / total
    counts = np.floor(expected).astype(np.int64)
    remainder = n - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(expected - counts), kind="stable")
        counts[order[:remainder]] += 1
    face_of = np.repeat(ids, counts)

    rng = np.random.default_rng(seed)
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    tri = mesh.vertices[mesh.faces[face_of]]
    points = (1.0 - r1) * tri[:, 0] + r1 * (1.0 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]
    return PointSampleSet(points, mesh.face_normals[face_of], face_of, seed)


# ---------- voxels ----------

def _tri_box_overlap(tri: np.ndarray, centers: np.ndarray, half: float) -> np.ndarray:
    """Separating-axis test of one triangle against many axis-aligned cubes."""
    v = tri[None, :, :] - centers[:, None, :]
    ok = np.all((v.min(axis=1) <= half) & (v.max(axis=1) >= -half), axis=1)
    edges = np.array([tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]])
    normal = np.cross(edges[0], edges[1])
    ok &= np.abs(v[:, 0] @ normal) <= half * np.abs(normal).sum()
    for axis in np.eye(3):
        for e in edges:
            a = np.cross(axis, e)
            if not np.any(np.abs(a) > 1e-15):
                continue
            p = v @ a
            r = half * np.abs(a).sum()
            ok &= (p.min(axis=1) <= r) & (p.max(axis=1) >= -r)
    return ok


@dataclass(frozen=True)
class VoxelGrid:
    """Cubic n^3 grid over the whole object's bounding box (longest side spans n cells)."""

    origin: np.ndarray
    cell: float
    n: int = 30

    @classmethod
    def fit(cls, vertices: np.ndarray, n: int = 30) -> "VoxelGrid":
        lo, hi = vertices.min(axis=0), vertices.max(axis=0)
        extent = float((hi - lo).max())
        return cls(origin=lo, cell=extent / n if extent > 0 else 1.0, n=n)

    def face_cells(self, mesh: Mesh, eps: float = 1e-9) -> List[np.ndarray]:
        """Linear ids of the cells each face touches."""
        n = self.n
        grid_tris = (mesh.vertices[mesh.faces] - self.origin) / self.cell
        out: List[np.ndarray] = []
        for tri in grid_tris:
            lo = np.clip(np.floor(tri.min(axis=0) - eps).astype(np.int64), 0, n - 1)
            hi = np.clip(np.floor(tri.max(axis=0) + eps).astype(np.int64), 0, n - 1)
            ix, iy, iz = np.meshgrid(*(np.arange(a, b + 1) for a, b in zip(lo, hi)), indexing="ij")
            cells = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
            hit = _tri_box_overlap(tri, cells + 0.5, 0.5 + eps)
            cells = cells[hit]
            out.append((cells[:, 0] * n + cells[:, 1]) * n + cells[:, 2])
        return out

    def occupancy(self, face_cells: Sequence[np.ndarray], faces: Sequence[int]) -> float:
        ids = np.asarray(faces, dtype=np.int64)
        if ids.size == 0:
            return 0.0
        occupied = np.unique(np.concatenate([face_cells[f] for f in ids]))
        return float(len(occupied)) / float(self.n ** 3)


def voxel_occupancy(mesh: Mesh, faces: Sequence[int], grid: Optional[VoxelGrid] = None, n: int = 30) -> float:
    """Fraction of whole-object grid cells touched by the given faces."""
    if len(faces) == 0:
        return 0.0
    grid = grid or VoxelGrid.fit(mesh.vertices[np.unique(mesh.faces)], n)
    sub = Mesh(mesh.vertices, mesh.faces[np.asarray(faces, dtype=np.int64)])
    cells = grid.face_cells(sub)
    return grid.occupancy(cells, range(sub.n_faces))


# ---------- face descriptors ----------

@dataclass
class FaceFeatures:
    blocks: dict[str, np.ndarray]
    sparse: bool = False

    def matrix(self) -> np.ndarray:
        return np.concatenate([self.blocks[name] for name, _ in FACE_BLOCKS], axis=1)


def lpca_ratios(eigenvalues: np.ndarray) -> np.ndarray:
    """(m, 3) descending eigenvalues -> (m, 6) ratios; 0/0 reads as an isotropic neighborhood."""
    lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    l1, l2, l3 = lam[:, 0], lam[:, 1], lam[:, 2]
    total = lam.sum(axis=1)
    out = np.empty((len(lam), 6))
    flat = total <= 1e-300
    safe = np.where(flat, 1.0, total)
    out[:, 0:3] = lam / safe[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:, 3] = np.where(l1 > 0, l2 / np.where(l1 > 0, l1, 1.0), 0.0)
        out[:, 4] = np.where(l1 > 0, l3 / np.where(l1 > 0, l1, 1.0), 0.0)
        out[:, 5] = np.where(l2 > 0, l3 / np.where(l2 > 0, l2, 1.0), 0.0)
    out[flat] = (1 / 3, 1 / 3, 1 / 3, 1.0, 1.0, 1.0)
    return out


def _tangent_frames(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.eye(3)[np.argmin(np.abs(normals), axis=1)]
    u = np.cross(normals, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u, np.cross(normals, u)


def quadric_curvature(rel: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """
    Fit w = a u^2 + b uv + c v^2 + d u + e v + f over each neighborhood
    (rel: (m, k, 3) offsets from the face centroid) and return |principal curvatures|, larger first.
    """
    u_ax, v_ax = _tangent_frames(normals)
    u = np.einsum("mkd,md->mk", rel, u_ax)
    v = np.einsum("mkd,md->mk", rel, v_ax)
    w = np.einsum("mkd,md->mk", rel, normals)
    design = np.stack([u * u, u * v, v * v, u, v, np.ones_like(u)], axis=-1)
    coef = np.einsum("mij,mj->mi", np.linalg.pinv(design), w)
    a, b, c = coef[:, 0], coef[:, 1], coef[:, 2]
    mean = a + c
    spread = np.sqrt((a - c) ** 2 + b ** 2)
    k = np.abs(np.stack([mean + spread, mean - spread], axis=1))
    return -np.sort(-k, axis=1)


def _histogram(bins: np.ndarray, n_bins: int) -> np.ndarray:
    m, k = bins.shape
    flat = (np.arange(m)[:, None] * n_bins + bins).ravel()
    counts = np.bincount(flat, minlength=m * n_bins).reshape(m, n_bins).astype(np.float64)
    return counts / k


def _face_chunk(centroids: np.ndarray, normals: np.ndarray, nbr: np.ndarray) -> dict[str, np.ndarray]:
    rel = nbr - centroids[:, None, :]
    dist = np.linalg.norm(rel, axis=2)
    radius = np.maximum(dist.max(axis=1), 1e-12)

    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / nbr.shape[1]
    eig = np.linalg.eigvalsh(cov)[:, ::-1]
    lpca = lpca_ratios(eig)
    lvar = np.clip(eig, 0.0, None).sum(axis=1, keepdims=True)

    curvature = quadric_curvature(rel, normals)

    beta = np.einsum("mkd,md->mk", rel, normals)
    alpha = np.sqrt(np.clip(dist ** 2 - beta ** 2, 0.0, None))
    r = radius[:, None]
    a_bin = np.clip((alpha / r * SI_BINS).astype(np.int64), 0, SI_BINS - 1)
    b_bin = np.clip(((beta + r) / (2 * r) * SI_BINS).astype(np.int64), 0, SI_BINS - 1)
    si = _histogram(a_bin * SI_BINS + b_bin, SI_BINS * SI_BINS)

    # log-spaced shells between r/32 and r; everything closer falls in the first
    shells = 2.0 ** np.linspace(-5.0, 0.0, SC_RADIAL + 1)[1:-1]
    r_bin = (dist[:, :, None] > (r[:, :, None] * shells)).sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_el = np.where(dist > 0, beta / np.where(dist > 0, dist, 1.0), 0.0)
    el_bin = np.clip((np.arccos(np.clip(cos_el, -1.0, 1.0)) / np.pi * SC_ELEVATION).astype(np.int64), 0, SC_ELEVATION - 1)
    sc = _histogram(r_bin * SC_ELEVATION + el_bin, SC_RADIAL * SC_ELEVATION)

    dd = _histogram(np.clip((dist / r * DD_BINS).astype(np.int64), 0, DD_BINS - 1), DD_BINS)

    return {
        "curvature": curvature,
        "lpca": lpca,
        "lvar": lvar,
        "si": si,
        "sc": sc,
        "dd": dd,
        "pp": centroids.copy(),
        "pn": normals.copy(),
    }


def face_features(
    mesh: Mesh,
    samples: PointSampleSet,
    faces: Optional[Sequence[int]] = None,
    neighbors: int = 50,
    chunk: int = 1024,
) -> FaceFeatures:
    """
    Per-face descriptors at each face centroid over its ``neighbors`` nearest samples.
    ``mesh`` and ``samples`` must share one (normalized) coordinate frame.
    """
    ids = np.arange(mesh.n_faces) if faces is None else np.asarray(faces, dtype=np.int64)
    if len(samples) == 0:
        raise DegenerateGeometryError("no surface samples (zero-area mesh)")
    parts: List[dict[str, np.ndarray]] = []
    sparse = False
    for start in range(0, len(ids), chunk):
        sel = ids[start:start + chunk]
        cents = mesh.face_centroids[sel]
        idx, short = samples.neighbors(cents, neighbors)
        sparse |= short
        parts.append(_face_chunk(cents, mesh.face_normals[sel], samples.points[idx]))
    if sparse:
        logger.warning("only %d samples for %d-neighborhoods; using all", len(samples), neighbors)
    if not parts:
        blocks = {name: np.zeros((0, width)) for name, width in FACE_BLOCKS}
    else:
        blocks = {name: np.concatenate([p[name] for p in parts]) for name, _ in FACE_BLOCKS}
    return FaceFeatures(blocks, sparse=sparse)


# ---------- part descriptors ----------

@dataclass
class PartFeatures:
    matrix: np.ndarray                        # (n_parts, dim)
    degenerate: List[int] = field(default_factory=list)


@dataclass
class _ShapeGeometry:
    mesh: Mesh                                # whole mesh, normalized
    grid: VoxelGrid
    face_cells: List[np.ndarray]


def _shape_geometry(mesh: Mesh, grid_n: int) -> _ShapeGeometry:
    norm, _ = normalized_mesh(mesh)
    grid = VoxelGrid.fit(norm.vertices[np.unique(norm.faces)], grid_n)
    return _ShapeGeometry(norm, grid, grid.face_cells(norm))


def part_feature_vector(
    geo: _ShapeGeometry,
    faces: np.ndarray,
    cfg: FeatureConfig,
    seed: int | Sequence[int],
) -> tuple[np.ndarray, bool]:
    """One part's x vector (lfd, pca, com, diameter, area) and its degenerate flag."""
    mesh = geo.mesh
    blocks = block_slices(part_blocks(cfg.render_size))
    out = np.zeros(blocks["area"].stop)
    if len(faces) == 0:
        return out, True

    tris = mesh.vertices[mesh.faces[faces]]
    samples = sample_surface(mesh, cfg.part_samples, seed=seed, faces=faces)
    frame = pca_frame(samples.points)
    degenerate = frame.degenerate
    try:
        own = normalize_for_features(mesh, faces)
        out[blocks["lfd"]] = lightfield_hog(own.apply(tris), None if frame.degenerate else frame.axes, cfg.render_size)
    except DegenerateGeometryError:
        degenerate = True

    areas = mesh.face_areas[faces]
    total = float(areas.sum())
    cents = mesh.face_centroids[faces]
    com = (areas[:, None] * cents).sum(axis=0) / total if total > 0 else cents.mean(axis=0)
    flat = tris.reshape(-1, 3)

    out[blocks["pca"]] = frame.axes.ravel()
    out[blocks["com"]] = com
    out[blocks["diameter"]] = np.linalg.norm(flat.max(axis=0) - flat.min(axis=0))
    out[blocks["area"]] = geo.grid.occupancy(geo.face_cells, faces)
    return out, degenerate


def part_features(
    mesh: Mesh,
    graph: SceneGraph,
    cfg: FeatureConfig,
    seed: Optional[int | Sequence[int]] = None,
) -> PartFeatures:
    base = [int(s) for s in np.atleast_1d(cfg.seed if seed is None else seed)]
    geo = _shape_geometry(mesh, cfg.grid)
    rows, flagged = [], []
    for j, node in enumerate(graph.nodes):
        vec, degenerate = part_feature_vector(geo, node.faces, cfg, seed=(*base, j))
        rows.append(vec)
        if degenerate:
            flagged.append(j)
    if flagged:
        logger.warning("shape %d: degenerate geometry for parts %s", graph.shape_index, flagged)
    return PartFeatures(np.vstack(rows), flagged)


def mesh_face_features(mesh: Mesh, cfg: FeatureConfig, seed: Optional[int | Sequence[int]] = None) -> FaceFeatures:
    """Normalize the whole mesh, sample it and describe every face."""
    norm, _ = normalized_mesh(mesh)
    samples = sample_surface(norm, cfg.samples, seed=cfg.seed if seed is None else seed)
    return face_features(norm, samples, neighbors=cfg.neighbors)


# ---------- standardization ----------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, matrix: np.ndarray) -> "Standardizer":
        m = np.asarray(matrix, dtype=np.float64)
        std = m.std(axis=0)
        return cls(m.mean(axis=0), np.where(std > 1e-8, std, 1.0))

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        return (np.asarray(matrix, dtype=np.float64) - self.mean) / self.std


# ---------- dataset features + cache ----------

CACHE_VERSION = 1


def feature_config_key(cfg: FeatureConfig) -> str:
    return json.dumps({
        "samples": cfg.samples,
        "neighbors": cfg.neighbors,
        "part_samples": cfg.part_samples,
        "grid": cfg.grid,
        "render_size": cfg.render_size,
        "seed": cfg.seed,
    }, sort_keys=True)


def save_feature_cache(path: str | Path, items: dict[tuple[str, str], np.ndarray], config_key: str = "") -> None:
    """
    One ``.npz`` archive:
      meta     JSON header (version, config key)
      ids      item ids, kinds   "part" | "face"
      shapes   (n, 2) rows/cols, offsets (n + 1,) into the flat f32 payload
    """
    keys = sorted(items)
    mats = [np.asarray(items[k], dtype=np.float32) for k in keys]
    shapes = np.array([m.shape for m in mats], dtype=np.int64).reshape(-1, 2)
    sizes = shapes[:, 0] * shapes[:, 1]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    payload = np.concatenate([m.ravel() for m in mats]) if mats else np.zeros(0, dtype=np.float32)
    meta = json.dumps({"version": CACHE_VERSION, "config": config_key})
    np.savez(
        path,
        meta=np.array(meta),
        ids=np.array([k[0] for k in keys], dtype=str),
        kinds=np.array([k[1] for k in keys], dtype=str),
        shapes=shapes,
        offsets=offsets,
        payload=payload,
    )


def load_feature_cache(path: str | Path, config_key: Optional[str] = None) -> Optional[dict[tuple[str, str], np.ndarray]]:
    """Cached matrices, or None when the file is missing, from another version or another config."""
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CACHE_VERSION:
            logger.info("feature cache %s has version %s; recomputing", path, meta.get("version"))
            return None
        if config_key is not None and meta.get("config") != config_key:
            logger.info("feature cache %s was built with other settings; recomputing", path)
            return None
        out: dict[tuple[str, str], np.ndarray] = {}
        payload, offsets, shapes = data["payload"], data["offsets"], data["shapes"]
        for n, (item, kind) in enumerate(zip(data["ids"], data["kinds"])):
            out[(str(item), str(kind))] = payload[offsets[n]:offsets[n + 1]].reshape(shapes[n])
    return out


def shape_seed(seed: int, shape_id: str) -> tuple[int, int]:
    return (int(seed), zlib.crc32(shape_id.encode("utf-8")))


def _shape_task(args) -> dict[str, np.ndarray]:
    mesh, graph, cfg, kinds, seed = args
    # seeds follow the shape id so results do not depend on dataset order
    out: dict[str, np.ndarray] = {}
    if "part" in kinds:
        out["part"] = part_features(mesh, graph, cfg, seed=seed).matrix.astype(np.float32)
    if "face" in kinds:
        out["face"] = mesh_face_features(mesh, cfg, seed=seed).matrix().astype(np.float32)
    return out


def dataset_features(
    shapes: Sequence,                         # services.dataset.ShapeRecord
    cfg: FeatureConfig,
    kinds: Iterable[str] = ("part",),
    jobs: int = 1,
    progress: bool = False,
    cache_path: Optional[str | Path] = None,
) -> dict[str, dict[str, np.ndarray]]:
    """
    ``{kind: {shape_id: matrix}}`` for every requested kind. Results are float32
    whether they come from the cache or fresh computation.
    """
    kinds = tuple(kinds)
    unknown = set(kinds) - {"part", "face"}
    if unknown:
        raise DataError(f"unknown feature kinds {sorted(unknown)}")
    key = feature_config_key(cfg)
    cache = load_feature_cache(cache_path, key) if cache_path else None
    cache = cache or {}

    todo = [s for s in shapes if any((s.shape_id, k) not in cache for k in kinds)]
    tasks = [(s.mesh, s.graph, cfg, kinds, shape_seed(cfg.seed, s.shape_id)) for s in todo]
    if tasks:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(tqdm(pool.map(_shape_task, tasks), total=len(tasks), disable=not progress, desc="features"))
        else:
            results = [_shape_task(t) for t in tqdm(tasks, disable=not progress, desc="features")]
        for s, res in zip(todo, results):
            for kind, mat in res.items():
                cache[(s.shape_id, kind)] = mat
        if cache_path:
            save_feature_cache(cache_path, cache, key)
            logger.info("cached features for %d shapes in %s", len(todo), cache_path)

    return {k: {s.shape_id: cache[(s.shape_id, k)] for s in shapes} for k in kinds}
