# services/synth.py
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from config.settings import SynthSpec
from services.dataset import MANIFEST_COLUMNS, GroundTruth, assign_splits, shape_paths, write_truth
from services.errors import UsageError
from services.meshio import Mesh, write_mesh

logger = logging.getLogger(__name__)


# Tag dictionaries per template: canonical tag -> synonyms that appear in raw names
TEMPLATE_TAGS = {
    "vehicle": {
        "body": ["car body", "chassis", "hull"],
        "wheel": ["wheels", "wheel assembly"],
        "tire": ["tyre", "tires", "tyres"],
        "rim": ["hub", "wheel rim"],
        "door": ["doors", "car door"],
        "window": ["glass", "side window"],
        "panel": ["door panel", "door skin"],
    },
    "table": {
        "top": ["tabletop", "table top", "board"],
        "leg": ["legs", "table leg"],
        "shaft": ["leg shaft", "post"],
        "foot": ["feet", "leg foot", "pad"],
    },
}

# Names real repositories attach to parts that mean nothing to the dictionary
_JUNK_NAMES = ["Object", "mesh", "Group", "node", "default", "polySurface", "Box"]


# ---------- primitives ----------

def _weld(vertices: np.ndarray, faces: np.ndarray, decimals: int = 9) -> tuple[np.ndarray, np.ndarray]:
    """Merge coincident vertices so faces of one primitive share edges."""
    key = np.round(vertices, decimals)
    uniq, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return vertices[first[order]], remap[inverse.reshape(-1)][faces]


def box(center, size, subdiv: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box with each side split into ``subdiv`` x ``subdiv`` quads; outward normals."""
    center = np.asarray(center, dtype=np.float64)
    half = 0.5 * np.asarray(size, dtype=np.float64)
    t = np.linspace(-1.0, 1.0, subdiv + 1)
    verts: List[np.ndarray] = []
    faces: List[np.ndarray] = []
    offset = 0
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            uu, vv = np.meshgrid(t, t, indexing="ij")
            pts = np.zeros((subdiv + 1, subdiv + 1, 3))
            pts[..., axis] = sign
            pts[..., u_axis] = uu
            pts[..., v_axis] = vv
            verts.append(pts.reshape(-1, 3))
            idx = np.arange((subdiv + 1) ** 2).reshape(subdiv + 1, subdiv + 1) + offset
            a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
            c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
            quad = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
            # (u, v, axis) right-handed for axis 0 and 2, left-handed for axis 1
            flip = (sign < 0) != (axis == 1)
            faces.append(quad[:, ::-1] if flip else quad)
            offset += (subdiv + 1) ** 2
    v = np.concatenate(verts) * half + center
    return _weld(v, np.concatenate(faces))


def cylinder(center, axis: int, radius: float, length: float, segments: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Closed cylinder along a coordinate axis, capped with triangle fans."""
    center = np.asarray(center, dtype=np.float64)
    ang = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    u_axis, v_axis = [a for a in range(3) if a != axis]
    ring = np.zeros((segments, 3))
    ring[:, u_axis] = radius * np.cos(ang)
    ring[:, v_axis] = radius * np.sin(ang)
    lo, hi = ring.copy(), ring.copy()
    lo[:, axis] = -0.5 * length
    hi[:, axis] = 0.5 * length
    caps = np.zeros((2, 3))
    caps[0, axis], caps[1, axis] = -0.5 * length, 0.5 * length
    v = np.concatenate([lo, hi, caps]) + center
    i = np.arange(segments)
    j = (i + 1) % segments
    side = np.concatenate([np.stack([i, j, j + segments], 1), np.stack([i, j + segments, i + segments], 1)])
    bottom = np.stack([np.full(segments, 2 * segments), j, i], 1)
    top = np.stack([np.full(segments, 2 * segments + 1), i + segments, j + segments], 1)
    f = np.concatenate([side, bottom, top])
    # (u, v, axis) is left-handed only for the y axis
    if axis == 1:
        f = f[:, ::-1]
    return v, f


def uv_sphere(center, radius: float, rings: int = 24, segments: int = 48) -> tuple[np.ndarray, np.ndarray]:
    center = np.asarray(center, dtype=np.float64)
    theta = np.linspace(0.0, np.pi, rings + 1)[1:-1]
    phi = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    body = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], -1).reshape(-1, 3)
    v = np.concatenate([[[0.0, 0.0, 1.0]], body, [[0.0, 0.0, -1.0]]]) * radius + center
    faces: List[tuple[int, int, int]] = []
    n_bottom = len(v) - 1
    for s in range(segments):
        s2 = (s + 1) % segments
        faces.append((0, 1 + s, 1 + s2))
        base = 1 + (rings - 2) * segments
        faces.append((n_bottom, base + s2, base + s))
    for r in range(rings - 2):
        for s in range(segments):
            s2 = (s + 1) % segments
            a, b = 1 + r * segments + s, 1 + r * segments + s2
            c, d = a + segments, b + segments
            faces.append((a, c, d))
            faces.append((a, d, b))
    return v, np.asarray(faces, dtype=np.int64)


# ---------- templates ----------

@dataclass
class PartSpec:
    """Node of a generated shape: leaves carry geometry, internal nodes group children."""

    name: str
    geometry: Optional[tuple[np.ndarray, np.ndarray]] = None
    children: List["PartSpec"] = field(default_factory=list)


def template_tree(template: str) -> dict:
    """Category tree as nested ``{"name", "children"}`` (no geometry)."""
    if template == "vehicle":
        return {"name": "vehicle", "children": [
            {"name": "body", "children": []},
            {"name": "wheel", "children": [{"name": "tire", "children": []}, {"name": "rim", "children": []}]},
            {"name": "door", "children": [{"name": "window", "children": []}, {"name": "panel", "children": []}]},
        ]}
    if template == "table":
        return {"name": "table", "children": [
            {"name": "top", "children": []},
            {"name": "leg", "children": [{"name": "foot", "children": []}, {"name": "shaft", "children": []}]},
        ]}
    raise UsageError(f"Unknown synthetic template {template!r}")


def _vehicle(rng: np.random.Generator) -> PartSpec:
    length = rng.uniform(3.6, 4.6)
    width = rng.uniform(1.6, 2.0)
    height = rng.uniform(1.0, 1.4)
    r = rng.uniform(0.30, 0.40)
    tire_w = rng.uniform(0.20, 0.28)
    clearance = r * rng.uniform(0.8, 1.0)
    body = PartSpec("body", box((0.0, 0.0, clearance + height / 2), (length, width, height), subdiv=3))

    wheels = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            c = (sx * 0.33 * length, sy * (width / 2 + tire_w / 2 + 0.02), r)
            tire = PartSpec("tire", cylinder(c, axis=1, radius=r, length=tire_w, segments=16))
            rim_c = (c[0], c[1] + sy * 0.03, c[2])
            rim = PartSpec("rim", cylinder(rim_c, axis=1, radius=0.55 * r, length=tire_w, segments=12))
            wheels.append(PartSpec("wheel", children=[tire, rim]))

    doors = []
    door_len = 0.28 * length
    for sy in (-1.0, 1.0):
        y = sy * (width / 2 + 0.03)
        panel_h = 0.45 * height
        panel_c = (0.05 * length, y, clearance + 0.08 * height + panel_h / 2)
        panel = PartSpec("panel", box(panel_c, (door_len, 0.04, panel_h), subdiv=2))
        win_h = 0.30 * height
        win_c = (0.05 * length, y, panel_c[2] + panel_h / 2 + 0.04 + win_h / 2)
        window = PartSpec("window", box(win_c, (0.85 * door_len, 0.03, win_h), subdiv=2))
        doors.append(PartSpec("door", children=[window, panel]))

    return PartSpec("vehicle", children=[body] + wheels + doors)


def _table(rng: np.random.Generator) -> PartSpec:
    length = rng.uniform(1.2, 2.0)
    width = rng.uniform(0.7, 1.1)
    height = rng.uniform(0.7, 0.8)
    thick = rng.uniform(0.04, 0.07)
    top = PartSpec("top", box((0.0, 0.0, height - thick / 2), (length, width, thick), subdiv=4))
    legs = []
    leg_r = rng.uniform(0.025, 0.04)
    foot_h = 0.04
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            x, y = sx * (length / 2 - 0.1), sy * (width / 2 - 0.1)
            shaft_len = height - thick - foot_h - 0.02
            shaft = PartSpec("shaft", cylinder((x, y, foot_h + 0.01 + shaft_len / 2), axis=2, radius=leg_r, length=shaft_len))
            foot = PartSpec("foot", box((x, y, foot_h / 2), (3 * leg_r, 3 * leg_r, foot_h), subdiv=1))
            legs.append(PartSpec("leg", children=[foot, shaft]))
    return PartSpec("table", children=[top] + legs)


_BUILDERS = {"vehicle": _vehicle, "table": _table}


# ---------- noisy annotation ----------

def _raw_name(tag: str, rng: np.random.Generator, tags: dict[str, List[str]]) -> str:
    base = [tag] + tags[tag]
    name = base[int(rng.integers(len(base)))]
    style = int(rng.integers(4))
    if style == 1:
        name = name.title()
    elif style == 2:
        name = f"{name.replace(' ', '_')}_{int(rng.integers(1, 20)):02d}"
    elif style == 3:
        name = f"{name.upper()}.{int(rng.integers(1, 999)):03d}"
    return name


def _junk_name(rng: np.random.Generator) -> Optional[str]:
    if rng.random() < 0.3:
        return None
    return f"{_JUNK_NAMES[int(rng.integers(len(_JUNK_NAMES)))]}{int(rng.integers(1, 500))}"


def _flatten_leaves(part: PartSpec) -> List[PartSpec]:
    if not part.children:
        return [part]
    out: List[PartSpec] = []
    for c in part.children:
        out.extend(_flatten_leaves(c))
    return out


def generate_shape(
    spec: SynthSpec,
    rng: np.random.Generator,
) -> tuple[Mesh, dict, GroundTruth]:
    """
    One synthetic shape:
      - mesh with every leaf primitive as its own connected component(s)
      - noisy scene-graph JSON (tags dropped / coarsened / wrong)
      - ground truth: true leaf name per face, true type per graph node, template tree
    """
    tags = TEMPLATE_TAGS[spec.template]
    root = _BUILDERS[spec.template](rng)

    verts: List[np.ndarray] = []
    faces: List[np.ndarray] = []
    face_labels: List[str] = []
    leaf_faces: dict[int, List[int]] = {}
    offset = n_faces = 0
    for leaf in _flatten_leaves(root):
        v, f = leaf.geometry
        verts.append(v)
        faces.append(f + offset)
        leaf_faces[id(leaf)] = list(range(n_faces, n_faces + len(f)))
        face_labels.extend([leaf.name] * len(f))
        offset += len(v)
        n_faces += len(f)
    mesh = Mesh(np.concatenate(verts), np.concatenate(faces))

    part_types: List[str] = []

    def faces_of(part: PartSpec) -> List[int]:
        return sorted(f for leaf in _flatten_leaves(part) for f in leaf_faces[id(leaf)])

    def name_for(true_name: str) -> Optional[str]:
        u = rng.random()
        if u < spec.tag_drop:
            return _junk_name(rng)
        if u < spec.tag_drop + spec.tag_error:
            others = [t for t in tags if t != true_name]
            return _raw_name(others[int(rng.integers(len(others)))], rng, tags)
        return _raw_name(true_name, rng, tags)

    def encode(part: PartSpec, is_root: bool) -> dict:
        part_types.append(part.name)
        if is_root:
            children = [encode(c, False) for c in part.children]
            return {"name": part.name, "faces": None, "children": children}
        if part.children and rng.random() < spec.tag_coarsen:
            # coarsened: the whole subtree becomes one part tagged at this level
            return {"name": name_for(part.name), "faces": faces_of(part), "children": []}
        if part.children:
            children = [encode(c, False) for c in part.children]
            return {"name": name_for(part.name), "faces": None, "children": children}
        return {"name": name_for(part.name), "faces": faces_of(part), "children": []}

    graph = {"root": encode(root, True)}
    truth = GroundTruth(face_labels=face_labels, part_types=part_types, template=template_tree(spec.template))
    return mesh, graph, truth


def write_template_tags(template: str, path: Path) -> None:
    lines = [f"{tag}: {', '.join(syn)}" for tag, syn in TEMPLATE_TAGS[template].items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def generate_dataset(spec: SynthSpec, out_dir: str | Path) -> pd.DataFrame:
    """Write a full dataset directory (see services.dataset.load_dataset); returns the manifest."""
    if spec.template not in _BUILDERS:
        raise UsageError(f"Unknown synthetic template {spec.template!r}")
    out = Path(out_dir)
    (out / "shapes").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    write_template_tags(spec.template, out / "tags.txt")

    rng = np.random.default_rng(spec.seed)
    splits = assign_splits(spec.count, spec.train_fraction, spec.validation_fraction, spec.seed)
    rows = []
    for i in range(spec.count):
        shape_id = f"{spec.template}_{i:04d}"
        mesh, graph, truth = generate_shape(spec, rng)
        obj_path, graph_path, truth_path = shape_paths(out, shape_id)
        write_mesh(mesh, obj_path)
        graph_path.write_text(json.dumps(graph), encoding="utf-8")
        write_truth(truth, truth_path)
        rows.append({
            "shape_id": shape_id,
            "category": spec.template,
            "split": splits[i],
            "n_faces": mesh.n_faces,
            "n_parts": len(truth.part_types),
        })
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    manifest.to_csv(out / "manifest.csv", index=False)
    logger.info("wrote %d %s shapes to %s", spec.count, spec.template, out)
    return manifest
