# services/dataset.py
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from services.errors import DataError
from services.meshio import (
    Mesh,
    SceneGraph,
    TagDictionary,
    load_mesh,
    load_scene_graph,
    load_tag_dictionary,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
MANIFEST_COLUMNS = ["shape_id", "category", "split", "n_faces", "n_parts"]


@dataclass
class ShapeRecord:
    shape_id: str
    mesh: Mesh
    graph: SceneGraph
    split: str = "train"


@dataclass
class GroundTruth:
    """Hidden generator output for one shape."""

    face_labels: List[str]                    # true leaf name per face
    part_types: List[str]                     # true type name per scene-graph node (preorder)
    template: dict                            # {"name", "children": [...]} category tree

    def face_label_array(self) -> np.ndarray:
        return np.asarray(self.face_labels, dtype=object)


@dataclass
class Dataset:
    shapes: List[ShapeRecord]
    category: str
    tags: TagDictionary
    root: Optional[Path] = None
    truth: dict[str, GroundTruth] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.shapes)

    def subset(self, split: str) -> "Dataset":
        keep = [s for s in self.shapes if s.split == split]
        return Dataset(keep, self.category, self.tags, self.root, {s.shape_id: self.truth[s.shape_id] for s in keep if s.shape_id in self.truth})

    def manifest(self) -> pd.DataFrame:
        rows = [
            {
                "shape_id": s.shape_id,
                "category": self.category,
                "split": s.split,
                "n_faces": s.mesh.n_faces,
                "n_parts": len(s.graph),
            }
            for s in self.shapes
        ]
        return pd.DataFrame(rows, columns=MANIFEST_COLUMNS)


# ---------- splits ----------

def assign_splits(n: int, train_fraction: float, validation_fraction: float, seed: int) -> np.ndarray:
    """Seeded partition of ``n`` items into train / validation / test labels."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    n_val = min(n - n_train, int(round(validation_fraction * n)))
    out = np.empty(n, dtype=object)
    out[order[:n_train]] = "train"
    out[order[n_train:n_train + n_val]] = "validation"
    out[order[n_train + n_val:]] = "test"
    return out


# ---------- directory layout ----------

def shape_paths(root: Path, shape_id: str) -> tuple[Path, Path, Path]:
    return (
        root / "shapes" / f"{shape_id}.obj",
        root / "shapes" / f"{shape_id}.json",
        root / "truth" / f"{shape_id}.json",
    )


def write_truth(truth: GroundTruth, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"face_labels": truth.face_labels, "part_types": truth.part_types, "template": truth.template}
    path.write_text(json.dumps(payload), encoding="utf-8")


def load_truth(path: Path) -> GroundTruth:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return GroundTruth(data["face_labels"], data["part_types"], data["template"])


def load_dataset(
    root: str | Path,
    split: Optional[str] = None,
    fuzzy_threshold: Optional[int] = None,
    with_truth: bool = True,
) -> Dataset:
    """
    Read a dataset directory:
      - tags.txt        tag dictionary
      - manifest.csv    shape_id, category, split, n_faces, n_parts
      - shapes/<id>.obj + shapes/<id>.json
      - truth/<id>.json (optional)
    """
    root = Path(root)
    manifest_path = root / "manifest.csv"
    if not manifest_path.exists():
        raise DataError(f"No manifest.csv under {root}")
    manifest = pd.read_csv(manifest_path, dtype={"shape_id": str})
    missing = set(MANIFEST_COLUMNS) - set(manifest.columns)
    if missing:
        raise DataError(f"manifest.csv missing columns {sorted(missing)}")
    if split is not None:
        manifest = manifest[manifest["split"] == split]
    if manifest.empty:
        raise DataError(f"No shapes in {root}" + (f" for split {split!r}" if split else ""))

    tags = load_tag_dictionary(root / "tags.txt", fuzzy_threshold=fuzzy_threshold)
    categories = manifest["category"].dropna().unique()
    category = str(categories[0]) if len(categories) else "unknown"

    shapes: List[ShapeRecord] = []
    truth: dict[str, GroundTruth] = {}
    for i, row in enumerate(manifest.itertuples(index=False)):
        obj_path, graph_path, truth_path = shape_paths(root, row.shape_id)
        mesh = load_mesh(obj_path)
        graph = load_scene_graph(graph_path, tags, shape_index=i, n_faces=mesh.n_faces)
        shapes.append(ShapeRecord(row.shape_id, mesh, graph, row.split))
        if with_truth and truth_path.exists():
            truth[row.shape_id] = load_truth(truth_path)
    logger.info("loaded %d shapes from %s (category %s)", len(shapes), root, category)
    return Dataset(shapes=shapes, category=category, tags=tags, root=root, truth=truth)
