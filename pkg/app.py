from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections.abc import Iterator, Sequence
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.settings import Settings, load_settings
from services.errors import DataError, NumericFailureError, PipelineError, UsageError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
ENERGY_TOL = 1e-9


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad flags as a usage error (exit 1)."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


# ---------------- Stage helpers ----------------
@contextmanager
def stage(command: str, name: str, timings: Optional[dict[str, float]] = None) -> Iterator[None]:
    """Prefix failures with ``command/name`` and record wall-clock time."""
    started = time.perf_counter()
    try:
        yield
    except PipelineError as exc:
        exc.args = (f"{command}/{name}: {exc}",)
        raise
    except OSError as exc:
        raise DataError(f"{command}/{name}: {exc}") from exc
    finally:
        elapsed = time.perf_counter() - started
        if timings is not None:
            timings[name] = elapsed
        logger.debug("%s/%s took %.2fs", command, name, elapsed)


def _out_dir(args: argparse.Namespace) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


def _echo_config(out: Path, settings: Settings, command: str) -> None:
    _write_json(out / "config.json", {"command": command, "settings": settings.flat()})


def _settings_from_args(args: argparse.Namespace) -> Settings:
    overrides: dict[str, Any] = {
        "run.seed": args.seed,
        "run.jobs": args.jobs,
        "run.progress": True if args.progress else None,
    }
    if getattr(args, "granularity", None) is not None:
        overrides["segmentation.granularity"] = args.granularity
    if getattr(args, "lam", None) is not None:
        overrides["segmentation.lambda"] = args.lam
    for flag in ("template", "count", "tag_drop", "tag_coarsen", "tag_error"):
        if getattr(args, flag, None) is not None:
            overrides[f"synth.{flag}"] = getattr(args, flag)
    return load_settings(args.config, overrides)


def _feature_cache(args: argparse.Namespace, out: Path) -> Path:
    return Path(args.cache) if getattr(args, "cache", None) else out / "features.npz"


# ---------------- synth ----------------
def cmd_synth(args: argparse.Namespace, settings: Settings) -> int:
    from services.synth import generate_dataset

    out = _out_dir(args)
    with stage("synth", "generate"):
        manifest = generate_dataset(settings.synth, out)
    _echo_config(out, settings, "synth")
    logger.info("wrote %d %s shapes to %s", len(manifest), settings.synth.template, out)
    return 0


# ---------------- features ----------------
def cmd_features(args: argparse.Namespace, settings: Settings) -> int:
    from processors.geomfeat import dataset_features
    from services.dataset import load_dataset

    out = _out_dir(args)
    with stage("features", "load"):
        ds = load_dataset(args.dataset, split=args.split, fuzzy_threshold=settings.fuzzy_threshold, with_truth=False)
    kinds = ("part", "face") if args.kind == "both" else (args.kind,)
    cache = _feature_cache(args, out)
    with stage("features", "compute"):
        feats = dataset_features(ds.shapes, settings.features, kinds, settings.jobs, settings.progress, cache)
    _echo_config(out, settings, "features")
    for kind, mats in feats.items():
        logger.info("%s features: %d shapes, %d rows", kind, len(mats), sum(len(m) for m in mats.values()))
    return 0


# ---------------- train-parts ----------------
def cmd_train_parts(args: argparse.Namespace, settings: Settings) -> int:
    from processors.geomfeat import dataset_features
    from processors.hierarchy import assign_tags, extract_canonical_hierarchy, prune_unused, write_hierarchy
    from processors.partclust import PartTable, label_parts, naive_labels, save_part_model, train
    from services.dataset import load_dataset
    from services.meshio import write_scene_graph

    cmd = "train-parts"
    out = _out_dir(args)
    with stage(cmd, "load"):
        ds = load_dataset(args.dataset, split=args.split, fuzzy_threshold=settings.fuzzy_threshold, with_truth=False)
    with stage(cmd, "features"):
        feats = dataset_features(ds.shapes, settings.features, ("part",), settings.jobs, settings.progress,
                                 _feature_cache(args, out))["part"]
        table = PartTable.build(
            [s.graph for s in ds.shapes],
            [feats[s.shape_id] for s in ds.shapes],
            len(ds.tags),
            [s.shape_id for s in ds.shapes],
        )
    with stage(cmd, "train"):
        result = train(table, settings.em, settings.adam)
    model = result.model
    result.trace.to_csv(out / "loss_trace.csv", index=False)

    with stage(cmd, "hierarchy"):
        labels = label_parts(model.p)
        names = assign_tags(labels, table.tag, ds.tags.tags, model.n_clusters, root_name=ds.category)
        hierarchy = extract_canonical_hierarchy(model.M, model.root_label, names)
        hierarchy = prune_unused(hierarchy, np.unique(labels[table.nonroot]))
        write_hierarchy(hierarchy, out / "hierarchy.json")

    with stage(cmd, "write"):
        naive = naive_labels(table)
        tag_names = list(ds.tags.tags) + [ds.category]
        frame = pd.DataFrame({
            "shape_id": [table.shape_ids[i] for i in table.shape_of],
            "node": table.local,
            "is_root": table.is_root,
            "cluster": labels,
            "name": [names[k] for k in labels],
            "naive": [tag_names[t] if t >= 0 else None for t in naive],
        })
        frame.to_csv(out / "part_labels.csv", index=False)
        (out / "labeled").mkdir(exist_ok=True)
        for i, shape in enumerate(ds.shapes):
            rows = slice(table.offsets[i], table.offsets[i + 1])
            write_scene_graph(shape.graph, out / "labeled" / f"{shape.shape_id}.json", list(frame["name"].iloc[rows]))
        save_part_model(out / "part_model.npz", model, table, ds.tags.tags, {
            "category": ds.category,
            "names": names,
            "hierarchy": hierarchy.to_dict(),
            "config": settings.flat(),
        })
        _echo_config(out, settings, cmd)

    logger.info("hierarchy over %d labels: %s", len(hierarchy.nodes),
                ", ".join(f"{hierarchy.names[u]}<-{hierarchy.names[hierarchy.parent[u]]}"
                          for u in hierarchy.nodes if hierarchy.parent[u] >= 0))
    return 0


# ---------------- train-seg ----------------
def _part_labels_by_shape(parts_dir: Path) -> dict[str, np.ndarray]:
    path = parts_dir / "part_labels.csv"
    if not path.exists():
        raise DataError(f"part labels not found: {path}")
    frame = pd.read_csv(path, dtype={"shape_id": str})
    return {sid: g.sort_values("node")["cluster"].to_numpy(dtype=np.int64) for sid, g in frame.groupby("shape_id")}


def cmd_train_seg(args: argparse.Namespace, settings: Settings) -> int:
    from processors.geomfeat import dataset_features
    from processors.hierarchy import load_hierarchy
    from processors.mrfseg import (
        LeafLabelSet,
        SegModel,
        build_ancestor_table,
        deepest_face_labels,
        save_seg_model,
        train_face_classifier,
    )
    from services.dataset import load_dataset

    cmd = "train-seg"
    out = _out_dir(args)
    parts_dir = Path(args.parts)
    with stage(cmd, "load"):
        hierarchy = load_hierarchy(parts_dir / "hierarchy.json")
        ds = load_dataset(args.dataset, split=args.split, fuzzy_threshold=settings.fuzzy_threshold,
                          with_truth=args.truth)
        leafset = LeafLabelSet(hierarchy)
        if args.truth:
            index = hierarchy.name_index()
            index[ds.category] = hierarchy.root
            by_shape = {
                s.shape_id: np.array([index.get(t, -1) for t in ds.truth[s.shape_id].part_types], dtype=np.int64)
                for s in ds.shapes if s.shape_id in ds.truth
            }
        else:
            by_shape = _part_labels_by_shape(parts_dir)
        missing = [s.shape_id for s in ds.shapes if s.shape_id not in by_shape]
        if missing:
            raise DataError(f"{len(missing)} shapes have no part labels (first: {missing[0]})")

    with stage(cmd, "labels"):
        b = {s.shape_id: deepest_face_labels(s.graph, by_shape[s.shape_id], hierarchy, s.mesh.n_faces) for s in ds.shapes}
        leaves = np.asarray(leafset.leaves, dtype=np.int64)
        all_b = np.concatenate(list(b.values()))
        table = build_ancestor_table(np.where(np.isin(all_b, leaves), all_b, -1), leafset)

    with stage(cmd, "features"):
        feats = dataset_features(ds.shapes, settings.features, ("face",), settings.jobs, settings.progress,
                                 _feature_cache(args, out))["face"]
        keep = {sid: labels >= 0 for sid, labels in b.items()}
        y = np.vstack([feats[s.shape_id][keep[s.shape_id]] for s in ds.shapes])
        labels = np.concatenate([b[s.shape_id][keep[s.shape_id]] for s in ds.shapes])
        areas = np.concatenate([s.mesh.face_areas[keep[s.shape_id]] for s in ds.shapes])
        logger.info("%d labeled training faces, %d leaves, %d uniform ancestor columns",
                    len(y), len(leafset), len(table.uniform_columns))

    with stage(cmd, "train"):
        try:
            result = train_face_classifier(y, labels, areas, table, settings.classifier, settings.adam)
        except NumericFailureError:
            logger.error("classifier training diverged; no model written")
            raise
    result.trace.to_csv(out / "classifier_trace.csv", index=False)

    with stage(cmd, "write"):
        model = SegModel(result.classifier, hierarchy, table, settings.seg.lam)
        save_seg_model(out / "seg_model.npz", model, {"config": settings.flat(), "category": ds.category})
        _echo_config(out, settings, cmd)
    return 0


# ---------------- segment ----------------
@lru_cache(maxsize=4)
def _seg_model(path: str, stamp: tuple[int, int]):
    """Loaded bundle per (path, mtime, size); xval rewrites the bundle in place."""
    from processors.mrfseg import load_seg_model

    return load_seg_model(path)


def _segment_task(task: tuple) -> tuple[str, Optional[dict], Optional[str]]:
    """Worker body; errors come back as text so nothing unpicklable crosses the pool."""
    path, model_path, settings, granularity, lam, index = task
    from processors.geomfeat import mesh_face_features, shape_seed
    from processors.mrfseg import segment
    from services.meshio import load_mesh

    shape_id = Path(path).stem
    try:
        st = Path(model_path).stat() if Path(model_path).exists() else None
        stamp = (st.st_mtime_ns, st.st_size) if st else (0, 0)
        model = _seg_model(str(model_path), stamp)
        mesh = load_mesh(path)
        y = mesh_face_features(mesh, settings.features, seed=shape_seed(settings.features.seed, shape_id)).matrix()
        res = segment(mesh, model, granularity, face_features=y, cfg=settings.seg,
                      area_weighted_cc=settings.classifier.area_weighted_cc, lam=lam)
        return shape_id, res.to_dict(model.hierarchy, shape_id), None
    except PipelineError as exc:
        return shape_id, None, str(exc)
    except (OSError, ValueError) as exc:
        return shape_id, None, f"{type(exc).__name__}: {exc}"


def _mesh_paths(items: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for item in items:
        p = Path(item)
        paths.extend(sorted(p.glob("*.obj")) if p.is_dir() else [p])
    if not paths:
        raise UsageError("segment needs at least one mesh")
    return paths


def cmd_segment(args: argparse.Namespace, settings: Settings) -> int:
    cmd = "segment"
    out = _out_dir(args)
    paths = _mesh_paths(args.meshes)
    granularity = settings.seg.granularity
    # the bundle's lambda (rewritten by xval) unless --lambda is given
    lam = settings.seg.lam if args.lam is not None else None
    tasks = [(str(p), args.model, settings, granularity, lam, i) for i, p in enumerate(paths)]

    with stage(cmd, "run"):
        if settings.jobs > 1:
            with ProcessPoolExecutor(max_workers=settings.jobs) as pool:
                results = list(tqdm(pool.map(_segment_task, tasks), total=len(tasks), disable=not settings.progress, desc="segment"))
        else:
            results = [_segment_task(t) for t in tqdm(tasks, disable=not settings.progress, desc="segment")]

    failures = []
    for shape_id, payload, error in results:
        if error is not None:
            logger.error("%s/%s: %s", cmd, shape_id, error)
            failures.append({"shape_id": shape_id, "error": error})
            continue
        _write_json(out / f"{shape_id}.json", payload)
        if payload["energy"] > payload["unary_energy"] + ENERGY_TOL * max(1.0, abs(payload["unary_energy"])):
            logger.warning("%s: MRF energy %.6f above the argmax energy %.6f", shape_id, payload["energy"], payload["unary_energy"])
    _echo_config(out, settings, cmd)
    if failures:
        pd.DataFrame(failures).to_csv(out / "failures.csv", index=False)
        raise DataError(f"{cmd}: {len(failures)} of {len(results)} meshes failed")
    logger.info("segmented %d meshes into %s", len(results), out)
    return 0


# ---------------- eval ----------------
def _load_predictions(pred_dir: Path) -> dict[str, dict]:
    preds = {}
    for path in sorted(pred_dir.glob("*.json")):
        if path.name == "config.json":
            continue
        data = json.loads(path.read_text(encoding="utf-8"))
        if "face_labels" not in data:
            continue
        preds[data.get("shape_id") or path.stem] = data
    return preds


def cmd_eval(args: argparse.Namespace, settings: Settings) -> int:
    from processors.hierarchy import hierarchy_from_template, load_hierarchy, same_tree
    from reports.metrics import (
        EvalReport,
        cluster_purity,
        confusion_by_area,
        leaf_accuracy,
        part_accuracy,
        per_label_accuracy,
        write_report,
    )
    from services.dataset import load_dataset

    cmd = "eval"
    out = _out_dir(args)
    report = EvalReport()
    with stage(cmd, "load", report.timings):
        ds = load_dataset(args.dataset, fuzzy_threshold=settings.fuzzy_threshold)
        if not ds.truth:
            raise DataError(f"{args.dataset} has no ground truth")
        records = {s.shape_id: s for s in ds.shapes}

    if args.predictions:
        with stage(cmd, "segmentation", report.timings):
            preds = _load_predictions(Path(args.predictions))
            if not preds:
                raise DataError(f"no predictions under {args.predictions}")
            unknown = sorted(set(preds) - set(ds.truth))
            if unknown:
                raise DataError(f"predictions for unknown shapes: {unknown[:5]}")
            pred_names, truth_names, areas = [], [], []
            energy_ok = True
            for sid, data in preds.items():
                names = data["label_names"]
                pred_names.append(np.array([names.get(str(v)) for v in data["face_labels"]], dtype=object))
                truth_names.append(ds.truth[sid].face_label_array())
                areas.append(records[sid].mesh.face_areas)
                energy_ok &= data["energy"] <= data["unary_energy"] + ENERGY_TOL * max(1.0, abs(data["unary_energy"]))
            report.leaf_accuracy = leaf_accuracy(pred_names, truth_names, areas)
            report.confusion = confusion_by_area(pred_names, truth_names, areas)
            report.per_label = per_label_accuracy(report.confusion)
            report.energy_ok = bool(energy_ok)

    if args.parts:
        parts_dir = Path(args.parts)
        with stage(cmd, "parts", report.timings):
            frame = pd.read_csv(parts_dir / "part_labels.csv", dtype={"shape_id": str})
            frame = frame[~frame["is_root"].astype(bool) & frame["shape_id"].isin(list(ds.truth))]
            truth = [ds.truth[sid].part_types[int(node)] for sid, node in zip(frame["shape_id"], frame["node"])]
            report.part_accuracy = part_accuracy(frame["name"].tolist(), truth)
            report.naive_part_accuracy = part_accuracy(frame["naive"].fillna("").tolist(), truth)
            report.cluster_purity = cluster_purity(frame["cluster"].tolist(), truth)
            learned = load_hierarchy(parts_dir / "hierarchy.json")
            expected = hierarchy_from_template(next(iter(ds.truth.values())).template)
            report.hierarchy_recovered = same_tree(learned, expected)

    with stage(cmd, "write", report.timings):
        write_report(report, out)
    print(report.to_markdown())
    return 0


# ---------------- xval ----------------
def cmd_xval(args: argparse.Namespace, settings: Settings) -> int:
    from processors.geomfeat import dataset_features
    from processors.mrfseg import LabeledShape, face_probs, load_seg_model, save_seg_model, xval_lambda
    from services.dataset import load_dataset

    cmd = "xval"
    out = _out_dir(args)
    with stage(cmd, "load"):
        model = load_seg_model(args.model)
        ds = load_dataset(args.dataset, split=args.split, fuzzy_threshold=settings.fuzzy_threshold)
        index = model.hierarchy.name_index()
        leaves = set(model.leafset.leaves)
    with stage(cmd, "features"):
        feats = dataset_features(ds.shapes, settings.features, ("face",), settings.jobs, settings.progress,
                                 _feature_cache(args, out))["face"]
        shapes = []
        for s in ds.shapes:
            if s.shape_id not in ds.truth:
                continue
            truth = np.array([index.get(n, -1) for n in ds.truth[s.shape_id].face_labels], dtype=np.int64)
            truth[~np.isin(truth, list(leaves))] = -1
            shapes.append(LabeledShape(s.shape_id, s.mesh, face_probs(model.classifier, feats[s.shape_id]), truth))
    with stage(cmd, "search"):
        result = xval_lambda(shapes, model, settings.seg.lambda_grid, settings.seg.xval_folds,
                             settings.seg.granularity, settings.seg, settings.seed)
    result.table.to_csv(out / "xval.csv", index=False)
    _write_json(out / "xval.json", {"lambda": result.lam, "grid": list(settings.seg.lambda_grid)})
    with stage(cmd, "write"):
        # segment reads lambda from the bundle
        model.lam = result.lam
        save_seg_model(args.model, model, {**model.meta, "lambda_source": "xval", "xval_split": args.split})
        logger.info("stored lambda %g in %s", result.lam, args.model)
    _echo_config(out, settings, cmd)
    print(f"lambda = {result.lam:g}")
    return 0


# ---------------- gradcheck ----------------
def cmd_gradcheck(args: argparse.Namespace, settings: Settings) -> int:
    from ai.gradcheck import TOLERANCE, run_gradient_suite, summarize

    with stage("gradcheck", "suite"):
        table = run_gradient_suite(args.points, args.coords, settings.seed)
    summary = summarize(table)
    print(summary.to_markdown(index=False, floatfmt=".3g"))
    if args.out:
        table.to_csv(_out_dir(args) / "gradcheck.csv", index=False)
    if not summary["ok"].all():
        bad = summary.loc[~summary["ok"], "term"].tolist()
        raise NumericFailureError(f"gradcheck: relative error above {TOLERANCE:g} for {bad}")
    return 0


# ---------------- Parser ----------------
def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat section.key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--progress", action="store_true", help="show progress bars")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="parthier", description="Part hierarchy learning and hierarchical mesh labeling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--template", choices=["vehicle", "table"])
    p.add_argument("--count", type=int)
    p.add_argument("--tag-drop", dest="tag_drop", type=float)
    p.add_argument("--tag-coarsen", dest="tag_coarsen", type=float)
    p.add_argument("--tag-error", dest="tag_error", type=float)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("features", parents=[common], help="compute and cache descriptors")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split")
    p.add_argument("--kind", choices=["part", "face", "both"], default="both")
    p.add_argument("--cache", help="feature cache file (default <out>/features.npz)")
    p.set_defaults(handler=cmd_features)

    p = sub.add_parser("train-parts", parents=[common], help="cluster parts and extract the hierarchy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--cache")
    p.set_defaults(handler=cmd_train_parts)

    p = sub.add_parser("train-seg", parents=[common], help="train the face classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--parts", required=True, help="train-parts output directory")
    p.add_argument("--split", default="train")
    p.add_argument("--truth", action="store_true", help="use ground-truth part types instead of learned labels")
    p.add_argument("--cache")
    p.set_defaults(handler=cmd_train_seg)

    p = sub.add_parser("segment", parents=[common], help="label new meshes")
    p.add_argument("meshes", nargs="+", help="OBJ files or directories of them")
    p.add_argument("--model", required=True, help="seg_model.npz")
    p.add_argument("--granularity", choices=["component", "face"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.set_defaults(handler=cmd_segment)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", help="segment output directory")
    p.add_argument("--parts", help="train-parts output directory")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("xval", parents=[common], help="choose lambda by cross-validation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="validation")
    p.add_argument("--granularity", choices=["component", "face"])
    p.add_argument("--cache")
    p.set_defaults(handler=cmd_xval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--coords", type=int, default=20)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        configure_logging()
        logger.error("%s", exc)
        return exc.exit_code
    configure_logging(args.verbose, args.quiet)
    try:
        settings = _settings_from_args(args)
        return int(args.handler(args, settings) or 0)
    except PipelineError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
