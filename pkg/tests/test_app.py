from __future__ import annotations

import json

import pandas as pd
import pytest

from app import main, stage
from processors.mrfseg import load_seg_model
from services.errors import DataError, UsageError

SMALL_RUN = """\
em.epochs = 1
em.batch_shapes = 3
em.pairs_per_batch = 200
em.monitor_parts = 20
features.samples = 600
features.neighbors = 12
features.part_samples = 150
features.grid = 8
features.render_size = 32
classifier.epochs = 2
classifier.batch_size = 128
segmentation.lambda_grid = 0.1, 1
segmentation.xval_folds = 2
"""


def test_stage_prefixes_errors():
    with pytest.raises(DataError, match="train-parts/load: boom"):
        with stage("train-parts", "load"):
            raise DataError("boom")
    with pytest.raises(DataError, match="segment/run"):
        with stage("segment", "run"):
            raise FileNotFoundError("missing.obj")
    timings = {}
    with stage("eval", "write", timings):
        pass
    assert timings["write"] >= 0.0


@pytest.mark.parametrize("argv", [
    [],
    ["nosuch"],
    ["synth"],
    ["segment", "--model", "m.npz", "--out", "x"],
    ["gradcheck", "-v", "-q"],
    ["eval", "--out", "x"],
])
def test_usage_errors_exit_1(argv):
    assert main(argv) == UsageError.exit_code == 1


def test_bad_config_exits_1(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("em.bogus = 1\n", encoding="utf-8")
    assert main(["gradcheck", "--config", str(cfg), "--points", "1"]) == 1


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--points", "2", "--coords", "5", "--out", str(tmp_path)]) == 0
    table = pd.read_csv(tmp_path / "gradcheck.csv")
    assert len(table) == 8
    assert "marginalized" in capsys.readouterr().out


def test_synth_command(tmp_path):
    out = tmp_path / "ds"
    assert main(["synth", "--template", "table", "--count", "2", "--seed", "3", "--out", str(out)]) == 0
    assert len(pd.read_csv(out / "manifest.csv")) == 2
    config = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert config["command"] == "synth"
    assert config["settings"]["run.seed"] == 3
    assert config["settings"]["synth.template"] == "table"


def test_failed_meshes_are_listed(tmp_path):
    out = tmp_path / "seg"
    code = main(["segment", str(tmp_path / "absent.obj"), "--model", str(tmp_path / "absent.npz"), "--out", str(out)])
    assert code == 2
    failures = pd.read_csv(out / "failures.csv")
    assert failures["shape_id"].tolist() == ["absent"]


def test_eval_without_predictions(table_dataset, tmp_path):
    empty = tmp_path / "preds"
    empty.mkdir()
    assert main(["eval", "--dataset", str(table_dataset), "--predictions", str(empty), "--out", str(tmp_path / "e")]) == 2


def _run_pipeline(root, common, count=20):
    """synth, train-parts, train-seg and segment on every shape; returns the output directories."""
    data, parts, seg, pred = (root / d for d in ("data", "parts", "seg", "pred"))
    assert main(["synth", "--template", "table", "--count", str(count), "--out", str(data), *common]) == 0
    assert main(["train-parts", "--dataset", str(data), "--out", str(parts), *common]) == 0
    assert main(["train-seg", "--dataset", str(data), "--parts", str(parts), "--out", str(seg), *common]) == 0
    assert main(["segment", str(data / "shapes"), "--model", str(seg / "seg_model.npz"),
                 "--out", str(pred), *common]) == 0
    return data, parts, seg, pred


def _outputs(pred):
    return sorted(p for p in pred.glob("*.json") if p.name != "config.json")


def _energy_ok(payload):
    return payload["energy"] <= payload["unary_energy"] + 1e-9 * max(1.0, abs(payload["unary_energy"]))


@pytest.mark.slow
def test_pipeline_end_to_end(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_RUN + "segmentation.lambda = 0.5\n", encoding="utf-8")
    common = ["--config", str(cfg), "--seed", "5", "-q"]
    data, parts, seg, pred = _run_pipeline(tmp_path, common)

    for name in ("hierarchy.json", "part_labels.csv", "loss_trace.csv", "part_model.npz", "config.json"):
        assert (parts / name).exists()
    labels = pd.read_csv(parts / "part_labels.csv")
    assert set(labels.columns) == {"shape_id", "node", "is_root", "cluster", "name", "naive"}
    assert len(pd.read_csv(seg / "classifier_trace.csv")) == 2

    outputs = [json.loads(p.read_text(encoding="utf-8")) for p in _outputs(pred)]
    assert len(outputs) == 20
    assert all(_energy_ok(o) for o in outputs)
    assert all(o["lambda"] == 0.5 for o in outputs)
    assert outputs[0]["scene_graph"]["root"]["label"] == "table"

    # default split is validation: 2 of 20 shapes
    xv = tmp_path / "xval"
    assert main(["xval", "--dataset", str(data), "--model", str(seg / "seg_model.npz"), "--out", str(xv), *common]) == 0
    lam = json.loads((xv / "xval.json").read_text(encoding="utf-8"))["lambda"]
    assert lam in (0.1, 1.0)
    assert load_seg_model(seg / "seg_model.npz").lam == lam

    again = tmp_path / "pred_xval"
    assert main(["segment", str(data / "shapes"), "--model", str(seg / "seg_model.npz"),
                 "--out", str(again), *common]) == 0
    assert all(json.loads(p.read_text(encoding="utf-8"))["lambda"] == lam for p in _outputs(again))

    ev = tmp_path / "eval"
    assert main(["eval", "--dataset", str(data), "--predictions", str(pred), "--parts", str(parts),
                 "--out", str(ev), *common]) == 0
    report = pd.read_csv(ev / "report.csv")
    assert ((report["accuracy"] >= 0) & (report["accuracy"] <= 1)).all()
    assert "Leaf accuracy" in (ev / "summary.md").read_text(encoding="utf-8")
    assert json.loads((ev / "summary.json").read_text(encoding="utf-8"))["Energy not above argmax"] is True


@pytest.mark.slow
def test_reruns_are_byte_identical(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_RUN, encoding="utf-8")
    common = ["--config", str(cfg), "--seed", "11", "--jobs", "1", "-q"]
    first = _run_pipeline(tmp_path / "a", common)
    second = _run_pipeline(tmp_path / "b", common)
    files = [
        ("data", "manifest.csv"),
        ("parts", "part_model.npz"),
        ("parts", "hierarchy.json"),
        ("parts", "part_labels.csv"),
        ("parts", "loss_trace.csv"),
        ("seg", "seg_model.npz"),
        ("seg", "classifier_trace.csv"),
    ]
    dirs = dict(zip(("data", "parts", "seg", "pred"), zip(first, second)))
    for kind, name in files:
        a, b = dirs[kind]
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    a_out, b_out = _outputs(first[3]), _outputs(second[3])
    assert [p.name for p in a_out] == [p.name for p in b_out]
    for a, b in zip(a_out, b_out):
        assert a.read_bytes() == b.read_bytes(), a.name


@pytest.mark.slow
def test_vehicle_acceptance_run(tmp_path):
    """Stock settings on 200 vehicles: hierarchy, part labels and held-out segmentation."""
    common = ["--seed", "7", "--jobs", "1", "-q"]
    data, parts, seg, pred, face, ev, ev_face = (
        tmp_path / d for d in ("data", "parts", "seg", "pred", "face", "eval", "eval_face"))
    assert main(["synth", "--template", "vehicle", "--count", "200", "--tag-drop", "0.3", "--tag-coarsen", "0.1",
                 "--tag-error", "0.02", "--out", str(data), *common]) == 0
    assert main(["train-parts", "--dataset", str(data), "--out", str(parts), *common]) == 0
    assert main(["train-seg", "--dataset", str(data), "--parts", str(parts), "--out", str(seg), *common]) == 0

    manifest = pd.read_csv(data / "manifest.csv", dtype={"shape_id": str})
    held_out = manifest.loc[manifest["split"] != "train", "shape_id"].tolist()[:50]
    assert len(held_out) == 50
    meshes = [str(data / "shapes" / f"{sid}.obj") for sid in held_out]
    model = str(seg / "seg_model.npz")
    assert main(["segment", *meshes, "--model", model, "--out", str(pred), *common]) == 0
    assert main(["segment", *meshes[:5], "--model", model, "--granularity", "face", "--out", str(face), *common]) == 0

    outputs = [json.loads(p.read_text(encoding="utf-8")) for p in _outputs(pred)]
    assert len(outputs) == 50
    assert all(_energy_ok(o) for o in outputs)

    assert main(["eval", "--dataset", str(data), "--predictions", str(pred), "--parts", str(parts),
                 "--out", str(ev), *common]) == 0
    summary = json.loads((ev / "summary.json").read_text(encoding="utf-8"))
    assert summary["Hierarchy recovered"] is True
    assert summary["Part accuracy"] >= 0.95
    assert summary["Leaf accuracy (area)"] >= 0.90
    assert summary["Energy not above argmax"] is True

    assert main(["eval", "--dataset", str(data), "--predictions", str(face), "--out", str(ev_face), *common]) == 0
    assert json.loads((ev_face / "summary.json").read_text(encoding="utf-8"))["Leaf accuracy (area)"] >= 0.85
