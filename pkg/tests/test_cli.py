import csv
import json

import pytest

from conftest import tiny_config
from stageprop.cli import main
from stageprop.core import load_annotations
from stageprop.labeling import label_frames
from stageprop.pipeline import read_proposals_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config()
    (root / "config.json").write_text(json.dumps(cfg))
    assert main(["gen-synth", "--out", str(root / "data"), "--config", str(root / "config.json"), "--n-videos", "12", "--seed", "4"]) == 0
    return root


def data_args(ws):
    return ["--annotations", str(ws / "data" / "annotations.json"), "--features-dir", str(ws / "data" / "features")]


@pytest.fixture(scope="module")
def trained(workspace):
    ws = workspace
    cfg = ["--config", str(ws / "config.json")]
    assert main(["train-ass", *data_args(ws), "--out", str(ws / "ass.ckpt"), *cfg]) == 0
    assert main(["train-pes", *data_args(ws), "--ass", str(ws / "ass.ckpt"), "--out", str(ws / "pes.ckpt"), *cfg]) == 0
    return ws


def test_gen_synth_layout(workspace):
    anns = load_annotations(workspace / "data" / "annotations.json")
    assert len(anns) == 12 and all(a.n_frames == 128 for a in anns)
    assert len(list((workspace / "data" / "features").glob("*.fseq"))) == 12


def test_label_writes_csv(workspace, capsys):
    out = workspace / "labels.csv"
    assert main(["label", "--annotations", str(workspace / "data" / "annotations.json"), "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["video_id", "labels"]
    anns = load_annotations(workspace / "data" / "annotations.json")
    assert rows[1][1] == ",".join(str(int(v)) for v in label_frames(anns[0]).labels)
    assert main(["label", "--annotations", str(workspace / "data" / "annotations.json"), "--scale", "4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines[1].split(",")) == 1 + 128 // 4


def test_predict_and_evaluate(trained, capsys):
    ws = trained
    props = ws / "props.csv"
    args = ["predict", *data_args(ws), "--ass", str(ws / "ass.ckpt"), "--pes", str(ws / "pes.ckpt"), "--out", str(props)]
    assert main(args + ["--nms", "greedy", "--nms-thresh", "0.6", "--config", str(ws / "config.json")]) == 0
    loaded = read_proposals_csv(props)
    assert loaded and all(p.eval_score is not None for v in loaded.values() for p in v)
    ev = ws / "eval"
    assert main(["evaluate", "--proposals", str(props), "--annotations", str(ws / "data" / "annotations.json"),
                 "--out-dir", str(ev), "--an", "1", "5", "--max-an", "10", "--recall-an", "5"]) == 0
    summary = json.loads((ev / "summary.json").read_text())
    assert set(summary) == {"AR@1", "AR@5"} and 0.0 <= summary["AR@1"] <= summary["AR@5"] <= 1.0
    assert (ev / "ar_an.csv").read_text().splitlines()[0] == "an,ar"
    assert (ev / "recall_iou.csv").read_text().splitlines()[0] == "tiou,recall@5"
    assert json.loads(capsys.readouterr().out.splitlines()[-1]) == summary


def test_predict_without_evaluator_uses_pre_scores(trained):
    ws = trained
    out = ws / "pre_only.csv"
    assert main(["predict", *data_args(ws), "--ass", str(ws / "ass.ckpt"), "--out", str(out), "--window-len", "48"]) == 0
    loaded = read_proposals_csv(out)
    flat = [p for v in loaded.values() for p in v]
    assert flat and all(p.eval_score == 1.0 and p.final_score == p.pre_score for p in flat)


def test_export_embeddings(trained):
    ws = trained
    out = ws / "emb.csv"
    assert main(["export-embeddings", *data_args(ws), "--ass", str(ws / "ass.ckpt"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 12 * 128
    assert set(rows[0]) == {"video_id", "timestep", "label", "x", "y", "angle"}


def test_run_subcommand(tmp_path, workspace, capsys):
    assert main(["run", "--config", str(workspace / "config.json"), "--out", str(tmp_path), "--nms", "soft-linear"]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["nms_primary"] == "soft_linear"
    assert "AR@10" in json.loads((tmp_path / "summary.json").read_text())


def test_run_on_feature_files(tmp_path, workspace):
    # a partial config naming file splits overrides the synthetic default
    for split, n in (("train", "8"), ("test", "3")):
        assert main(["gen-synth", "--out", str(tmp_path / split), "--config", str(workspace / "config.json"),
                     "--n-videos", n, "--seed", "9" if split == "train" else "10"]) == 0
    partial = {k: v for k, v in tiny_config().items() if k != "data"}
    partial["data"] = {
        "train": {"annotations": "train/annotations.json", "features_dir": "train/features"},
        "test": {"annotations": "test/annotations.json", "features_dir": "test/features"},
    }
    (tmp_path / "files.json").write_text(json.dumps(partial))
    assert main(["run", "--config", str(tmp_path / "files.json"), "--out", str(tmp_path / "out")]) == 0
    test_ids = {a.video_id for a in load_annotations(tmp_path / "test" / "annotations.json")}
    assert set(read_proposals_csv(tmp_path / "out" / "proposals.csv")) == test_ids


def test_validation_errors_exit_2(workspace, tmp_path, capsys):
    ws = workspace
    assert main(["label", "--annotations", str(tmp_path / "nope.json")]) == 2
    assert "annotation file not found" in capsys.readouterr().err
    assert main(["predict", *data_args(ws), "--ass", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "p.csv")]) == 2
    assert "checkpoint not found" in capsys.readouterr().err
    assert main(["train-ass", "--annotations", str(ws / "data" / "annotations.json"), "--features-dir", str(tmp_path),
                 "--out", str(tmp_path / "a.ckpt")]) == 2
    assert "feature file not found" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["predict", "--nms", "hard"])
    assert exc.value.code == 2


def test_runtime_errors_exit_1(workspace, tmp_path, capsys):
    assert main(["label", "--annotations", str(workspace / "data" / "annotations.json"), "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error: IsADirectoryError")
