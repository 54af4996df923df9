import csv
import json
import shutil

import numpy as np
import pytest

from sideaware import io as sio
from sideaware.cli import main
from sideaware.evaluation import ScoredBox

SMALL = "seed: 3\ndata: {n_train: 10, n_val: 5}\ntrain: {pretrain_epochs: 6, ssl_iterations: 8, eval_every: 4}\n"


def run(run_dir, *args):
    return main([*args, "--config", str(run_dir / "small.yaml"), "--run-dir", str(run_dir)])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "small.yaml").write_text(SMALL)
    for cmd in ("gen", "pretrain", "ssl", "filter", "report"):
        assert run(d, cmd) == 0, cmd
    return d


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert main([]) == 1
        assert main(["frobnicate"]) == 1

    def test_config_error(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("train: {betta: 1}\n")
        assert main(["config", "--config", str(p)]) == 1
        assert "train.betta" in capsys.readouterr().err

    def test_missing_input_names_path(self, tmp_path, capsys):
        assert main(["pretrain", "--run-dir", str(tmp_path)]) == 2
        assert "scenes_labeled.jsonl" in capsys.readouterr().err

    def test_config_prints_yaml(self, tmp_path):
        assert main(["config", "--out", str(tmp_path / "c.yaml")]) == 0
        assert "tau_obj: 0.8" in (tmp_path / "c.yaml").read_text()


class TestPipeline:
    def test_gen_split(self, pipeline):
        assert len(sio.read_scenes(pipeline / "scenes_labeled.jsonl")) == 2
        assert len(sio.read_scenes(pipeline / "scenes_unlabeled.jsonl")) == 8
        assert len(sio.read_scenes(pipeline / "scenes_val.jsonl")) == 5
        assert len(sio.read_detections(pipeline / "detections_unlabeled.jsonl")) == 8

    def test_gen_default_100(self, tmp_path):
        assert main(["gen", "--run-dir", str(tmp_path)]) == 0
        assert len(sio.read_scenes(tmp_path / "scenes_labeled.jsonl")) == 20
        assert len(sio.read_scenes(tmp_path / "scenes_unlabeled.jsonl")) == 80

    def test_gen_deterministic(self, pipeline, tmp_path):
        shutil.copy(pipeline / "small.yaml", tmp_path / "small.yaml")
        assert run(tmp_path, "gen") == 0
        for name in ("scenes_labeled.jsonl", "scenes_unlabeled.jsonl", "scenes_val.jsonl",
                     "detections_unlabeled.jsonl"):
            assert (tmp_path / name).read_bytes() == (pipeline / name).read_bytes()

    def test_seed_override(self, pipeline, tmp_path):
        shutil.copy(pipeline / "small.yaml", tmp_path / "small.yaml")
        assert run(tmp_path, "gen", "--seed", "4") == 0
        assert (tmp_path / "scenes_val.jsonl").read_bytes() != (pipeline / "scenes_val.jsonl").read_bytes()

    def test_pretrain_report_rows(self, pipeline):
        rows = _rows(pipeline / "reports" / "pretrain_report.csv")
        assert len(rows) == 6
        assert [int(r["epoch"]) for r in rows] == list(range(6))

    def test_ssl_outputs(self, pipeline):
        assert (pipeline / "ssl_student.ckpt").exists() and (pipeline / "ssl_teacher.ckpt").exists()
        rows = _rows(pipeline / "reports" / "ssl_report.csv")
        assert [int(r["iteration"]) for r in rows] == [4, 8]

    def test_filter_count(self, pipeline):
        dets = sio.read_detections(pipeline / "detections_unlabeled.jsonl")
        pls = sio.read_pseudo_labels(pipeline / "reports" / "pseudo_labels.jsonl")
        assert [s for s, _ in pls] == [s for s, _ in dets]
        assert all(len(p) <= len(d) for (_, p), (_, d) in zip(pls, dets))

    def test_filter_empty(self, tmp_path):
        src, dst = tmp_path / "d.jsonl", tmp_path / "pl.jsonl"
        sio.write_detections(src, [])
        assert main(["filter", "--detections", str(src), "--out", str(dst)]) == 0
        assert sio.read_pseudo_labels(dst) == []

    def test_eval_perfect(self, pipeline, tmp_path):
        scenes = sio.read_scenes(pipeline / "scenes_val.jsonl")
        preds = [(s.scene_id, [ScoredBox(b, c, 0.9, np.ones(6)) for b, c in s.ground_truth])
                 for s in scenes]
        sio.write_predictions(tmp_path / "p.jsonl", preds)
        assert main(["eval", "--predictions", str(tmp_path / "p.jsonl"),
                     "--ground-truth", str(pipeline / "scenes_val.jsonl"),
                     "--out-dir", str(tmp_path), "--name", "gt"]) == 0
        summary = json.loads((tmp_path / "gt_summary.json").read_text())
        assert summary["mAP@0.25"] == 1.0 and summary["mAP@0.50"] == 1.0

    def test_report_files(self, pipeline):
        pngs = sorted(p.name for p in (pipeline / "reports").glob("*.png"))
        assert "pretrain_losses.png" in pngs and "ssl_map.png" in pngs
        summary = json.loads((pipeline / "reports" / "report_summary.json").read_text())
        assert set(summary["figures"]) == set(pngs)
        assert all(isinstance(m["value"], float) for m in summary["metrics"])

    def test_report_deterministic(self, pipeline):
        before = {p.name: p.read_bytes() for p in (pipeline / "reports").glob("*.png")}
        assert run(pipeline, "report") == 0
        after = {p.name: p.read_bytes() for p in (pipeline / "reports").glob("*.png")}
        assert before == after
