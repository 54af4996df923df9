"""Command-line entry point: ``sideaware <command> [options]``.

Commands share ``--config`` (YAML, defaults when omitted), ``--run-dir``
(where relative file names from the config resolve) and ``--seed``.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import io as sio
from . import plotting
from .config import RunConfig, default_config_yaml, load_config
from .errors import (ConfigError, DivergenceError, FileFormatError, InvalidGeometryError,
                     InvalidInputError, SceneGenerationError)
from .evaluation import SideQualityReport, average_precision, side_error_stats
from .soft_pls import CategoryThresholdState, select_pseudo_labels
from .ssl_sim import (StudentModel, _rng, generate_splits, run_pretrain, run_ssl,
                      student_predictions, teacher_predict)
from .uncertainty import dump_tensors, load_tensors

log = logging.getLogger("sideaware")

RUNTIME_ERRORS = (FileFormatError, FileNotFoundError, DivergenceError, SceneGenerationError,
                  InvalidInputError, InvalidGeometryError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# helpers

def _resolve(run_dir: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else run_dir / p


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return v


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return buf.getvalue()


def _write_csv(path, rows, columns):
    sio.atomic_write(path, _csv_text(rows, columns))


def _write_json(path, obj):
    sio.atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _load_student(path) -> StudentModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"no such checkpoint: {path}") from None
    return StudentModel.from_tensors(load_tensors(data, path))


def _save_student(path, student: StudentModel):
    sio.atomic_write(path, dump_tensors(student.tensors()))


def _report_dir(cfg: RunConfig, run_dir: Path) -> Path:
    return _resolve(run_dir, cfg.paths.report_dir)


# commands

def cmd_config(args, cfg: RunConfig, run_dir: Path) -> int:
    text = default_config_yaml()
    if args.out:
        sio.atomic_write(args.out, text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen(args, cfg: RunConfig, run_dir: Path) -> int:
    sim = cfg.sim_config()
    labeled, unlabeled, val = generate_splits(
        cfg.scene, cfg.seed, cfg.data.n_train, cfg.data.labeled_fraction, cfg.data.n_val,
        cfg.data.copy_labeled_as_unlabeled)

    sio.write_scenes(_resolve(run_dir, cfg.paths.labeled), labeled)
    sio.write_scenes(_resolve(run_dir, cfg.paths.unlabeled), unlabeled)
    sio.write_scenes(_resolve(run_dir, cfg.paths.val), val)

    # teacher detections on the unlabeled split, oracle side uncertainties
    per_scene = []
    for i, scene in enumerate(unlabeled):
        dets = teacher_predict(scene, cfg.teacher_noise, _rng(cfg.seed, 103, i), sim.ranges,
                               cfg.scene.n_classes, None, cfg.head)
        per_scene.append((scene.scene_id, dets))
    sio.write_detections(_resolve(run_dir, cfg.paths.detections), per_scene)
    n_det = sum(len(d) for _, d in per_scene)
    print(f"labeled scenes: {len(labeled)}")
    print(f"unlabeled scenes: {len(unlabeled)}")
    print(f"validation scenes: {len(val)}")
    print(f"teacher detections: {n_det}")
    return 0


def _eval_outputs(preds_per_scene, scenes, cfg: RunConfig, out_dir: Path, name: str) -> dict:
    """Write ``<name>_ap.csv`` and ``<name>_summary.json``; returns the summary."""
    by_id = {s.scene_id: s for s in scenes}
    unknown = [sid for sid, _ in preds_per_scene if sid not in by_id]
    if unknown:
        raise InvalidInputError(f"predictions reference unknown scene ids: {unknown[:5]}")
    pred_map = dict(preds_per_scene)
    preds = [pred_map.get(s.scene_id, []) for s in scenes]
    gts = [s.ground_truth for s in scenes]
    ap = average_precision(preds, gts, tuple(cfg.eval.iou_thresholds),
                           classes=list(range(cfg.scene.n_classes)))
    sio.atomic_write(out_dir / f"{name}_ap.csv", ap.to_csv())
    summary = {"scenes": len(scenes), "predictions": sum(len(p) for p in preds),
               "ground_truth": sum(len(g) for g in gts), **ap.summary()}
    if any(p.side_quality is not None for ps in preds for p in ps):
        rep = SideQualityReport()
        for ps, g in zip(preds, gts):
            rep = rep.merge(side_error_stats(ps, g, cfg.eval.side_match_iou,
                                             cfg.eval.side_error_threshold))
        side = rep.summary()
        _write_json(out_dir / f"{name}_side.json", side)
        summary["side_quality"] = {k: v for k, v in side.items() if k != "per_class"}
    _write_json(out_dir / f"{name}_summary.json", summary)
    return summary


PRETRAIN_COLUMNS = ("epoch", "uncertainty_loss", "box_loss")
SSL_COLUMNS = ("iteration", "sup_loss", "unsup_loss", "total_loss", "teacher_detections",
               "pseudo_labels", "mean_side_quality")


def cmd_pretrain(args, cfg: RunConfig, run_dir: Path) -> int:
    sim = cfg.sim_config()
    labeled = sio.read_scenes(_resolve(run_dir, cfg.paths.labeled))
    student, report = run_pretrain(labeled, sim)
    out = _report_dir(cfg, run_dir)
    _save_student(_resolve(run_dir, cfg.paths.pretrain_checkpoint), student)
    _write_csv(out / "pretrain_report.csv", report, PRETRAIN_COLUMNS)
    val = _maybe_val(cfg, run_dir)
    if val:
        preds = student_predictions(student, val, sim)
        per_scene = [(s.scene_id, p) for s, p in zip(val, preds)]
        sio.write_predictions(out / "predictions_val_pretrain.jsonl", per_scene)
        summary = _eval_outputs(per_scene, val, cfg, out, "pretrain_eval")
        print(_map_line("pretrain", summary))
    print(f"pretrain epochs: {len(report)}")
    return 0


def _maybe_val(cfg, run_dir):
    path = _resolve(run_dir, cfg.paths.val)
    return sio.read_scenes(path) if path.exists() else []


def _map_line(name, summary):
    return name + " " + " ".join(f"{k}={v:.4f}" for k, v in summary.items() if k.startswith("mAP"))


def cmd_ssl(args, cfg: RunConfig, run_dir: Path) -> int:
    sim = cfg.sim_config()
    labeled = sio.read_scenes(_resolve(run_dir, cfg.paths.labeled))
    unlabeled = sio.read_scenes(_resolve(run_dir, cfg.paths.unlabeled))
    pretrained = _load_student(_resolve(run_dir, cfg.paths.pretrain_checkpoint))
    val = _maybe_val(cfg, run_dir)
    student, teacher, report = run_ssl(labeled, unlabeled, pretrained, sim, val or None)
    out = _report_dir(cfg, run_dir)
    _save_student(_resolve(run_dir, cfg.paths.student_checkpoint), student)
    _save_student(_resolve(run_dir, cfg.paths.teacher_checkpoint), teacher)
    columns = SSL_COLUMNS + tuple(k for k in (report[0] if report else {}) if k.startswith("map"))
    _write_csv(out / "ssl_report.csv", report, columns)
    if val:
        preds = student_predictions(student, val, sim)
        per_scene = [(s.scene_id, p) for s, p in zip(val, preds)]
        sio.write_predictions(out / "predictions_val_ssl.jsonl", per_scene)
        summary = _eval_outputs(per_scene, val, cfg, out, "ssl_eval")
        print(_map_line("ssl", summary))
    print(f"ssl iterations: {cfg.train.ssl_iterations}")
    return 0


def cmd_filter(args, cfg: RunConfig, run_dir: Path) -> int:
    src = Path(args.detections) if args.detections else _resolve(run_dir, cfg.paths.detections)
    dst = Path(args.out) if args.out else _report_dir(cfg, run_dir) / "pseudo_labels.jsonl"
    per_scene = sio.read_detections(src)
    state = CategoryThresholdState(cfg.scene.n_classes)
    out, n_in, n_out = [], 0, 0
    for sid, dets in per_scene:
        if any(d.class_scores.shape[0] != cfg.scene.n_classes for d in dets):
            raise InvalidInputError(f"{src}: scene {sid}: class score length differs from "
                                    f"scene.n_classes={cfg.scene.n_classes}")
        pls, state = select_pseudo_labels(dets, state, cfg.selection)
        out.append((sid, pls))
        n_in += len(dets)
        n_out += len(pls)
    sio.write_pseudo_labels(dst, out)
    print(f"detections: {n_in}")
    print(f"pseudo-labels: {n_out}")
    return 0


def cmd_eval(args, cfg: RunConfig, run_dir: Path) -> int:
    preds = sio.read_predictions(args.predictions)
    scenes = sio.read_scenes(args.ground_truth)
    out = Path(args.out_dir) if args.out_dir else _report_dir(cfg, run_dir)
    summary = _eval_outputs(preds, scenes, cfg, out, args.name)
    print(_map_line(args.name, summary))
    if "side_quality" in summary:
        sq = summary["side_quality"]
        print(f"good sides: {sq['good_side_count']} bad sides: {sq['bad_side_count']} "
              f"recall: {sq['recall']:.4f}")
    return 0


def cmd_report(args, cfg: RunConfig, run_dir: Path) -> int:
    """Render figures next to the delimited reports found in the report directory."""
    out = Path(args.report_dir) if args.report_dir else _report_dir(cfg, run_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"no report directory: {out}")
    written = []

    def emit(name, data):
        sio.atomic_write(out / name, data)
        written.append(name)

    rows_summary = []
    pre = out / "pretrain_report.csv"
    if pre.exists():
        rows = _read_csv(pre)
        emit("pretrain_losses.png", plotting.loss_curves(
            rows, "epoch", ["uncertainty_loss", "box_loss"], "pretraining"))
        if rows:
            rows_summary.append({"stage": "pretrain", "metric": "final_uncertainty_loss",
                                 "value": rows[-1]["uncertainty_loss"]})
            rows_summary.append({"stage": "pretrain", "metric": "final_box_loss",
                                 "value": rows[-1]["box_loss"]})
    ssl = out / "ssl_report.csv"
    if ssl.exists():
        rows = _read_csv(ssl)
        emit("ssl_losses.png", plotting.loss_curves(
            rows, "iteration", ["sup_loss", "unsup_loss", "total_loss"], "semi-supervised training"))
        emit("ssl_pseudo_labels.png", plotting.pseudo_label_panel(rows))
        map_keys = [k for k in (rows[0] if rows else {}) if k.startswith("map")]
        if map_keys:
            emit("ssl_map.png", plotting.loss_curves(rows, "iteration", map_keys,
                                                     "validation mAP", ylabel="mAP", log_y=False))
        if rows:
            for k in ("pseudo_labels", "mean_side_quality", *map_keys):
                rows_summary.append({"stage": "ssl", "metric": f"final_{k}", "value": rows[-1][k]})
    for ap_file in sorted(out.glob("*_ap.csv")):
        name = ap_file.name[:-len("_ap.csv")]
        rows = _read_csv(ap_file)
        emit(f"{name}_ap.png", plotting.ap_bars(rows))
        for r in rows:
            if r["class"] == "mAP":
                rows_summary.append({"stage": name, "metric": f"mAP@{r['iou_threshold']}",
                                     "value": r["ap"]})
        side = out / f"{name}_side.json"
        if side.exists():
            per_class = json.loads(side.read_text(encoding="utf-8"))["per_class"]
            emit(f"{name}_side_quality.png", plotting.side_quality_bars(per_class))
    if not written:
        raise FileNotFoundError(f"{out}: no report files to render")
    for r in rows_summary:
        r["value"] = float(r["value"])
    _write_csv(out / "report_summary.csv", rows_summary, ("stage", "metric", "value"))
    _write_json(out / "report_summary.json", {"figures": written, "metrics": rows_summary})
    for name in written:
        print(out / name)
    return 0


COMMANDS = {
    "config": cmd_config, "gen": cmd_gen, "pretrain": cmd_pretrain, "ssl": cmd_ssl,
    "filter": cmd_filter, "eval": cmd_eval, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults when omitted)")
    common.add_argument("--run-dir", default=".", help="directory for relative paths (default .)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="sideaware", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("config", parents=[common], help="print the default configuration")
    p.add_argument("--out", help="write to this file instead of stdout")
    sub.add_parser("gen", parents=[common], help="generate scenes and teacher detections")
    sub.add_parser("pretrain", parents=[common], help="train on labeled scenes")
    sub.add_parser("ssl", parents=[common], help="mean-teacher training with pseudo-labels")
    p = sub.add_parser("filter", parents=[common], help="select pseudo-labels from detections")
    p.add_argument("--detections", help="detections file (default from config)")
    p.add_argument("--out", help="pseudo-label file (default <report_dir>/pseudo_labels.jsonl)")
    p = sub.add_parser("eval", parents=[common], help="AP and side-quality metrics")
    p.add_argument("--predictions", required=True, help="predictions or pseudo-label file")
    p.add_argument("--ground-truth", required=True, help="scene file with ground truth")
    p.add_argument("--out-dir", help="output directory (default report_dir)")
    p.add_argument("--name", default="eval", help="output file prefix (default eval)")
    p = sub.add_parser("report", parents=[common], help="render figures from report files")
    p.add_argument("--report-dir", help="directory with report files (default report_dir)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    run_dir = Path(args.run_dir)
    try:
        return COMMANDS[args.command](args, cfg, run_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
