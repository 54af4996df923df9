"""Line-oriented JSON files for scenes, detections, pseudo-labels and predictions.

Every file starts with a header record ``{"format": <kind>, "version": 1,
"units": "meters, radians"}`` followed by one JSON object per line. Writes
are atomic (temporary file in the target directory, then rename) and use
sorted keys so identical content gives identical bytes.

Record schemas (all lengths in meters, angles in radians):

``scenes``
    {"scene_id", "labeled", "boxes": [{"center": [x, y, z], "size": [l, w, h],
    "yaw", "class", "visibility": [6 values, side order top..back]}],
    "seeds": [{"xyz": [x, y, z], "feature": [C values]}]}
``detections``
    {"scene_id", "detections": [{"candidate", "yaw", "side_ranges":
    [[s_min, s_max, N] x 6], "side_probs": [[N values] x 6], "class_scores",
    "objectness", "predicted_iou", "side_uncertainty": [6 values]}]}
``pseudo_labels``
    {"scene_id", "pseudo_labels": [{"center", "size", "yaw", "class",
    "side_quality": [6 values], "global_quality", "score"}]}
``predictions``
    {"scene_id", "predictions": [{"center", "size", "yaw", "class", "score",
    optional "side_quality"}]}
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .box_geometry import OrientedBox3, SideDistances, box_from_sides
from .errors import FileFormatError
from .evaluation import ScoredBox
from .side_distribution import SideDistribution, SideRange, expected_value
from .soft_pls import Detection, PseudoLabel
from .ssl_sim import SceneSample
from .uncertainty import SeedCloud

FORMAT_VERSION = 1
UNITS = "meters, radians"


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        # mkstemp creates 0600; use the usual umask-based mode instead
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _floats(values):
    return [float(v) for v in np.asarray(values, dtype=float).ravel()]


def dump_records(kind: str, records) -> str:
    lines = [_dumps({"format": kind, "version": FORMAT_VERSION, "units": UNITS})]
    lines.extend(_dumps(r) for r in records)
    return "\n".join(lines) + "\n"


def write_records(path, kind: str, records) -> None:
    atomic_write(path, dump_records(kind, records))


def read_records(path, kind: str):
    """Yield ``(line_number, record)`` after checking the header."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"no such file: {path}") from None
    lines = text.splitlines()
    if not lines:
        raise FileFormatError(path, 1, "empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FileFormatError(path, 1, f"bad header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != kind:
        raise FileFormatError(path, 1, f"expected a '{kind}' file header")
    if header.get("version") != FORMAT_VERSION:
        raise FileFormatError(path, 1, f"unsupported version {header.get('version')!r}")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            out.append((n, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise FileFormatError(path, n, f"invalid JSON: {exc.msg}") from None
    return out


def _field(rec, key, path, line):
    try:
        return rec[key]
    except (KeyError, TypeError):
        raise FileFormatError(path, line, f"missing field '{key}'") from None


def _box(rec, path, line) -> OrientedBox3:
    try:
        return OrientedBox3(_field(rec, "center", path, line), _field(rec, "size", path, line),
                            float(_field(rec, "yaw", path, line)))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, FileFormatError):
            raise
        raise FileFormatError(path, line, f"invalid box: {exc}") from None


# scenes

def scene_record(scene: SceneSample) -> dict:
    boxes = []
    for box, cls, vis in zip(scene.boxes, scene.classes, scene.visibility):
        rec = box.as_dict()
        rec["class"] = int(cls)
        rec["visibility"] = _floats(vis)
        boxes.append(rec)
    seeds = [{"xyz": _floats(p), "feature": _floats(f)}
             for p, f in zip(scene.seeds.points, scene.seeds.features)]
    return {"scene_id": scene.scene_id, "labeled": bool(scene.labeled), "boxes": boxes,
            "seeds": seeds}


def scene_from_record(rec, path="<record>", line=None) -> SceneSample:
    boxes, classes, vis = [], [], []
    for b in _field(rec, "boxes", path, line):
        boxes.append(_box(b, path, line))
        classes.append(int(_field(b, "class", path, line)))
        vis.append(b.get("visibility", [1.0] * 6))
    seeds = _field(rec, "seeds", path, line)
    try:
        pts = np.array([s["xyz"] for s in seeds], dtype=float).reshape(-1, 3)
        feats = np.array([s["feature"] for s in seeds], dtype=float)
        if feats.ndim != 2:
            feats = feats.reshape(len(pts), -1)
        cloud = SeedCloud(pts, feats)
    except (KeyError, ValueError, TypeError) as exc:
        raise FileFormatError(path, line, f"invalid seeds: {exc}") from None
    return SceneSample(str(_field(rec, "scene_id", path, line)), tuple(boxes), tuple(classes),
                       cloud, bool(rec.get("labeled", False)),
                       np.array(vis, dtype=float).reshape(len(boxes), 6))


def write_scenes(path, scenes) -> None:
    write_records(path, "scenes", (scene_record(s) for s in scenes))


def read_scenes(path):
    return [scene_from_record(rec, path, n) for n, rec in read_records(path, "scenes")]


# detections

def detection_record(det: Detection) -> dict:
    return {
        "candidate": _floats(det.candidate),
        "yaw": float(det.box.yaw),
        "side_ranges": [[d.range.s_min, d.range.s_max, d.range.n_bins] for d in det.side_dists],
        "side_probs": [_floats(d.probs) for d in det.side_dists],
        "class_scores": _floats(det.class_scores),
        "objectness": float(det.objectness),
        "predicted_iou": float(det.predicted_iou),
        "side_uncertainty": _floats(det.side_uncertainty),
    }


def detection_from_record(rec, path="<record>", line=None) -> Detection:
    try:
        ranges = [SideRange(float(a), float(b), int(n))
                  for a, b, n in _field(rec, "side_ranges", path, line)]
        dists = tuple(SideDistribution(r, p)
                      for r, p in zip(ranges, _field(rec, "side_probs", path, line)))
        if len(dists) != 6:
            raise ValueError("need six side distributions")
        candidate = np.asarray(_field(rec, "candidate", path, line), dtype=float)
        s_hat = [expected_value(d) for d in dists]
        box = box_from_sides(SideDistances(candidate, s_hat, float(_field(rec, "yaw", path, line))))
        return Detection(box, dists, _field(rec, "class_scores", path, line),
                         float(_field(rec, "objectness", path, line)),
                         float(_field(rec, "predicted_iou", path, line)),
                         _field(rec, "side_uncertainty", path, line), candidate)
    except FileFormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise FileFormatError(path, line, f"invalid detection: {exc}") from None


def write_detections(path, per_scene) -> None:
    """``per_scene`` is an iterable of (scene_id, [Detection])."""
    write_records(path, "detections",
                  ({"scene_id": sid, "detections": [detection_record(d) for d in dets]}
                   for sid, dets in per_scene))


def read_detections(path):
    out = []
    for n, rec in read_records(path, "detections"):
        dets = [detection_from_record(d, path, n) for d in _field(rec, "detections", path, n)]
        out.append((str(_field(rec, "scene_id", path, n)), dets))
    return out


# pseudo-labels and predictions

def pseudo_label_record(pl: PseudoLabel) -> dict:
    rec = pl.box.as_dict()
    rec.update({"class": int(pl.class_id), "side_quality": _floats(pl.side_quality),
                "global_quality": float(pl.global_quality), "score": float(pl.score)})
    return rec


def write_pseudo_labels(path, per_scene) -> None:
    write_records(path, "pseudo_labels",
                  ({"scene_id": sid, "pseudo_labels": [pseudo_label_record(p) for p in pls]}
                   for sid, pls in per_scene))


def read_pseudo_labels(path):
    out = []
    for n, rec in read_records(path, "pseudo_labels"):
        pls = []
        for p in _field(rec, "pseudo_labels", path, n):
            pls.append(PseudoLabel(_box(p, path, n), int(_field(p, "class", path, n)),
                                   np.asarray(_field(p, "side_quality", path, n), dtype=float),
                                   float(_field(p, "global_quality", path, n)), None,
                                   float(p.get("score", 1.0))))
        out.append((str(_field(rec, "scene_id", path, n)), pls))
    return out


def prediction_record(pred: ScoredBox) -> dict:
    rec = pred.box.as_dict()
    rec.update({"class": int(pred.class_id), "score": float(pred.score)})
    if pred.side_quality is not None:
        rec["side_quality"] = _floats(pred.side_quality)
    return rec


def write_predictions(path, per_scene) -> None:
    write_records(path, "predictions",
                  ({"scene_id": sid, "predictions": [prediction_record(p) for p in preds]}
                   for sid, preds in per_scene))


def read_predictions(path):
    """Predictions file, or a pseudo-label file read as scored predictions."""
    try:
        records = read_records(path, "predictions")
        key = "predictions"
    except FileFormatError as exc:
        if exc.line != 1:
            raise
        records = read_records(path, "pseudo_labels")
        key = "pseudo_labels"
    out = []
    for n, rec in records:
        preds = []
        for p in _field(rec, key, path, n):
            q = p.get("side_quality")
            score = p.get("score", p.get("global_quality", 1.0))
            preds.append(ScoredBox(_box(p, path, n), int(_field(p, "class", path, n)), float(score),
                                   None if q is None else np.asarray(q, dtype=float)))
        out.append((str(_field(rec, "scene_id", path, n)), preds))
    return out
