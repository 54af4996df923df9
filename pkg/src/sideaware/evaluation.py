"""Detection matching, average precision and per-side error statistics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .box_geometry import SIDES, OrientedBox3, rotated_iou

SIDE_ERROR_THRESHOLD = 0.1
SIDE_MATCH_IOU = 0.25
IOU_THRESHOLDS = (0.25, 0.5)

AP_COLUMNS = ("class", "iou_threshold", "ap", "num_gt", "num_pred", "num_tp")


@dataclass(frozen=True, eq=False)
class ScoredBox:
    box: OrientedBox3
    class_id: int
    score: float = 1.0
    side_quality: np.ndarray = None


def match_detections(preds, gts, iou_threshold: float):
    """Greedy matching of ``preds`` (ScoredBox) to ``gts`` ((box, class) or ScoredBox).

    Predictions are visited by descending score (stable); each claims the
    highest-IoU unmatched ground truth of its class with IoU >= threshold.
    Returns a list with one entry per prediction: matched GT index or None.
    """
    gts = [_as_scored(g) for g in gts]
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    result = [None] * len(preds)
    for i in order:
        best, best_iou = None, iou_threshold
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != preds[i].class_id:
                continue
            iou = rotated_iou(preds[i].box, g.box)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = j, iou
        if best is not None:
            taken[best] = True
            result[i] = best
    return result


def _as_scored(g):
    if isinstance(g, ScoredBox):
        return g
    box, cls = g
    return ScoredBox(box, int(cls))


def all_point_ap(tp_flags, scores, num_gt: int) -> float:
    """Area under the precision envelope, all recall points."""
    if num_gt == 0 or len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    tp = np.asarray(tp_flags, dtype=float)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class ApResult:
    # ap[threshold][class_id]
    ap: dict
    num_gt: dict
    num_pred: dict
    num_tp: dict = field(default_factory=dict)

    def map(self, threshold: float) -> float:
        """Mean over classes that have at least one ground truth."""
        present = [c for c, n in self.num_gt.items() if n > 0]
        if not present:
            return 0.0
        return float(np.mean([self.ap[threshold][c] for c in present]))

    @property
    def thresholds(self):
        return sorted(self.ap)

    def rows(self):
        out = []
        for t in self.thresholds:
            for c in sorted(self.ap[t]):
                out.append({"class": str(c), "iou_threshold": f"{t:.2f}",
                            "ap": f"{self.ap[t][c]:.6f}", "num_gt": self.num_gt.get(c, 0),
                            "num_pred": self.num_pred.get(c, 0),
                            "num_tp": self.num_tp.get(t, {}).get(c, 0)})
            out.append({"class": "mAP", "iou_threshold": f"{t:.2f}",
                        "ap": f"{self.map(t):.6f}", "num_gt": sum(self.num_gt.values()),
                        "num_pred": sum(self.num_pred.values()),
                        "num_tp": sum(self.num_tp.get(t, {}).values())})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=AP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def summary(self) -> dict:
        return {f"mAP@{t:.2f}": round(self.map(t), 6) for t in self.thresholds}


def average_precision(preds_per_scene, gts_per_scene, iou_thresholds=IOU_THRESHOLDS,
                      classes=None) -> ApResult:
    """Per-class AP over a set of scenes.

    ``preds_per_scene`` is a list (one per scene) of ScoredBox lists and
    ``gts_per_scene`` the matching list of (box, class) lists.
    """
    if isinstance(iou_thresholds, (int, float)):
        iou_thresholds = (float(iou_thresholds),)
    gts_per_scene = [[_as_scored(g) for g in gts] for gts in gts_per_scene]
    if classes is None:
        classes = sorted({g.class_id for gts in gts_per_scene for g in gts}
                         | {p.class_id for ps in preds_per_scene for p in ps})
    num_gt = {c: sum(g.class_id == c for gts in gts_per_scene for g in gts) for c in classes}
    num_pred = {c: sum(p.class_id == c for ps in preds_per_scene for p in ps) for c in classes}
    ap, num_tp = {}, {}
    for t in iou_thresholds:
        ap[t], num_tp[t] = {}, {}
        for c in classes:
            flags, scores = [], []
            for preds, gts in zip(preds_per_scene, gts_per_scene):
                cp = [p for p in preds if p.class_id == c]
                cg = [g for g in gts if g.class_id == c]
                for p, m in zip(cp, match_detections(cp, cg, t)):
                    flags.append(m is not None)
                    scores.append(p.score)
            ap[t][c] = all_point_ap(flags, scores, num_gt[c])
            num_tp[t][c] = int(sum(flags))
    return ApResult(ap, num_gt, num_pred, num_tp)


def face_errors(pred: OrientedBox3, gt: OrientedBox3) -> np.ndarray:
    """Per-side distance between corresponding faces along the GT face normal."""
    return np.array([abs(float(np.dot(gt.face_normal(s), pred.face_center(s) - gt.face_center(s))))
                     for s in SIDES])


@dataclass
class SideQualityReport:
    good_side_count: int = 0
    bad_side_count: int = 0
    matched: int = 0
    gt_total: int = 0
    gt_covered: int = 0
    weighted_error_sum: float = 0.0
    weight_sum: float = 0.0
    error_sum: float = 0.0
    per_class: dict = field(default_factory=dict)

    @property
    def recall(self) -> float:
        return self.gt_covered / self.gt_total if self.gt_total else 0.0

    @property
    def weighted_mean_side_error(self) -> float:
        return self.weighted_error_sum / self.weight_sum if self.weight_sum > 0 else 0.0

    @property
    def unweighted_mean_side_error(self) -> float:
        n = 6 * self.matched
        return self.error_sum / n if n else 0.0

    def merge(self, other: "SideQualityReport") -> "SideQualityReport":
        per_class = {c: dict(v) for c, v in self.per_class.items()}
        for c, v in other.per_class.items():
            slot = per_class.setdefault(c, {"good": 0, "bad": 0, "gt": 0, "covered": 0})
            for k in slot:
                slot[k] += v[k]
        return SideQualityReport(
            self.good_side_count + other.good_side_count,
            self.bad_side_count + other.bad_side_count,
            self.matched + other.matched,
            self.gt_total + other.gt_total,
            self.gt_covered + other.gt_covered,
            self.weighted_error_sum + other.weighted_error_sum,
            self.weight_sum + other.weight_sum,
            self.error_sum + other.error_sum,
            per_class)

    def summary(self) -> dict:
        return {
            "good_side_count": self.good_side_count,
            "bad_side_count": self.bad_side_count,
            "matched_pseudo_labels": self.matched,
            "recall": round(self.recall, 6),
            "weighted_mean_side_error": round(self.weighted_mean_side_error, 6),
            "unweighted_mean_side_error": round(self.unweighted_mean_side_error, 6),
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
        }


def side_error_stats(pseudo_labels, gts, iou_match_threshold: float = SIDE_MATCH_IOU,
                     side_error_threshold: float = SIDE_ERROR_THRESHOLD) -> SideQualityReport:
    """Side-quality statistics for one scene.

    Every pseudo-label (anything with ``box``, ``class_id`` and optional
    ``side_quality``) is attributed to its highest-IoU same-class GT when that
    IoU reaches the threshold; several pseudo-labels may share a GT. Recall
    counts GTs covered by at least one pseudo-label.
    """
    gts = [_as_scored(g) for g in gts]
    rep = SideQualityReport(gt_total=len(gts))
    covered = [False] * len(gts)
    for g in gts:
        rep.per_class.setdefault(g.class_id, {"good": 0, "bad": 0, "gt": 0, "covered": 0})["gt"] += 1
    for pl in pseudo_labels:
        best, best_iou = None, iou_match_threshold
        for j, g in enumerate(gts):
            if g.class_id != pl.class_id:
                continue
            iou = rotated_iou(pl.box, g.box)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = j, iou
        if best is None:
            continue
        covered[best] = True
        err = face_errors(pl.box, gts[best].box)
        q = getattr(pl, "side_quality", None)
        q = np.ones(6) if q is None else np.asarray(q, dtype=float)
        good = int(np.sum(err < side_error_threshold))
        rep.good_side_count += good
        rep.bad_side_count += 6 - good
        rep.matched += 1
        rep.error_sum += float(err.sum())
        rep.weighted_error_sum += float(np.dot(q, err))
        rep.weight_sum += float(q.sum())
        slot = rep.per_class.setdefault(pl.class_id, {"good": 0, "bad": 0, "gt": 0, "covered": 0})
        slot["good"] += good
        slot["bad"] += 6 - good
    rep.gt_covered = int(sum(covered))
    for j, g in enumerate(gts):
        if covered[j]:
            rep.per_class[g.class_id]["covered"] += 1
    return rep
