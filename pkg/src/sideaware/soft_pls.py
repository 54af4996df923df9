"""Soft pseudo-label selection.

Three stages applied to teacher detections: category-adaptive score
filtering, IoU-guided NMS that keeps the better half of every overlap
cluster, and per-side quality weights derived from side uncertainty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .box_geometry import OrientedBox3, rotated_iou
from .errors import InvalidInputError
from .side_distribution import expected_value

ALPHA2 = 5.0
TAU_OBJ = 0.8
CLS_BOUNDS = (0.7, 0.9)
IOU_BOUNDS = (0.15, 0.25)
NMS_OVERLAP = 0.25


@dataclass(frozen=True, eq=False)
class Detection:
    """A teacher or student prediction.

    ``candidate`` is the point the six side distributions are measured from;
    ``box`` is consistent with their expectations.
    """

    box: OrientedBox3
    side_dists: tuple
    class_scores: np.ndarray
    objectness: float
    predicted_iou: float
    side_uncertainty: np.ndarray
    candidate: np.ndarray = None

    def __post_init__(self):
        scores = np.asarray(self.class_scores, dtype=float).ravel()
        if abs(scores.sum() - 1.0) > 1e-6 or np.any(scores < 0):
            raise InvalidInputError(f"class scores must form a distribution, got {scores}")
        object.__setattr__(self, "class_scores", scores)
        u = np.asarray(self.side_uncertainty, dtype=float).ravel()
        if u.shape != (6,):
            raise InvalidInputError("need six side uncertainties")
        object.__setattr__(self, "side_uncertainty", u)
        if len(self.side_dists) != 6:
            raise InvalidInputError("need six side distributions")
        object.__setattr__(self, "side_dists", tuple(self.side_dists))
        if self.candidate is not None:
            object.__setattr__(self, "candidate", np.asarray(self.candidate, dtype=float))

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_scores))

    @property
    def class_score(self) -> float:
        return float(self.class_scores[self.class_id])

    def side_values(self) -> np.ndarray:
        return np.array([expected_value(d) for d in self.side_dists])


@dataclass(frozen=True, eq=False)
class PseudoLabel:
    box: OrientedBox3
    class_id: int
    side_quality: np.ndarray
    global_quality: float
    candidate: np.ndarray = None
    score: float = 1.0


@dataclass
class CategoryThresholdState:
    """Per-class counters of confident predictions since the last reset."""

    n_classes: int
    counts: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.n_classes, dtype=np.int64)
        self.counts = np.array(self.counts, dtype=np.int64)
        if self.counts.shape != (self.n_classes,) or np.any(self.counts < 0):
            raise InvalidInputError("counts must be n_classes non-negative integers")

    def copy(self) -> "CategoryThresholdState":
        return CategoryThresholdState(self.n_classes, self.counts.copy(), self.t)

    def gamma(self, c: int) -> float:
        top = self.counts.max()
        if top <= 0:
            return 0.0
        return float(self.counts[c] / top)

    def reset(self) -> "CategoryThresholdState":
        return CategoryThresholdState(self.n_classes, None, self.t)


def update_category_state(state: CategoryThresholdState, confident_classes) -> CategoryThresholdState:
    out = state.copy()
    for c in confident_classes:
        out.counts[int(c)] += 1
    out.t += 1
    return out


def adaptive_threshold(state: CategoryThresholdState, c: int, tau_min: float, tau_max: float) -> float:
    if tau_min > tau_max:
        raise InvalidInputError(f"tau_min {tau_min} > tau_max {tau_max}")
    return tau_min + (tau_max - tau_min) * state.gamma(c)


@dataclass(frozen=True)
class SelectionConfig:
    tau_obj: float = TAU_OBJ
    cls_bounds: tuple = CLS_BOUNDS
    iou_bounds: tuple = IOU_BOUNDS
    adaptive: bool = True
    # per-class IoU thresholds for fixed mode; classes not listed use iou_bounds[0]
    fixed_iou: dict = field(default_factory=dict)
    nms_overlap: float = NMS_OVERLAP
    alpha2: float = ALPHA2
    side_aware: bool = True


def class_thresholds(state, c, cfg: SelectionConfig):
    """(tau_cls, tau_iou) for class ``c``."""
    if cfg.adaptive:
        return (adaptive_threshold(state, c, *cfg.cls_bounds),
                adaptive_threshold(state, c, *cfg.iou_bounds))
    return cfg.cls_bounds[0], cfg.fixed_iou.get(c, cfg.iou_bounds[0])


def category_filter(detections, state, tau_obj=TAU_OBJ, cls_bounds=CLS_BOUNDS,
                    iou_bounds=IOU_BOUNDS, config: SelectionConfig = None):
    """Keep detections passing objectness, class-score and predicted-IoU thresholds.

    Comparisons keep equality. Order is preserved.
    """
    if config is None:
        config = SelectionConfig(tau_obj=tau_obj, cls_bounds=tuple(cls_bounds),
                                 iou_bounds=tuple(iou_bounds))
    kept = []
    for det in detections:
        tau_cls, tau_iou = class_thresholds(state, det.class_id, config)
        if (det.objectness >= config.tau_obj and det.class_score >= tau_cls
                and det.predicted_iou >= tau_iou):
            kept.append(det)
    return kept


def overlap_clusters(detections, overlap_threshold: float):
    """Connected components of the same-class ``IoU >= threshold`` graph."""
    n = len(detections)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if detections[i].class_id != detections[j].class_id:
                continue
            if find(i) == find(j):
                continue
            if rotated_iou(detections[i].box, detections[j].box) >= overlap_threshold:
                parent[find(j)] = find(i)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def iou_guided_nms_low_half(detections, overlap_threshold: float = NMS_OVERLAP):
    """Within each overlap cluster keep the ceil(n/2) members with highest predicted IoU.

    Ties break by objectness, then input order. Survivors keep input order.
    """
    if not 0.0 < overlap_threshold < 1.0:
        raise InvalidInputError(f"overlap_threshold must be in (0, 1), got {overlap_threshold}")
    keep = set()
    for group in overlap_clusters(detections, overlap_threshold):
        ranked = sorted(group, key=lambda i: (-detections[i].predicted_iou,
                                              -detections[i].objectness, i))
        keep.update(ranked[:math.ceil(len(group) / 2)])
    return [d for i, d in enumerate(detections) if i in keep]


def quality_scores(u, alpha2: float = ALPHA2):
    """q_s = exp(-alpha2 * u_s) per side and their mean q_B."""
    q = np.exp(-alpha2 * np.asarray(u, dtype=float))
    return q, float(q.mean())


def to_pseudo_label(det: Detection, alpha2: float = ALPHA2, side_aware: bool = True) -> PseudoLabel:
    if side_aware:
        q, q_b = quality_scores(det.side_uncertainty, alpha2)
    else:
        q, q_b = np.ones(6), 1.0
    return PseudoLabel(det.box, det.class_id, q, q_b, det.candidate,
                       det.objectness * det.class_score)


def select_pseudo_labels(teacher_detections, state: CategoryThresholdState,
                         config: SelectionConfig = SelectionConfig()):
    """Filter, suppress and weight teacher detections.

    The category state is updated from the filter survivors (before NMS).
    Returns ``(pseudo_labels, new_state)``.
    """
    survivors = category_filter(teacher_detections, state, config=config)
    new_state = update_category_state(state, [d.class_id for d in survivors])
    kept = iou_guided_nms_low_half(survivors, config.nms_overlap)
    labels = [to_pseudo_label(d, config.alpha2, config.side_aware) for d in kept]
    return labels, new_state


def with_uncertainty(det: Detection, u) -> Detection:
    return replace(det, side_uncertainty=np.asarray(u, dtype=float))
