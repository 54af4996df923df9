"""Desk-scale semi-supervised simulation.

Scenes are sets of non-overlapping boxes on a floor with seed points sampled
on their faces. A parametric noise model stands in for a trained detector:
each side's distance distribution is centered on the true distance plus an
injected error, and its spread grows with the size of that error (so the
distribution shape carries the signal a real detector head would have).
Seed features carry each face's visibility, which scales the random error.

The trainable student is the uncertainty head plus a per-class, per-side
bias correction applied to raw proposals that carry a systematic bias.
Teacher boxes come from the noise model directly; the teacher's EMA weights
supply its side uncertainties.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .box_geometry import (SIDES, OrientedBox3, SideDistances, box_from_sides, rotated_iou,
                           signed_side_distances, yaw_matrix)
from .errors import DivergenceError, InvalidInputError, SceneGenerationError
from .evaluation import ScoredBox, average_precision
from .losses import box_loss, box_loss_side_grad, total_ssl_loss
from .side_distribution import (DEFAULT_TOPK, distribution_features, expected_value, indoor_ranges,
                                shift_distribution, synthetic_distribution)
from .soft_pls import (CategoryThresholdState, Detection, SelectionConfig, select_pseudo_labels)
from .uncertainty import (ALPHA1, DEFAULT_GRID, DEFAULT_KNN, PARAM_NAMES, SeedCloud,
                          UncertaintyModel, UncertaintyTrainingSample, fit_input_normalization,
                          forward_batch, generate_side_points, interpolate_features,
                          loss_and_gradients, uncertainty_label)

log = logging.getLogger(__name__)

# Typical (length, width, height) per class, meters.
CLASS_SIZES = (
    (1.4, 0.8, 0.75),   # table
    (0.55, 0.55, 0.9),  # chair
    (1.0, 0.5, 1.6),    # cabinet
    (2.0, 1.5, 0.6),    # bed
    (1.9, 0.9, 0.8),    # sofa
    (0.9, 0.35, 1.8),   # bookshelf
    (0.7, 0.45, 0.75),  # toilet
    (0.5, 0.5, 0.5),    # bin
)


@dataclass(frozen=True)
class SceneConfig:
    n_boxes: tuple = (2, 5)
    n_classes: int = 8
    # relative class frequencies; 0.6**c (long tail) when empty
    class_weights: tuple = ()
    size_jitter: float = 0.2
    arena: float = 8.0
    max_pair_iou: float = 0.0
    clutter_points: int = 30
    seed_channels: int = 8
    face_points: tuple = (2, 12)
    visibility: tuple = (0.1, 1.0)
    max_retries: int = 500

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(CLASS_SIZES):
            raise InvalidInputError(f"n_classes must be in [1, {len(CLASS_SIZES)}]")
        if self.n_boxes[0] < 0 or self.n_boxes[0] > self.n_boxes[1]:
            raise InvalidInputError(f"bad n_boxes range {self.n_boxes}")
        if self.seed_channels < 3:
            raise InvalidInputError("seed_channels must be >= 3")

    def weights(self) -> np.ndarray:
        w = np.asarray(self.class_weights or [0.6 ** c for c in range(self.n_classes)], dtype=float)
        if w.shape != (self.n_classes,) or np.any(w < 0) or w.sum() <= 0:
            raise InvalidInputError("class_weights must be n_classes non-negative values")
        return w / w.sum()


@dataclass(frozen=True, eq=False)
class SceneSample:
    scene_id: str
    boxes: tuple
    classes: tuple
    seeds: SeedCloud
    labeled: bool = True
    # per-box face visibility in [0, 1], SideId order
    visibility: np.ndarray = None

    def __post_init__(self):
        if len(self.boxes) != len(self.classes):
            raise InvalidInputError("boxes and classes differ in length")
        vis = (np.ones((len(self.boxes), 6)) if self.visibility is None
               else np.asarray(self.visibility, dtype=float).reshape(len(self.boxes), 6))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        object.__setattr__(self, "visibility", vis)

    @property
    def ground_truth(self):
        return list(zip(self.boxes, self.classes))


@dataclass(frozen=True)
class RigidTransform:
    """World yaw rotation about +z followed by a translation."""

    yaw: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)

    def apply_points(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ yaw_matrix(self.yaw).T + np.asarray(self.translation)

    def apply_box(self, box: OrientedBox3) -> OrientedBox3:
        return box.transformed(self.yaw, self.translation)

    def inverse(self) -> "RigidTransform":
        t = -(yaw_matrix(-self.yaw) @ np.asarray(self.translation, dtype=float))
        return RigidTransform(-self.yaw, tuple(float(v) for v in t))

    def then(self, other: "RigidTransform") -> "RigidTransform":
        """The transform applying ``self`` first, then ``other``."""
        t = yaw_matrix(other.yaw) @ np.asarray(self.translation) + np.asarray(other.translation)
        return RigidTransform(self.yaw + other.yaw, tuple(float(v) for v in t))

    def apply_scene(self, scene: SceneSample) -> SceneSample:
        seeds = SeedCloud(self.apply_points(scene.seeds.points), scene.seeds.features)
        return replace(scene, boxes=tuple(self.apply_box(b) for b in scene.boxes), seeds=seeds)


def random_augmentation(rng, max_yaw=math.pi, max_shift=0.5) -> RigidTransform:
    yaw = rng.uniform(-max_yaw, max_yaw)
    shift = rng.uniform(-max_shift, max_shift, size=2)
    return RigidTransform(float(yaw), (float(shift[0]), float(shift[1]), 0.0))


def _face_seeds(box, side, count, vis, rng, channels):
    others = [a for a in range(3) if a != side.axis]
    local = np.zeros((count, 3))
    local[:, side.axis] = side.sign * box.size[side.axis] / 2.0
    local[:, side.axis] += side.sign * np.clip(rng.normal(0.0, 0.01, count), -0.03, 0.03)
    for a in others:
        local[:, a] = rng.uniform(-0.5, 0.5, count) * box.size[a]
    feats = np.empty((count, channels))
    feats[:, 0] = vis + rng.normal(0.0, 0.05, count)
    feats[:, 1] = 1.0
    feats[:, 2] = side.local_normal[2]
    feats[:, 3:] = rng.normal(0.0, 0.5, (count, channels - 3))
    return box.to_world(local), feats


def generate_scene(config: SceneConfig, rng, scene_id="scene", labeled=True) -> SceneSample:
    n_target = int(rng.integers(config.n_boxes[0], config.n_boxes[1] + 1))
    weights = config.weights()
    half_arena = config.arena / 2.0
    boxes, classes = [], []
    tries = 0
    while len(boxes) < n_target:
        tries += 1
        if tries > config.max_retries:
            raise SceneGenerationError(
                f"placed {len(boxes)} of {n_target} boxes after {config.max_retries} tries")
        cls = int(rng.choice(config.n_classes, p=weights))
        size = np.asarray(CLASS_SIZES[cls]) * rng.uniform(1 - config.size_jitter,
                                                          1 + config.size_jitter, 3)
        margin = 0.5 * float(np.hypot(size[0], size[1]))
        if margin >= half_arena:
            continue
        xy = rng.uniform(-half_arena + margin, half_arena - margin, 2)
        box = OrientedBox3([xy[0], xy[1], size[2] / 2.0], size, rng.uniform(-math.pi, math.pi))
        if any(rotated_iou(box, other) > config.max_pair_iou for other in boxes):
            continue
        boxes.append(box)
        classes.append(cls)

    vis = rng.uniform(config.visibility[0], config.visibility[1], (len(boxes), 6))
    pts, feats = [], []
    lo, hi = config.face_points
    for i, box in enumerate(boxes):
        for side in SIDES:
            count = lo + int(round(vis[i, side] * (hi - lo)))
            p, f = _face_seeds(box, side, count, vis[i, side], rng, config.seed_channels)
            pts.append(p)
            feats.append(f)
    n_clutter = config.clutter_points
    cp = np.column_stack([rng.uniform(-half_arena, half_arena, (n_clutter, 2)),
                          rng.uniform(0.0, 2.0, n_clutter)])
    cf = np.empty((n_clutter, config.seed_channels))
    cf[:, 0] = rng.uniform(0.0, 0.3, n_clutter)
    cf[:, 1] = 1.0
    cf[:, 2] = 0.0
    cf[:, 3:] = rng.normal(0.0, 0.5, (n_clutter, config.seed_channels - 3))
    pts.append(cp)
    feats.append(cf)
    seeds = SeedCloud(np.concatenate(pts), np.concatenate(feats))
    return SceneSample(scene_id, tuple(boxes), tuple(classes), seeds, labeled, vis)


def generate_scenes(config: SceneConfig, seed, count: int, prefix="scene", labeled=True):
    """``count`` scenes, each from its own child stream of ``seed`` (int or int sequence)."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [generate_scene(config, np.random.default_rng(ss), f"{prefix}-{i:05d}", labeled)
            for i, ss in enumerate(children)]


def generate_splits(config: SceneConfig, seed: int, n_train: int, labeled_fraction: float,
                    n_val: int, copy_labeled=False):
    """Labeled, unlabeled and validation scenes for one run.

    The first ``round(labeled_fraction * n_train)`` training scenes (at least
    one) are labeled. With ``copy_labeled`` every training scene is labeled
    and also reused, unflagged, as unlabeled data.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise InvalidInputError("labeled_fraction must lie in (0, 1]")
    train = generate_scenes(config, [int(seed), 101], n_train, prefix="train")
    n_lab = max(1, int(round(labeled_fraction * n_train)))
    if copy_labeled:
        labeled = [replace(s, labeled=True) for s in train]
        unlabeled = [replace(s, labeled=False) for s in train]
    else:
        labeled = [replace(s, labeled=True) for s in train[:n_lab]]
        unlabeled = [replace(s, labeled=False) for s in train[n_lab:]]
    val = generate_scenes(config, [int(seed), 102], n_val, prefix="val")
    return labeled, unlabeled, val


@dataclass(frozen=True)
class NoiseModel:
    """Error profile of a simulated detector (distances in meters)."""

    side_std: float = 0.02
    occlusion_std: float = 0.04
    # scalar or six per-side probabilities
    corruption_prob: object = 0.0
    corruption_range: tuple = (0.25, 0.5)
    corruption_sign: str = "outward"
    # systematic error per (class, side): bias_offset + U(-systematic_bias, systematic_bias),
    # both as fractions of the class's nominal half-extent along that side
    systematic_bias: float = 0.0
    bias_offset: float = 0.0
    # persistent per-object error (std, same units as the bias): the same object
    # gets the same offsets on every call, whatever the augmentation
    instance_bias: float = 0.0
    candidate_jitter: float = 0.25
    yaw_std: float = 0.0
    peak_width: float = 0.06
    width_per_error: float = 0.8
    logit_noise: float = 0.2
    objectness: tuple = (0.93, 0.04)
    class_score: tuple = (0.9, 0.05)
    iou_noise: float = 0.03
    duplicate_rate: float = 0.5
    spurious_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        probs = np.broadcast_to(np.asarray(self.corruption_prob, dtype=float), (6,))
        if np.any(probs < 0) or np.any(probs > 1):
            raise InvalidInputError("corruption probabilities must lie in [0, 1]")
        for name in ("side_std", "occlusion_std", "yaw_std", "logit_noise", "iou_noise",
                     "systematic_bias", "instance_bias", "duplicate_rate", "spurious_rate"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if not 0.0 <= self.duplicate_rate <= 1.0:
            raise InvalidInputError("duplicate_rate must lie in [0, 1]")
        if self.corruption_sign not in ("outward", "inward", "random"):
            raise InvalidInputError(f"unknown corruption_sign {self.corruption_sign!r}")

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        return cls(side_std=0.0, occlusion_std=0.0, corruption_prob=0.0, candidate_jitter=0.0,
                   logit_noise=0.0, iou_noise=0.0, duplicate_rate=0.0, spurious_rate=0.0,
                   objectness=(1.0, 0.0), class_score=(1.0, 0.0))

    @property
    def corruption_probs(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.corruption_prob, dtype=float), (6,)).copy()

    def bias_table(self, n_classes: int) -> np.ndarray:
        """Systematic per-class, per-side error (n_classes, 6), fixed by ``seed``.

        Entries are ``bias_offset + U(-systematic_bias, systematic_bias)``
        times the class's nominal half-extent along that side's axis. With
        the default size and candidate jitter, a fraction above -0.6 never
        pushes a face through the candidate point.
        """
        if self.systematic_bias == 0 and self.bias_offset == 0:
            return np.zeros((n_classes, 6))
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x5eed]))
        frac = self.bias_offset + rng.uniform(-self.systematic_bias, self.systematic_bias,
                                              (len(CLASS_SIZES), 6))
        half = np.array([[size[s.axis] / 2.0 for s in SIDES] for size in CLASS_SIZES])
        return (frac * half)[:n_classes]

    def instance_offsets(self, scene) -> np.ndarray:
        """Per-object, per-side offsets (n_boxes, 6), keyed on scene id, index and size."""
        out = np.zeros((len(scene.boxes), 6))
        if self.instance_bias == 0:
            return out
        for i, box in enumerate(scene.boxes):
            key = f"{scene.scene_id}/{i}/{np.round(box.size, 6).tolist()}".encode()
            rng = np.random.default_rng([self.seed, zlib.crc32(key), 0x1d])
            half = np.array([box.size[s.axis] / 2.0 for s in SIDES])
            out[i] = rng.normal(0.0, self.instance_bias, 6) * half
        return out


@dataclass(frozen=True)
class HeadSettings:
    alpha1: float = ALPHA1
    topk: int = DEFAULT_TOPK
    grid: int = DEFAULT_GRID
    k_nn: int = DEFAULT_KNN


@dataclass(frozen=True, eq=False)
class SimDetection:
    """A Detection plus simulation bookkeeping (source GT, true side distances)."""

    detection: Detection
    source: int
    true_sides: np.ndarray
    # sides hit by the corruption noise (all False for spurious detections)
    corrupted: np.ndarray = None


def _class_scores(cls, n_classes, score, rng):
    if n_classes == 1:
        return np.ones(1)
    rest = rng.dirichlet(np.ones(n_classes - 1)) * (1.0 - score)
    out = np.insert(rest, cls, score)
    return out / out.sum()


def _clip01(x):
    return float(min(1.0, max(0.0, x)))


def simulate_detections(scene: SceneSample, noise: NoiseModel, rng, ranges=None,
                        n_classes=None, alpha1=ALPHA1):
    """Raw simulated detections with oracle uncertainties; returns SimDetection list."""
    ranges = ranges or indoor_ranges()
    n_classes = n_classes or (max(scene.classes, default=0) + 1)
    bias = noise.bias_table(max(n_classes, max(scene.classes, default=0) + 1))
    offsets = noise.instance_offsets(scene)
    probs = noise.corruption_probs
    lo_c, hi_c = noise.corruption_range
    out = []
    for i, (gt, cls) in enumerate(zip(scene.boxes, scene.classes)):
        copies = 1 + int(rng.random() < noise.duplicate_rate)
        for _ in range(copies):
            jitter = noise.candidate_jitter * rng.uniform(-1.0, 1.0, 3) * gt.size / 2.0
            candidate = gt.center + gt.rotation @ jitter
            y = signed_side_distances(candidate, gt)
            dists, s_hat = [], np.empty(6)
            hit = np.zeros(6, dtype=bool)
            for s in SIDES:
                r = ranges[s]
                std = noise.side_std + noise.occlusion_std * (1.0 - scene.visibility[i, s])
                err = rng.normal(0.0, std) if std > 0 else 0.0
                if rng.random() < probs[s]:
                    sign = {"outward": 1.0, "inward": -1.0}.get(noise.corruption_sign)
                    if sign is None:
                        sign = 1.0 if rng.random() < 0.5 else -1.0
                    err = sign * rng.uniform(lo_c, hi_c)
                    hit[s] = True
                err += bias[cls, s] + offsets[i, s]
                target = min(max(y[s] + err, r.s_min), r.s_max)
                width = noise.peak_width + noise.width_per_error * abs(target - y[s])
                d = synthetic_distribution(target, 1.0 / (2.0 * width ** 2), 0.0, r, rng,
                                           noise.logit_noise)
                d = shift_distribution(d, target - expected_value(d))
                dists.append(d)
                s_hat[s] = expected_value(d)
            yaw = gt.yaw + (rng.normal(0.0, noise.yaw_std) if noise.yaw_std > 0 else 0.0)
            box = box_from_sides(SideDistances(candidate, s_hat, yaw))
            pred_iou = _clip01(rotated_iou(box, gt) + (rng.normal(0.0, noise.iou_noise)
                                                       if noise.iou_noise > 0 else 0.0))
            obj = _clip01(rng.normal(*noise.objectness)) if noise.objectness[1] > 0 else noise.objectness[0]
            score = _clip01(rng.normal(*noise.class_score)) if noise.class_score[1] > 0 else noise.class_score[0]
            score = max(score, 1.0 / n_classes + 1e-6)
            det = Detection(box, tuple(dists), _class_scores(cls, n_classes, score, rng), obj,
                            pred_iou, uncertainty_label(y, s_hat, alpha1), candidate)
            out.append(SimDetection(det, i, y, hit))
    n_spurious = int(rng.poisson(noise.spurious_rate)) if noise.spurious_rate > 0 else 0
    for _ in range(n_spurious):
        out.append(SimDetection(_spurious(scene, ranges, n_classes, rng), -1, None, np.zeros(6, dtype=bool)))
    return out


def _spurious(scene, ranges, n_classes, rng):
    cls = int(rng.integers(n_classes))
    size = np.asarray(CLASS_SIZES[cls]) * rng.uniform(0.6, 1.2, 3)
    pts = scene.seeds.points
    anchor = pts[rng.integers(len(pts))] if len(pts) else np.zeros(3)
    candidate = np.array([anchor[0], anchor[1], size[2] / 2.0])
    dists, s_hat = [], np.empty(6)
    for s in SIDES:
        r = ranges[s]
        target = min(max(size[s.axis] / 2.0, r.s_min + r.bin_width), r.s_max)
        d = synthetic_distribution(target, 1.0 / (2.0 * 0.4 ** 2), 0.0, r, rng, 0.3)
        d = shift_distribution(d, target - expected_value(d))
        dists.append(d)
        s_hat[s] = expected_value(d)
    box = box_from_sides(SideDistances(candidate, s_hat, rng.uniform(-math.pi, math.pi)))
    score = rng.uniform(0.5, 0.95)
    return Detection(box, tuple(dists), _class_scores(cls, n_classes, max(score, 1.0 / n_classes + 1e-6), rng),
                     float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.0, 0.4)), np.ones(6), candidate)


def side_samples(model_or_none, detections, seeds: SeedCloud, head: HeadSettings):
    """Per-side SoI point features (n, 6, G*G, C) and F_dist (n, 6, N + 2)."""
    pts, fd = [], []
    for det in detections:
        for s in SIDES:
            pts.append(generate_side_points(det.box, s, head.grid).points)
            fd.append(distribution_features(det.side_dists[s], head.topk))
    n = len(detections)
    if n == 0:
        return np.zeros((0, 6, head.grid ** 2, seeds.channels)), np.zeros((0, 6, 0))
    # one k-NN query for every side point of every detection
    pf = interpolate_features(np.concatenate(pts), seeds, head.k_nn)
    pf = pf.reshape(n, 6, head.grid ** 2, seeds.channels)
    fd = np.stack(fd).reshape(n, 6, -1)
    return pf, fd


def predict_side_uncertainty(model: UncertaintyModel, detections, seeds, head: HeadSettings):
    if not detections:
        return np.zeros((0, 6))
    pf, fd = side_samples(model, detections, seeds, head)
    n = len(detections)
    u, _ = forward_batch(model, pf.reshape(n * 6, *pf.shape[2:]), fd.reshape(n * 6, -1))
    return u.reshape(n, 6)


def teacher_predict(scene: SceneSample, noise: NoiseModel, rng, ranges=None, n_classes=None,
                    model: UncertaintyModel = None, head: HeadSettings = HeadSettings()):
    """Simulated teacher detections.

    Side uncertainties are the oracle labels against ground truth when
    ``model`` is None, otherwise the model's predictions.
    """
    sims = simulate_detections(scene, noise, rng, ranges, n_classes, head.alpha1)
    dets = [s.detection for s in sims]
    if model is not None and dets:
        u = predict_side_uncertainty(model, dets, scene.seeds, head)
        dets = [replace(d, side_uncertainty=u[i]) for i, d in enumerate(dets)]
    return dets


def training_samples(scene: SceneSample, noise: NoiseModel, rng, ranges=None, n_classes=None,
                     head: HeadSettings = HeadSettings()):
    """Uncertainty-head samples from simulated detections matched to their GT."""
    sims = [s for s in simulate_detections(scene, noise, rng, ranges, n_classes, head.alpha1)
            if s.source >= 0]
    if not sims:
        return []
    pf, fd = side_samples(None, [s.detection for s in sims], scene.seeds, head)
    out = []
    for i, s in enumerate(sims):
        for side in SIDES:
            out.append(UncertaintyTrainingSample(pf[i, side], fd[i, side],
                                                 float(s.detection.side_uncertainty[side])))
    return out


@dataclass(eq=False)
class StudentModel:
    head: UncertaintyModel
    side_bias: np.ndarray

    def copy(self) -> "StudentModel":
        return StudentModel(self.head.copy(), self.side_bias.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.head.flat(), self.side_bias.ravel()])

    def with_flat(self, vector) -> "StudentModel":
        vector = np.asarray(vector, dtype=float)
        k = self.head.n_params
        return StudentModel(self.head.with_flat(vector[:k]),
                            vector[k:].reshape(self.side_bias.shape).copy())

    def tensors(self) -> dict:
        out = dict(self.head.tensors())
        out["side_bias"] = self.side_bias
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "StudentModel":
        head = UncertaintyModel(**{k: v for k, v in tensors.items() if k != "side_bias"})
        return cls(head, np.asarray(tensors["side_bias"], dtype=float))


def student_predict(scene: SceneSample, student: StudentModel, noise: NoiseModel, rng,
                    ranges=None, n_classes=None, head: HeadSettings = HeadSettings()):
    """Raw proposals with the student's bias correction applied to every side."""
    sims = simulate_detections(scene, noise, rng, ranges, n_classes, head.alpha1)
    out = []
    for s in sims:
        det = s.detection
        c = det.class_id
        dists = tuple(shift_distribution(d, -student.side_bias[c, k])
                      for k, d in enumerate(det.side_dists))
        s_hat = np.array([expected_value(d) for d in dists])
        box = box_from_sides(SideDistances(det.candidate, s_hat, det.box.yaw))
        out.append(replace(det, box=box, side_dists=dists))
    return out


@dataclass(frozen=True)
class EmaState:
    teacher: np.ndarray
    student: np.ndarray
    momentum: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0 + 1e-15:
            raise InvalidInputError(f"momentum must be in [0, 1], got {self.momentum}")


def ema_update(state: EmaState) -> EmaState:
    t = np.asarray(state.teacher, dtype=float)
    s = np.asarray(state.student, dtype=float)
    if t.shape != s.shape:
        raise InvalidInputError(f"teacher/student parameter shapes differ: {t.shape} vs {s.shape}")
    m = state.momentum
    return EmaState(m * t + (1.0 - m) * s, s, m)


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 150
    head_lr: float = 0.5
    head_batch: int = 128
    head_samples: int = 0  # 0 keeps every generated sample
    bias_lr: float = 0.02
    bias_batch: int = 8  # labeled scenes per pretrain bias step
    c1: int = 32
    hidden: int = 64
    ssl_iterations: int = 450
    batch_labeled: int = 2
    ratio: float = 1.0  # labeled : unlabeled scenes per iteration
    beta: float = 1.0
    ema_momentum: float = 0.999
    smooth_l1_delta: float = 1.0
    uncertainty_mode: str = "model"  # or "oracle"
    match_iou: float = 0.0  # extra IoU floor on top of candidate containment
    eval_every: int = 100
    augment: bool = True

    def __post_init__(self):
        if self.uncertainty_mode not in ("model", "oracle"):
            raise InvalidInputError(f"unknown uncertainty_mode {self.uncertainty_mode!r}")


@dataclass(frozen=True)
class SimConfig:
    scene: SceneConfig = SceneConfig()
    ranges: tuple = field(default_factory=indoor_ranges)
    head: HeadSettings = HeadSettings()
    teacher_noise: NoiseModel = NoiseModel(corruption_prob=0.3)
    student_noise: NoiseModel = NoiseModel(systematic_bias=1.0, bias_offset=0.5, side_std=0.04,
                                           instance_bias=0.3)
    selection: SelectionConfig = SelectionConfig()
    train: TrainConfig = TrainConfig()
    iou_thresholds: tuple = (0.25, 0.5)
    seed: int = 0


def _rng(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"non-finite {what}: {value}")


def supervised_bias_step(student: StudentModel, scenes, cfg: SimConfig, rng):
    """Mean box loss of bias-corrected proposals against GT and its side_bias gradient.

    The gradient is averaged per class so rare classes train at the same
    rate as common ones.
    """
    acc = _BiasAccumulator(student.side_bias.shape)
    for scene in scenes:
        dets = student_predict(scene, student, cfg.student_noise, rng, cfg.ranges,
                               cfg.scene.n_classes, cfg.head)
        gts = [ScoredBox(b, c) for b, c in scene.ground_truth]
        for det in dets:
            target = _best_target(det, gts, cfg.train.match_iou)
            if target is not None:
                acc.add(det, target, None, cfg)
    return acc.result()


class _BiasAccumulator:
    """Running loss and per-class side_bias gradient over (proposal, target) pairs.

    Each pair counts with weight q_B (1 when unweighted); the loss is the
    weighted mean over pairs and each class's gradient the weighted mean
    over that class's pairs.
    """

    def __init__(self, shape):
        self.grad = np.zeros(shape)
        self.class_weight = np.zeros(shape[0])
        self.loss = 0.0
        self.weight = 0.0
        self.count = 0

    def add(self, det, target, weights, cfg):
        loss, g = _pair_loss(det, target, weights, cfg)
        w = 1.0 if weights is None else float(np.mean(weights))
        c = det.class_id
        # sides are raw minus bias, so d(loss)/d(bias) = -d(loss)/d(sides)
        self.grad[c] -= g
        self.class_weight[c] += w
        self.loss += loss
        self.weight += w
        self.count += 1

    def result(self):
        grad = self.grad / np.maximum(self.class_weight, 1e-12)[:, None]
        loss = self.loss / self.weight if self.weight > 0 else 0.0
        return loss, grad, self.count


def _best_target(det, targets, min_iou=0.0):
    """Same-class target whose box contains the detection's candidate point.

    Among several, the one with the highest IoU wins (first on ties).
    Assignment by candidate containment mirrors vote-based assignment and
    keeps badly biased proposals trainable.
    """
    best, best_iou = None, -1.0
    for t in targets:
        if t.class_id != det.class_id or not t.box.contains(det.candidate):
            continue
        iou = rotated_iou(det.box, t.box)
        if iou >= min_iou and iou > best_iou:
            best, best_iou = t, iou
    return best


def _pair_loss(det: Detection, target, weights, cfg: SimConfig):
    sd = SideDistances(det.candidate, det.side_values(), det.box.yaw)
    delta = cfg.train.smooth_l1_delta
    loss = box_loss(sd, det.box, target.box, weights, delta)
    grad = box_loss_side_grad(sd, target.box, weights, delta)
    return loss, grad


def run_pretrain(labeled, cfg: SimConfig, init: StudentModel = None):
    """Fit the uncertainty head and the side-bias correction on labeled scenes.

    Returns ``(student, report)`` where report rows carry the per-epoch mean
    uncertainty loss and supervised box loss.
    """
    if not labeled:
        raise InvalidInputError("run_pretrain needs at least one labeled scene")
    tc = cfg.train
    data_rng = _rng(cfg.seed, 1)
    samples = []
    for scene in labeled:
        samples.extend(training_samples(scene, cfg.teacher_noise, data_rng, cfg.ranges,
                                        cfg.scene.n_classes, cfg.head))
    if tc.head_samples:
        samples = samples[:tc.head_samples]
    if init is None:
        dist_dim = cfg.ranges[0].n_bins + 2
        head = UncertaintyModel.init(_rng(cfg.seed, 2), cfg.scene.seed_channels, dist_dim,
                                     tc.c1, tc.hidden)
        head = fit_input_normalization(head, samples)
        init = StudentModel(head, np.zeros((cfg.scene.n_classes, 6)))
    student = init.copy()
    report = []
    order_rng = _rng(cfg.seed, 3)
    box_rng = _rng(cfg.seed, 4)
    for epoch in range(tc.pretrain_epochs):
        perm = order_rng.permutation(len(samples))
        losses = []
        for start in range(0, len(samples), tc.head_batch):
            batch = [samples[i] for i in perm[start:start + tc.head_batch]]
            loss, grads = loss_and_gradients(student.head, batch)
            _check_finite(loss, "uncertainty loss")
            losses.append(loss)
            student.head = student.head.replace(
                **{n: getattr(student.head, n) - tc.head_lr * grads[n] for n in PARAM_NAMES})
        picks = box_rng.choice(len(labeled), size=min(tc.bias_batch, len(labeled)), replace=False)
        b_loss, b_grad, _ = supervised_bias_step(student, [labeled[i] for i in picks], cfg, box_rng)
        _check_finite(b_loss, "box loss")
        student.side_bias = student.side_bias - tc.bias_lr * b_grad
        report.append({"epoch": epoch, "uncertainty_loss": float(np.mean(losses)),
                       "box_loss": float(b_loss)})
        log.debug("pretrain epoch %d: %s", epoch, report[-1])
    return student, report


def evaluate_student(student: StudentModel, scenes, cfg: SimConfig, seed=None):
    """AP of the student's corrected proposals; detections are scored by objectness x class score."""
    seed = cfg.seed if seed is None else seed
    preds, gts = [], []
    for i, scene in enumerate(scenes):
        rng = _rng(seed, 7, i)
        dets = student_predict(scene, student, cfg.student_noise, rng, cfg.ranges,
                               cfg.scene.n_classes, cfg.head)
        preds.append([ScoredBox(d.box, d.class_id, d.objectness * d.class_score) for d in dets])
        gts.append(scene.ground_truth)
    return average_precision(preds, gts, cfg.iou_thresholds,
                             classes=list(range(cfg.scene.n_classes)))


def student_predictions(student: StudentModel, scenes, cfg: SimConfig, seed=None):
    """Per-scene scored boxes, identical to those used by evaluate_student."""
    seed = cfg.seed if seed is None else seed
    out = []
    for i, scene in enumerate(scenes):
        rng = _rng(seed, 7, i)
        dets = student_predict(scene, student, cfg.student_noise, rng, cfg.ranges,
                               cfg.scene.n_classes, cfg.head)
        out.append([ScoredBox(d.box, d.class_id, d.objectness * d.class_score) for d in dets])
    return out


def run_ssl(labeled, unlabeled, pretrained: StudentModel, cfg: SimConfig, val_scenes=None):
    """Mean-teacher training; returns ``(student, teacher, report)``.

    Each iteration draws labeled and unlabeled scenes at the configured
    ratio, runs the teacher on one augmentation of every unlabeled scene and
    supervises the student's proposals on another augmentation with the
    selected pseudo-labels, weighted per side.
    """
    if not labeled:
        raise InvalidInputError("run_ssl needs at least one labeled scene")
    tc = cfg.train
    student = pretrained.copy()
    ema = EmaState(student.flat(), student.flat(), tc.ema_momentum)
    teacher = student.copy()
    n_unl = 0 if not unlabeled else max(1, int(round(tc.batch_labeled / tc.ratio)))
    epoch_len = max(1, math.ceil(len(unlabeled) / n_unl)) if n_unl else 1
    state = CategoryThresholdState(cfg.scene.n_classes)

    rng_lab = _rng(cfg.seed, 11)
    rng_unl = _rng(cfg.seed, 12)
    rng_sup = _rng(cfg.seed, 13)
    rng_head = _rng(cfg.seed, 14)
    rng_teacher = _rng(cfg.seed, 15)
    rng_student = _rng(cfg.seed, 16)
    rng_aug = _rng(cfg.seed, 17)

    report = []
    acc = _fresh_acc()
    for it in range(tc.ssl_iterations):
        if n_unl and it % epoch_len == 0:
            state = state.reset()
        lab = [labeled[i] for i in rng_lab.integers(len(labeled), size=tc.batch_labeled)]
        lab = [random_augmentation(rng_sup).apply_scene(s) if tc.augment else s for s in lab]

        head_batch = []
        for s in lab:
            head_batch.extend(training_samples(s, cfg.teacher_noise, rng_head, cfg.ranges,
                                               cfg.scene.n_classes, cfg.head))
        sup_box, g_bias_sup, _ = supervised_bias_step(student, lab, cfg, rng_sup)
        if head_batch:
            unc_loss, g_head = loss_and_gradients(student.head, head_batch)
        else:
            unc_loss, g_head = 0.0, {n: np.zeros_like(getattr(student.head, n)) for n in PARAM_NAMES}
        sup_loss = sup_box + unc_loss

        unsup_loss, g_bias_unsup = 0.0, np.zeros_like(student.side_bias)
        if n_unl:
            batch = [unlabeled[i] for i in rng_unl.integers(len(unlabeled), size=n_unl)]
            unsup_acc = _BiasAccumulator(student.side_bias.shape)
            for scene in batch:
                t_aug = random_augmentation(rng_aug) if tc.augment else RigidTransform()
                s_aug = random_augmentation(rng_aug) if tc.augment else RigidTransform()
                t_scene = t_aug.apply_scene(scene)
                model = teacher.head if tc.uncertainty_mode == "model" else None
                t_dets = teacher_predict(t_scene, cfg.teacher_noise, rng_teacher, cfg.ranges,
                                         cfg.scene.n_classes, model, cfg.head)
                pls, state = select_pseudo_labels(t_dets, state, cfg.selection)
                to_student = t_aug.inverse().then(s_aug)
                targets = [ScoredBox(to_student.apply_box(p.box), p.class_id, p.global_quality,
                                     p.side_quality) for p in pls]
                acc["teacher_dets"] += len(t_dets)
                acc["pseudo_labels"] += len(pls)
                acc["quality_sum"] += float(sum(p.side_quality.sum() for p in pls))
                s_dets = student_predict(s_aug.apply_scene(scene), student, cfg.student_noise,
                                         rng_student, cfg.ranges, cfg.scene.n_classes, cfg.head)
                for det in s_dets:
                    target = _best_target(det, targets, tc.match_iou)
                    if target is not None:
                        unsup_acc.add(det, target, target.side_quality, cfg)
            unsup_loss, g_bias_unsup, _ = unsup_acc.result()

        loss = total_ssl_loss(sup_loss, unsup_loss, tc.beta)
        g_bias = g_bias_sup + tc.beta * g_bias_unsup
        _check_finite(loss, "training loss")
        _check_finite(g_bias, "side-bias gradient")
        student = StudentModel(
            student.head.replace(**{n: getattr(student.head, n) - tc.head_lr * g_head[n]
                                    for n in PARAM_NAMES}),
            student.side_bias - tc.bias_lr * g_bias)
        ema = ema_update(EmaState(ema.teacher, student.flat(), tc.ema_momentum))
        teacher = student.with_flat(ema.teacher)

        acc["iterations"] += 1
        acc["sup_loss"] += sup_loss
        acc["unsup_loss"] += unsup_loss
        acc["loss"] += loss
        last = it == tc.ssl_iterations - 1
        if (it + 1) % tc.eval_every == 0 or last:
            report.append(_report_row(it, acc, student, val_scenes, cfg))
            acc = _fresh_acc()
    return student, teacher, report


def _fresh_acc():
    return {"iterations": 0, "sup_loss": 0.0, "unsup_loss": 0.0, "loss": 0.0,
            "teacher_dets": 0, "pseudo_labels": 0, "quality_sum": 0.0}


def _report_row(it, acc, student, val_scenes, cfg):
    n = max(acc["iterations"], 1)
    row = {"iteration": it + 1,
           "sup_loss": acc["sup_loss"] / n,
           "unsup_loss": acc["unsup_loss"] / n,
           "total_loss": acc["loss"] / n,
           "teacher_detections": acc["teacher_dets"],
           "pseudo_labels": acc["pseudo_labels"],
           "mean_side_quality": (acc["quality_sum"] / (6 * acc["pseudo_labels"])
                                 if acc["pseudo_labels"] else 0.0)}
    if val_scenes:
        ap = evaluate_student(student, val_scenes, cfg)
        for t in cfg.iou_thresholds:
            row[f"map{int(round(t * 100))}"] = ap.map(t)
    return row
