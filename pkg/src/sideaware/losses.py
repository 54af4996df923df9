"""Regression losses: side smooth-L1, rotated-IoU loss and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .box_geometry import (OrientedBox3, SideDistances, box_from_sides, rotated_iou,
                           signed_side_distances)
from .errors import InvalidInputError


@dataclass(frozen=True)
class LossConfig:
    smooth_l1_delta: float = 1.0
    beta: float = 1.0
    ratio: float = 1.0

    def __post_init__(self):
        if not self.smooth_l1_delta > 0:
            raise InvalidInputError("smooth_l1_delta must be > 0")
        if not self.beta >= 0:
            raise InvalidInputError("beta must be >= 0")
        if not self.ratio > 0:
            raise InvalidInputError("ratio must be > 0")


def smooth_l1(pred, target, delta: float = 1.0):
    x = np.abs(np.asarray(pred, dtype=float) - target)
    out = np.where(x < delta, 0.5 * x * x / delta, x - 0.5 * delta)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(pred, target, delta: float = 1.0):
    """d smooth_l1 / d pred."""
    x = np.asarray(pred, dtype=float) - target
    out = np.where(np.abs(x) < delta, x / delta, np.sign(x))
    return float(out) if out.ndim == 0 else out


def target_sides(pred_sides: SideDistances, target_box: OrientedBox3) -> np.ndarray:
    """Signed distances from the prediction's candidate point to the target's faces.

    Measured in the target box frame; negative if the candidate lies outside it.
    """
    return signed_side_distances(pred_sides.candidate, target_box)


def box_loss_terms(pred_sides: SideDistances, pred_box, target_box: OrientedBox3,
                   delta: float = 1.0):
    """Return ``(iou_term, side_terms)`` = ``(1 - IoU, smooth-L1 per side)``."""
    if pred_box is None:
        pred_box = box_from_sides(pred_sides)
    y = target_sides(pred_sides, target_box)
    side_terms = smooth_l1(pred_sides.distances, y, delta)
    return 1.0 - rotated_iou(pred_box, target_box), np.asarray(side_terms)


def box_loss(pred_sides: SideDistances, pred_box, target_box: OrientedBox3,
             weights=None, delta: float = 1.0) -> float:
    """Box regression loss; with per-side ``weights`` the IoU term is scaled by their mean."""
    iou_term, side_terms = box_loss_terms(pred_sides, pred_box, target_box, delta)
    if weights is None:
        return float(iou_term + side_terms.sum())
    q = np.asarray(weights, dtype=float).ravel()
    if q.shape != (6,):
        raise InvalidInputError(f"need 6 side weights, got {q.size}")
    return float(q.mean() * iou_term + np.dot(q, side_terms))


def box_loss_side_grad(pred_sides: SideDistances, target_box: OrientedBox3, weights=None,
                       delta: float = 1.0, fd_step: float = 1e-4) -> np.ndarray:
    """Gradient of ``box_loss`` w.r.t. the six predicted side distances.

    The smooth-L1 part is analytic; the IoU part uses central differences
    because the clipped-polygon IoU is only piecewise smooth.
    """
    q = np.ones(6) if weights is None else np.asarray(weights, dtype=float)
    y = target_sides(pred_sides, target_box)
    grad = q * smooth_l1_grad(pred_sides.distances, y, delta)
    d = pred_sides.distances
    iou_grad = np.zeros(6)
    for i in range(6):
        step = np.zeros(6)
        step[i] = fd_step
        hi = SideDistances(pred_sides.candidate, d + step, pred_sides.yaw)
        lo = SideDistances(pred_sides.candidate, np.maximum(d - step, 1e-9), pred_sides.yaw)
        h = hi.distances[i] - lo.distances[i]
        iou_grad[i] = -(rotated_iou(box_from_sides(hi), target_box)
                        - rotated_iou(box_from_sides(lo), target_box)) / h
    return grad + q.mean() * iou_grad


def total_ssl_loss(supervised: float, unsupervised: float, beta: float) -> float:
    return float(supervised + beta * unsupervised)
