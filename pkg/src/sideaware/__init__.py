"""Side-aware pseudo-label selection for semi-supervised 3D box regression.

Boxes are parameterized by six side distances from a candidate point; each
side carries a discrete distance distribution and a learned uncertainty that
weights pseudo-label supervision per side.
"""

from .box_geometry import (OrientedBox3, SideDistances, SideId, box_from_sides, rotated_iou,
                           sides_from_box)
from .evaluation import ApResult, ScoredBox, SideQualityReport, average_precision, side_error_stats
from .losses import box_loss, smooth_l1, total_ssl_loss
from .side_distribution import SideDistribution, SideRange, distribution_from_logits, expected_value
from .soft_pls import (CategoryThresholdState, Detection, PseudoLabel, SelectionConfig,
                       select_pseudo_labels)
from .uncertainty import SeedCloud, UncertaintyModel, predict_uncertainty

__version__ = "0.1.0"

__all__ = [
    "ApResult", "CategoryThresholdState", "Detection", "OrientedBox3", "PseudoLabel", "ScoredBox",
    "SeedCloud", "SelectionConfig", "SideDistances", "SideDistribution", "SideId",
    "SideQualityReport", "SideRange", "UncertaintyModel", "average_precision", "box_from_sides",
    "box_loss", "distribution_from_logits", "expected_value", "predict_uncertainty",
    "rotated_iou", "select_pseudo_labels", "side_error_stats", "sides_from_box", "smooth_l1",
    "total_ssl_loss",
]
