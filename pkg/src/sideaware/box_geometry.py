"""Gravity-aligned 3D boxes, six-side parameterization and rotated IoU.

Local box frame: +x points to the front face, +y to the left face and +z to
the top face. Yaw rotates the local frame about the world +z axis,
counterclockwise when viewed from above. Axis-aligned boxes are simply
``yaw == 0``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidGeometryError, OutOfBoxError

# Polygons with a smaller area are treated as empty.
SLIVER_AREA = 1e-12


class SideId(enum.IntEnum):
    TOP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    FRONT = 4
    BACK = 5

    @property
    def axis(self) -> int:
        """Local axis index (0=x, 1=y, 2=z) the side is normal to."""
        return _SIDE_AXIS[self]

    @property
    def sign(self) -> float:
        """+1 if the outward normal points along the positive local axis."""
        return _SIDE_SIGN[self]

    @property
    def local_normal(self) -> np.ndarray:
        n = np.zeros(3)
        n[self.axis] = self.sign
        return n


_SIDE_AXIS = {SideId.TOP: 2, SideId.DOWN: 2, SideId.LEFT: 1,
              SideId.RIGHT: 1, SideId.FRONT: 0, SideId.BACK: 0}
_SIDE_SIGN = {SideId.TOP: 1.0, SideId.DOWN: -1.0, SideId.LEFT: 1.0,
              SideId.RIGHT: -1.0, SideId.FRONT: 1.0, SideId.BACK: -1.0}

SIDES = tuple(SideId)
SIDE_NAMES = tuple(s.name.lower() for s in SideId)

# Corner sign pattern, in the order returned by box_corners: bottom face
# (front-left, front-right, back-right, back-left) then the top face in the
# same order.
CORNER_SIGNS = np.array([
    [1, 1, -1], [1, -1, -1], [-1, -1, -1], [-1, 1, -1],
    [1, 1, 1], [1, -1, 1], [-1, -1, 1], [-1, 1, 1],
], dtype=float)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.pi - math.fmod(math.pi - float(yaw), 2.0 * math.pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    elif wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _frozen(values, name, size=3) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise InvalidGeometryError(f"{name} must have {size} components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidGeometryError(f"{name} must be finite, got {arr}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class OrientedBox3:
    """Box with center (m), size = (length, width, height) (m) and yaw (rad)."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center, "center"))
        size = _frozen(self.size, "size")
        if np.any(size <= 0.0):
            raise InvalidGeometryError(f"box size must be strictly positive, got {size}")
        object.__setattr__(self, "size", size)
        if not math.isfinite(self.yaw):
            raise InvalidGeometryError(f"yaw must be finite, got {self.yaw}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        # plain-float copies for the scalar IoU path
        object.__setattr__(self, "_c", tuple(float(v) for v in self.center))
        object.__setattr__(self, "_s", tuple(float(v) for v in size))

    @property
    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.yaw)

    @property
    def volume(self) -> float:
        return self._s[0] * self._s[1] * self._s[2]

    @property
    def footprint_area(self) -> float:
        return self._s[0] * self._s[1]

    def to_local(self, points) -> np.ndarray:
        """World points (..., 3) expressed in the box frame."""
        return (np.asarray(points, dtype=float) - self.center) @ self.rotation

    def to_world(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.center

    def contains(self, point, strict=True) -> bool:
        local = np.abs(self.to_local(point))
        half = self.size / 2.0
        return bool(np.all(local < half) if strict else np.all(local <= half))

    def face_center(self, side: SideId) -> np.ndarray:
        side = SideId(side)
        offset = side.local_normal * (self.size[side.axis] / 2.0)
        return self.center + self.rotation @ offset

    def face_normal(self, side: SideId) -> np.ndarray:
        return self.rotation @ SideId(side).local_normal

    def transformed(self, yaw: float, translation=(0.0, 0.0, 0.0)) -> "OrientedBox3":
        """Apply a world rotation about +z by ``yaw`` followed by ``translation``."""
        rot = yaw_matrix(yaw)
        return OrientedBox3(rot @ self.center + np.asarray(translation, dtype=float),
                            self.size, self.yaw + yaw)

    def allclose(self, other: "OrientedBox3", atol=1e-9) -> bool:
        dyaw = abs(normalize_yaw(self.yaw - other.yaw))
        return (np.allclose(self.center, other.center, rtol=0, atol=atol)
                and np.allclose(self.size, other.size, rtol=0, atol=atol)
                and dyaw <= atol)

    def as_dict(self) -> dict:
        return {"center": [float(v) for v in self.center],
                "size": [float(v) for v in self.size],
                "yaw": float(self.yaw)}

    def __repr__(self):
        c = ", ".join(f"{v:.4g}" for v in self.center)
        s = ", ".join(f"{v:.4g}" for v in self.size)
        return f"OrientedBox3(center=({c}), size=({s}), yaw={self.yaw:.4g})"


@dataclass(frozen=True, eq=False)
class SideDistances:
    """Distances (m) from ``candidate`` to the six faces, indexed by SideId.

    Distances are measured along the axes of a frame rotated by ``yaw``.
    """

    candidate: np.ndarray
    distances: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "candidate", _frozen(self.candidate, "candidate"))
        object.__setattr__(self, "distances", _frozen(self.distances, "distances", 6))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def __getitem__(self, side) -> float:
        return float(self.distances[SideId(side)])


def box_corners(box: OrientedBox3) -> np.ndarray:
    """The 8 corners (8, 3) in CORNER_SIGNS order."""
    return box.to_world(CORNER_SIGNS * (box.size / 2.0))


def box_from_corners(corners) -> OrientedBox3:
    """Inverse of box_corners for corners given in CORNER_SIGNS order."""
    c = np.asarray(corners, dtype=float)
    center = c.mean(axis=0)
    x_axis = c[0] - c[3]
    y_axis = c[0] - c[1]
    z_axis = c[4] - c[0]
    size = [np.linalg.norm(x_axis), np.linalg.norm(y_axis), np.linalg.norm(z_axis)]
    return OrientedBox3(center, size, math.atan2(x_axis[1], x_axis[0]))


def box_from_sides(sd: SideDistances) -> OrientedBox3:
    d = sd.distances
    size = np.array([d[SideId.FRONT] + d[SideId.BACK],
                     d[SideId.LEFT] + d[SideId.RIGHT],
                     d[SideId.TOP] + d[SideId.DOWN]])
    if np.any(size <= 0.0):
        raise InvalidGeometryError(f"opposing side distances must sum to > 0, got {d}")
    offset = np.array([(d[SideId.FRONT] - d[SideId.BACK]) / 2.0,
                       (d[SideId.LEFT] - d[SideId.RIGHT]) / 2.0,
                       (d[SideId.TOP] - d[SideId.DOWN]) / 2.0])
    center = sd.candidate + yaw_matrix(sd.yaw) @ offset
    return OrientedBox3(center, size, sd.yaw)


def signed_side_distances(candidate, box: OrientedBox3) -> np.ndarray:
    """Signed distances in SideId order; negative when the point is beyond a face."""
    local = box.to_local(candidate)
    half = box.size / 2.0
    out = np.empty(6)
    for side in SIDES:
        out[side] = half[side.axis] - side.sign * local[side.axis]
    return out


def sides_from_box(candidate, box: OrientedBox3) -> SideDistances:
    """Side distances of ``box`` as seen from an interior ``candidate``."""
    d = signed_side_distances(candidate, box)
    if np.any(d <= 0.0):
        raise OutOfBoxError(f"candidate {np.asarray(candidate)} is not inside {box!r}")
    return SideDistances(candidate, d, box.yaw)


def candidate_from_sides(box: OrientedBox3, distances) -> np.ndarray:
    """The candidate point implied by a box and its six side distances."""
    d = np.asarray(distances, dtype=float)
    offset = np.array([(d[SideId.FRONT] - d[SideId.BACK]) / 2.0,
                       (d[SideId.LEFT] - d[SideId.RIGHT]) / 2.0,
                       (d[SideId.TOP] - d[SideId.DOWN]) / 2.0])
    return box.center - box.rotation @ offset


def footprint(box: OrientedBox3) -> np.ndarray:
    """Counterclockwise BEV rectangle (4, 2)."""
    return np.array(_footprint_xy(box))


def _footprint_xy(box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box._s[0] / 2.0, box._s[1] / 2.0
    cx, cy = box._c[0], box._c[1]
    # back-left, back-right, front-right, front-left: counterclockwise
    return [(cx + c * sx * hl - s * sy * hw, cy + s * sx * hl + c * sy * hw)
            for sx, sy in ((-1, 1), (-1, -1), (1, -1), (1, 1))]


def polygon_area(poly) -> float:
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW polygon ``clip``."""
    return np.array(_clip(_as_pairs(subject), _as_pairs(clip)), dtype=float).reshape(-1, 2)


def _as_pairs(poly):
    return [(float(x), float(y)) for x, y in np.asarray(poly, dtype=float)]


def _clip(output, clip):
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs, output = output, []
        # inside means on the left of edge a->b
        dists = [ex * (py - ay) - ey * (px - ax) for px, py in inputs]
        m = len(inputs)
        for j in range(m):
            p, dp = inputs[j], dists[j]
            q, dq = inputs[(j + 1) % m], dists[(j + 1) % m]
            if dp >= 0.0:
                output.append(p)
            if (dp >= 0.0) != (dq >= 0.0):
                t = dp / (dp - dq)
                output.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return output


def _shoelace(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def bev_intersection_area(a: OrientedBox3, b: OrientedBox3) -> float:
    reach = 0.5 * (math.hypot(a._s[0], a._s[1]) + math.hypot(b._s[0], b._s[1]))
    if math.hypot(a._c[0] - b._c[0], a._c[1] - b._c[1]) >= reach:
        return 0.0
    area = _shoelace(_clip(_footprint_xy(a), _footprint_xy(b)))
    if area < SLIVER_AREA:
        return 0.0
    return min(area, a.footprint_area, b.footprint_area)


def vertical_overlap(a: OrientedBox3, b: OrientedBox3) -> float:
    lo = max(a._c[2] - a._s[2] / 2.0, b._c[2] - b._s[2] / 2.0)
    hi = min(a._c[2] + a._s[2] / 2.0, b._c[2] + b._s[2] / 2.0)
    return max(0.0, hi - lo)


def intersection_volume(a: OrientedBox3, b: OrientedBox3) -> float:
    dz = vertical_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    return bev_intersection_area(a, b) * dz


def rotated_iou(a: OrientedBox3, b: OrientedBox3) -> float:
    """3D IoU of two gravity-aligned boxes (footprint clipping x height overlap)."""
    inter = intersection_volume(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def pairwise_iou(boxes_a, boxes_b) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = rotated_iou(a, b)
    return out
