"""Per-side localization uncertainty: SoI pooling and a small MLP head.

Side points are laid on a box face, seed features are propagated to them by
inverse-distance k-NN interpolation, a shared per-point layer followed by a
max-pool gives the face's geometric feature, and an MLP over that feature
concatenated with the distribution features predicts ``u_s`` in (0, 1).
Gradients are computed by hand.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .box_geometry import OrientedBox3, SideId
from .errors import DivergenceError, FileFormatError, InvalidInputError

DEFAULT_GRID = 4
DEFAULT_KNN = 3
INTERP_EPS = 1e-8
ALPHA1 = 4.0

# Trainable tensors, in checkpoint order.
PARAM_NAMES = ("pn_w", "pn_b", "w1", "b1", "w2", "b2")
# Fixed input standardization for the head; not updated by train_step.
BUFFER_NAMES = ("in_shift", "in_scale")


@dataclass(frozen=True, eq=False)
class SeedCloud:
    points: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2 or len(feats) != len(pts):
            raise InvalidInputError(
                f"need one feature row per point, got {feats.shape} for {len(pts)} points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "features", feats)

    def __len__(self):
        return len(self.points)

    @property
    def channels(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class SidePointSet:
    side: SideId
    points: np.ndarray


def generate_side_points(box: OrientedBox3, side, grid: int = DEFAULT_GRID) -> SidePointSet:
    """G x G cell-centered grid on the face, in world coordinates."""
    side = SideId(side)
    if grid < 1:
        raise InvalidInputError(f"grid must be >= 1, got {grid}")
    half = box.size / 2.0
    others = [a for a in range(3) if a != side.axis]
    ticks = (np.arange(grid) + 0.5) / grid - 0.5
    u, v = np.meshgrid(ticks, ticks, indexing="ij")
    local = np.zeros((grid * grid, 3))
    local[:, side.axis] = side.sign * half[side.axis]
    local[:, others[0]] = u.ravel() * box.size[others[0]]
    local[:, others[1]] = v.ravel() * box.size[others[1]]
    return SidePointSet(side, box.to_world(local))


def interpolation_weights(points, seeds: SeedCloud, k_nn: int = DEFAULT_KNN, eps=INTERP_EPS):
    """Indices (P, k) of the nearest seeds and their normalized inverse-distance weights."""
    if len(seeds) == 0:
        raise InvalidInputError("seed cloud is empty")
    if not 1 <= k_nn <= len(seeds):
        raise InvalidInputError(f"k_nn must be in [1, {len(seeds)}], got {k_nn}")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    d2 = ((pts[:, None, :] - seeds.points[None, :, :]) ** 2).sum(-1)
    if k_nn < d2.shape[1]:
        # k smallest per row, then ordered by (distance, index)
        part = np.argpartition(d2, k_nn - 1, axis=1)[:, :k_nn]
        part.sort(axis=1)
        order = np.argsort(np.take_along_axis(d2, part, axis=1), axis=1, kind="stable")
        idx = np.take_along_axis(part, order, axis=1)
    else:
        idx = np.argsort(d2, axis=1, kind="stable")
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    inv = 1.0 / (dist + eps)
    return idx, inv / inv.sum(axis=1, keepdims=True)


def interpolate_features(sps, seeds: SeedCloud, k_nn: int = DEFAULT_KNN) -> np.ndarray:
    points = sps.points if isinstance(sps, SidePointSet) else sps
    idx, w = interpolation_weights(points, seeds, k_nn)
    return np.einsum("pk,pkc->pc", w, seeds.features[idx])


@dataclass(eq=False)
class UncertaintyModel:
    pn_w: np.ndarray
    pn_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    in_shift: np.ndarray = field(default=None)
    in_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        c1, c_seed = self.pn_w.shape
        hidden, d_in = self.w1.shape
        expected = {"pn_b": (c1,), "b1": (hidden,), "w2": (hidden,), "b2": (1,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidInputError(f"{name} has shape {getattr(self, name).shape}, want {shape}")
        if d_in <= c1:
            raise InvalidInputError("head input must include distribution features")
        if self.in_shift is None:
            self.in_shift = np.zeros(d_in)
        if self.in_scale is None:
            self.in_scale = np.ones(d_in)
        self.in_shift = np.array(self.in_shift, dtype=float)
        self.in_scale = np.array(self.in_scale, dtype=float)
        if self.in_shift.shape != (d_in,) or self.in_scale.shape != (d_in,):
            raise InvalidInputError("input normalization must match head input width")

    @classmethod
    def init(cls, rng, seed_channels: int, dist_dim: int, c1: int = 32, hidden: int = 64):
        """Random initialization; ``dist_dim`` is N + 2."""
        return cls(
            pn_w=rng.normal(0.0, 1.0 / np.sqrt(seed_channels), (c1, seed_channels)),
            pn_b=np.zeros(c1),
            w1=rng.normal(0.0, 1.0 / np.sqrt(c1 + dist_dim), (hidden, c1 + dist_dim)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden),
            b2=np.zeros(1),
        )

    @property
    def seed_channels(self) -> int:
        return self.pn_w.shape[1]

    @property
    def geo_dim(self) -> int:
        return self.pn_w.shape[0]

    @property
    def dist_dim(self) -> int:
        return self.w1.shape[1] - self.geo_dim

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_NAMES)

    def params(self) -> dict:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def tensors(self) -> dict:
        return {n: getattr(self, n) for n in PARAM_NAMES + BUFFER_NAMES}

    def copy(self) -> "UncertaintyModel":
        return UncertaintyModel(**{n: t.copy() for n, t in self.tensors().items()})

    def replace(self, **tensors) -> "UncertaintyModel":
        current = {n: t.copy() for n, t in self.tensors().items()}
        current.update(tensors)
        return UncertaintyModel(**current)

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def with_flat(self, vector) -> "UncertaintyModel":
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.n_params:
            raise InvalidInputError(f"expected {self.n_params} values, got {vector.size}")
        out, pos = {}, 0
        for n in PARAM_NAMES:
            t = getattr(self, n)
            out[n] = vector[pos:pos + t.size].reshape(t.shape)
            pos += t.size
        return self.replace(**out)


@dataclass(frozen=True, eq=False)
class UncertaintyTrainingSample:
    """One side: SoI point features (P, C_seed), F_dist (N + 2) and label y_u.

    F_geo is derived from the point features by the model's pooling layer, so
    that layer trains together with the head.
    """

    point_features: np.ndarray
    f_dist: np.ndarray
    label: float

    def __post_init__(self):
        if not 0.0 <= self.label <= 1.0:
            raise InvalidInputError(f"label must be in [0, 1], got {self.label}")


def soi_pool(model: UncertaintyModel, point_features) -> np.ndarray:
    x = np.asarray(point_features, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise InvalidInputError("soi_pool needs a non-empty (P, C) array")
    return np.tanh(x @ model.pn_w.T + model.pn_b).max(axis=0)


def predict_uncertainty(model: UncertaintyModel, f_geo, f_dist) -> float:
    f_geo = np.asarray(f_geo, dtype=float).ravel()
    f_dist = np.asarray(f_dist, dtype=float).ravel()
    if f_geo.size != model.geo_dim or f_dist.size != model.dist_dim:
        raise InvalidInputError(
            f"expected F_geo of {model.geo_dim} and F_dist of {model.dist_dim}, "
            f"got {f_geo.size} and {f_dist.size}")
    x = (np.concatenate([f_geo, f_dist]) - model.in_shift) / model.in_scale
    h = np.tanh(model.w1 @ x + model.b1)
    return float(expit(h @ model.w2 + model.b2[0]))


def uncertainty_label(y_s, s_hat, alpha1: float = ALPHA1):
    """min(alpha1 * |y_s - s_hat|, 1)."""
    return np.minimum(alpha1 * np.abs(np.asarray(y_s, dtype=float) - s_hat), 1.0)


def uncertainty_loss(labels, predictions) -> float:
    y = np.asarray(labels, dtype=float).ravel()
    u = np.asarray(predictions, dtype=float).ravel()
    if y.size == 0:
        raise InvalidInputError("uncertainty loss over an empty set")
    if y.shape != u.shape:
        raise InvalidInputError(f"length mismatch: {y.size} labels vs {u.size} predictions")
    return float(np.mean((y - u) ** 2))


def _stack(batch):
    if len(batch) == 0:
        raise InvalidInputError("empty batch")
    x = np.stack([s.point_features for s in batch])
    fd = np.stack([s.f_dist for s in batch])
    y = np.array([s.label for s in batch], dtype=float)
    return x, fd, y


def forward_batch(model: UncertaintyModel, point_features, f_dist):
    """Vectorized forward pass over (B, P, C) point features and (B, N+2) F_dist."""
    z = point_features @ model.pn_w.T + model.pn_b
    a = np.tanh(z)
    arg = a.argmax(axis=1)
    f_geo = np.take_along_axis(a, arg[:, None, :], axis=1)[:, 0, :]
    x = (np.concatenate([f_geo, f_dist], axis=1) - model.in_shift) / model.in_scale
    h = np.tanh(x @ model.w1.T + model.b1)
    u = expit(h @ model.w2 + model.b2[0])
    cache = {"a": a, "arg": arg, "f_geo": f_geo, "x": x, "h": h}
    return u, cache


def predict_batch(model: UncertaintyModel, batch) -> np.ndarray:
    x, fd, _ = _stack(batch)
    return forward_batch(model, x, fd)[0]


def loss_and_gradients(model: UncertaintyModel, batch):
    """Mean squared uncertainty loss over ``batch`` and its gradient for every parameter."""
    x, fd, y = _stack(batch)
    u, c = forward_batch(model, x, fd)
    n = len(y)
    loss = float(np.mean((u - y) ** 2))

    d_o = 2.0 * (u - y) / n * u * (1.0 - u)
    grads = {"w2": c["h"].T @ d_o, "b2": np.array([d_o.sum()])}
    d_hpre = np.outer(d_o, model.w2) * (1.0 - c["h"] ** 2)
    grads["w1"] = d_hpre.T @ c["x"]
    grads["b1"] = d_hpre.sum(axis=0)
    d_x = (d_hpre @ model.w1) / model.in_scale
    d_fgeo = d_x[:, :model.geo_dim]
    # max-pool routes the gradient to the winning point of each channel
    a_win = c["f_geo"]
    d_z = d_fgeo * (1.0 - a_win ** 2)
    x_win = np.take_along_axis(x, c["arg"][:, :, None], axis=1)
    grads["pn_w"] = np.einsum("bc,bcs->cs", d_z, x_win)
    grads["pn_b"] = d_z.sum(axis=0)
    return loss, grads


def train_step(model: UncertaintyModel, batch, learning_rate: float):
    """One gradient-descent step; returns (pre-update loss, new model)."""
    loss, grads = loss_and_gradients(model, batch)
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad or not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} or gradients in {bad}")
    if learning_rate == 0:
        return loss, model.copy()
    updated = {n: getattr(model, n) - learning_rate * grads[n] for n in PARAM_NAMES}
    return loss, model.replace(**updated)


def fit_input_normalization(model: UncertaintyModel, batch) -> UncertaintyModel:
    """Set the head's fixed input standardization from the pooled features of ``batch``."""
    x, fd, _ = _stack(batch)
    base = model.replace(in_shift=np.zeros(model.w1.shape[1]), in_scale=np.ones(model.w1.shape[1]))
    _, cache = forward_batch(base, x, fd)
    inputs = cache["x"]
    scale = inputs.std(axis=0)
    scale = np.where(scale > 1e-6, scale, 1.0)
    return model.replace(in_shift=inputs.mean(axis=0), in_scale=scale)


# Checkpoints: one ASCII header line
#   SIDEAWARE-CKPT 1 <json>\n
# where <json> lists {"name", "shape", "dtype": "<f8"} per tensor in storage
# order, followed by the tensors' raw little-endian float64 bytes (C order).
CKPT_MAGIC = "SIDEAWARE-CKPT"
CKPT_VERSION = 1


def dump_tensors(tensors: dict) -> bytes:
    entries, blobs = [], []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(np.asarray(t, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8"})
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps({"tensors": entries}, sort_keys=True, separators=(",", ":"))
    return f"{CKPT_MAGIC} {CKPT_VERSION} {header}\n".encode("ascii") + b"".join(blobs)


def load_tensors(data: bytes, path="<bytes>") -> dict:
    buf = io.BytesIO(data)
    line = buf.readline().decode("ascii", errors="replace").rstrip("\n")
    parts = line.split(" ", 2)
    if len(parts) != 3 or parts[0] != CKPT_MAGIC:
        raise FileFormatError(path, 1, "not a checkpoint file")
    if parts[1] != str(CKPT_VERSION):
        raise FileFormatError(path, 1, f"unsupported checkpoint version {parts[1]}")
    header = json.loads(parts[2])
    out = {}
    for entry in header["tensors"]:
        if entry["dtype"] != "<f8":
            raise FileFormatError(path, 1, f"unsupported dtype {entry['dtype']}")
        count = int(np.prod(entry["shape"], dtype=int))
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise FileFormatError(path, None, f"truncated tensor {entry['name']}")
        out[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(float)
    if buf.read(1):
        raise FileFormatError(path, None, "trailing bytes after last tensor")
    return out
