"""Run configuration: one YAML file, validated against the dataclass defaults.

Every section maps onto a dataclass. Values are type-checked against the
default's type and unknown keys are rejected with their full key path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, InvalidInputError
from .side_distribution import RANGE_PRESETS
from .soft_pls import SelectionConfig
from .ssl_sim import HeadSettings, NoiseModel, SceneConfig, SimConfig, TrainConfig


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 100
    labeled_fraction: float = 0.2
    n_val: int = 100
    ranges: str = "indoor"
    # 100%-labeled mode: every training scene is also used as unlabeled data
    copy_labeled_as_unlabeled: bool = False

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 0:
            raise InvalidInputError("n_train must be >= 1 and n_val >= 0")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise InvalidInputError("labeled_fraction must lie in (0, 1]")
        if self.ranges not in RANGE_PRESETS:
            raise InvalidInputError(f"ranges must be one of {sorted(RANGE_PRESETS)}")


@dataclass(frozen=True)
class PathConfig:
    """File names, relative to the run directory unless absolute."""

    labeled: str = "scenes_labeled.jsonl"
    unlabeled: str = "scenes_unlabeled.jsonl"
    val: str = "scenes_val.jsonl"
    detections: str = "detections_unlabeled.jsonl"
    pretrain_checkpoint: str = "pretrain.ckpt"
    student_checkpoint: str = "ssl_student.ckpt"
    teacher_checkpoint: str = "ssl_teacher.ckpt"
    report_dir: str = "reports"


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = (0.25, 0.5)
    side_match_iou: float = 0.25
    side_error_threshold: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    paths: PathConfig = PathConfig()
    scene: SceneConfig = SceneConfig()
    head: HeadSettings = HeadSettings()
    teacher_noise: NoiseModel = field(default_factory=lambda: SimConfig().teacher_noise)
    student_noise: NoiseModel = field(default_factory=lambda: SimConfig().student_noise)
    selection: SelectionConfig = SelectionConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    def sim_config(self) -> SimConfig:
        return SimConfig(scene=self.scene, ranges=RANGE_PRESETS[self.data.ranges](),
                         head=self.head, teacher_noise=self.teacher_noise,
                         student_noise=self.student_noise, selection=self.selection,
                         train=self.train, iou_thresholds=tuple(self.eval.iou_thresholds),
                         seed=self.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))


def _coerce(value, default, path):
    """Convert a parsed YAML value to the type of ``default``."""
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _build(type(default), value, path, default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default and len(value) != len(default) and path.rsplit(".", 1)[-1] != "iou_thresholds":
            raise ConfigError(f"{path}: expected {len(default)} values, got {len(value)}")
        proto = default[0] if default else 0.0
        return tuple(_coerce(v, proto, f"{path}[{i}]") for i, v in enumerate(value))
    if isinstance(default, dict):
        # per-class thresholds: {class_id: value}
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        out = {}
        for k, v in value.items():
            try:
                key = int(k)
            except (TypeError, ValueError):
                raise ConfigError(f"{path}.{k}: class keys must be integers") from None
            out[key] = _coerce(v, 0.0, f"{path}.{k}")
        return out
    # fields typed loosely (scalar or per-side list)
    if isinstance(value, list):
        return tuple(_coerce(v, 0.0, f"{path}[{i}]") for i, v in enumerate(value))
    return _coerce(value, 0.0, path)


def _build(cls, mapping, path, default):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        key_path = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(f"unknown key '{key_path}'")
        kwargs[key] = _coerce(value, getattr(default, key), key_path)
    try:
        return dataclasses.replace(default, **kwargs)
    except (InvalidInputError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(mapping) -> RunConfig:
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError("config root must be a mapping")
    return _build(RunConfig, mapping, "", RunConfig())


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


# Provenance of each default, keyed by dotted path. "method" marks constants
# of the published method, "reconstructed" marks values the method leaves
# unstated, "simulation" marks knobs of the synthetic setup.
PROVENANCE = {
    "data.ranges": "method: side ranges and N=32 bins per preset",
    "data.labeled_fraction": "method: 20% labeled split",
    "head.alpha1": "method",
    "head.topk": "reconstructed: k of the top-k statistics",
    "head.grid": "reconstructed: G x G points per side",
    "head.k_nn": "reconstructed: neighbors for feature interpolation",
    "selection.tau_obj": "method",
    "selection.cls_bounds": "method",
    "selection.iou_bounds": "method",
    "selection.alpha2": "method",
    "selection.nms_overlap": "method",
    "selection.fixed_iou": "method: outdoor mode uses fixed per-class IoU thresholds",
    "train.beta": "reconstructed",
    "train.ssl_iterations": "simulation",
    "train.bias_lr": "simulation",
    "train.ratio": "reconstructed: labeled:unlabeled scenes per iteration",
    "train.ema_momentum": "reconstructed",
    "train.smooth_l1_delta": "reconstructed",
    "train.c1": "reconstructed",
    "train.hidden": "reconstructed",
    "scene": "simulation",
    "teacher_noise": "simulation",
    "student_noise": "simulation",
}


def default_config_yaml() -> str:
    """The default configuration as commented YAML."""
    lines = ["# sideaware run configuration (lengths in meters, angles in radians)"]
    data = config_to_dict(RunConfig())
    for section, value in data.items():
        if not isinstance(value, dict):
            lines.append(f"{section}: {yaml.safe_dump(value).splitlines()[0]}")
            continue
        note = PROVENANCE.get(section)
        lines.append(f"{section}:" + (f"  # {note}" if note else ""))
        for key, v in value.items():
            dumped = yaml.safe_dump({key: v}, default_flow_style=True, width=200).strip()
            dumped = dumped[1:-1] if dumped.startswith("{") else dumped
            note = PROVENANCE.get(f"{section}.{key}")
            lines.append(f"  {dumped}" + (f"  # {note}" if note else ""))
    return "\n".join(lines) + "\n"
