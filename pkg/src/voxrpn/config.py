"""Run configuration and the default constants.

Each constant is defined once here; module defaults and the
:class:`RunConfig` sections both refer back to these names.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_VERSION = "1"

# --- sampling ---------------------------------------------------------------
ALPHA_DELTA = 0.01
N_FIXED_DIRECTIONS = 18
SH_DEGREE = 3
SH_DIRECTIONS = 300
# --- anchors / assignment -----------------------------------------------------
ANCHOR_RATIOS_BASE = ((1, 1, 1), (1, 1, 2), (1, 1, 3), (2, 2, 1), (3, 3, 1))
ANCHOR_SHORTEST_SIDES = (8, 16, 32, 64)
ANCHOR_POS_IOU = 0.35
ANCHOR_NEG_IOU = 0.2
MINIBATCH_SIZE = 256
MINIBATCH_POS_FRACTION = 0.5
# --- losses -------------------------------------------------------------------
LAMBDA_ANCHOR = 5.0
LAMBDA_FCOS = 1.0
LAMBDA_OBJECTNESS = 5.0
# --- optimisation -------------------------------------------------------------
LEARNING_RATE = 3e-4
WEIGHT_DECAY = 1e-3
REFINE_LEARNING_RATE = 1e-4
REFINE_WEIGHT_DECAY = 1e-4
# --- augmentation -------------------------------------------------------------
FLIP_PROB = 0.5
ROT90_PROB = 0.5
JITTER_PROB = 0.5
JITTER_RANGE = math.pi / 18
# --- test-time ----------------------------------------------------------------
TOPK_PER_LEVEL = 2500
NMS_IOU = 0.1
POST_NMS_TOPK = 2500
REFINE_INPUT_NMS_IOU = 0.3
ROI_POSITIVE_IOU = 0.25
REFINE_SCORE = 0.5
EVAL_IOUS = (0.25, 0.5)


class ConfigError(ValueError):
    pass


@dataclass
class SceneSection:
    room_size: tuple = (4.8, 4.8, 4.8)
    count_range: tuple = (1, 4)
    size_range: tuple = (0.6, 2.0)
    height_range: tuple = (0.5, 1.8)
    yaw_range: tuple = (-math.pi / 2, math.pi / 2)
    interior_sigma: float = 300.0
    ambient_sigma: float = 2.0
    noise_amplitude: float = 0.0
    hollow_shell: float | None = None
    max_pair_iou: float = 0.05
    n_general_cameras: int = 0
    n_closeup_per_object: int = 0


@dataclass
class SamplingSection:
    strategy: str = "density"
    target_longest: int = 48
    margin_fraction: float = 0.0
    sh_directions: int = SH_DIRECTIONS
    use_room_volume: bool = True


@dataclass
class AnchorSection:
    shortest_sides: tuple = ANCHOR_SHORTEST_SIDES
    ratios: tuple = ANCHOR_RATIOS_BASE
    pos_iou: float = ANCHOR_POS_IOU
    neg_iou: float = ANCHOR_NEG_IOU
    minibatch: int = MINIBATCH_SIZE
    pos_fraction: float = MINIBATCH_POS_FRACTION


@dataclass
class HeadSection:
    variant: str = "fcos"
    stage_channels: tuple = (8, 16, 32)
    stage_strides: tuple = (1, 2, 2)
    fpn_channels: int = 16
    fpn_levels: int = 2
    head_convs: int = 2
    center_radius: float = 1.5
    level_bounds: tuple = (16.0, 32.0, 64.0)


@dataclass
class TrainSection:
    steps: int = 1500
    learning_rate: float = LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    lambda_anchor: float = LAMBDA_ANCHOR
    lambda_fcos: float = LAMBDA_FCOS
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_beta: float = 1.0
    reg_loss: str = "iou"
    anchor_reg_loss: str = "smooth_l1"
    flip_prob: float = FLIP_PROB
    rot90_prob: float = ROT90_PROB
    jitter_prob: float = JITTER_PROB
    jitter_range: float = JITTER_RANGE
    proj_loss_weight: float = 0.0
    checkpoint_every: int = 0
    dtype: str = "float32"


@dataclass
class TestSection:
    topk_per_level: int = TOPK_PER_LEVEL
    nms_iou: float = NMS_IOU
    post_nms_topk: int = POST_NMS_TOPK
    centerness_fusion: bool = False
    roi_enlarge: float = 1.2
    roi_base_size: float = 16.0
    refine_input_nms_iou: float = REFINE_INPUT_NMS_IOU
    refine_positive_iou: float = ROI_POSITIVE_IOU
    refine_score: float = REFINE_SCORE
    refine_learning_rate: float = REFINE_LEARNING_RATE
    refine_weight_decay: float = REFINE_WEIGHT_DECAY
    lambda_objectness: float = LAMBDA_OBJECTNESS
    refine_steps: int = 300
    refine_hidden: int = 64


@dataclass
class EvalSection:
    ious: tuple = EVAL_IOUS


_SECTIONS = {
    "scene": SceneSection,
    "sampling": SamplingSection,
    "anchors": AnchorSection,
    "head": HeadSection,
    "train": TrainSection,
    "test": TestSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    anchors: AnchorSection = field(default_factory=AnchorSection)
    head: HeadSection = field(default_factory=HeadSection)
    train: TrainSection = field(default_factory=TrainSection)
    test: TestSection = field(default_factory=TestSection)
    eval: EvalSection = field(default_factory=EvalSection)
    version: str = CONFIG_VERSION

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"version": self.version}
        for name in _SECTIONS:
            out[name] = {k: _jsonable(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(obj) - set(_SECTIONS) - {"version"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        version = obj.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            values = obj.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be an object")
            names = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - names
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            defaults = section_cls()
            converted = {k: _like(getattr(defaults, k), v) for k, v in values.items()}
            kwargs[name] = section_cls(**converted)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
        return cls.from_json(obj)


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    return v


def _like(default, value):
    """Coerce a JSON value to the shape of ``default`` (tuples stay tuples)."""
    if value == "inf":
        return math.inf
    if isinstance(default, tuple):
        return tuple(_like(default[0] if default else None, v) if isinstance(v, list) else
                     (math.inf if v == "inf" else v) for v in value)
    return value
