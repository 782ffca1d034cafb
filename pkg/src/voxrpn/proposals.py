"""Test-time proposal pipeline, rotated ROI pooling, and the objectness refinement stage.

Proposals are carried as a :class:`ProposalSet` of parallel arrays. Boxes
are in voxel-index units inside the pipeline and in world units once
:func:`propose` hands them back.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .config import RunConfig
from .encoding import decode_anchor_batch, decode_fcos_batch, decode_roi_batch, encode_roi_batch, generate_anchors
from .field_sampler import VoxelGrid
from .geometry import Aabb, Obb, aabb_batch, rotated_iou_matrix, rotated_iou_pairs
from .losses import LossConfig, objectness_loss
from .micronet import AdamW, Checkpoint, LevelOutput, MicroNet, NetError

POOL_SIZE = 3


class ProposalError(ValueError):
    pass


@dataclass(frozen=True)
class Proposal:
    box: Obb
    score: float
    level: int
    centerness: float | None = None

    def to_json(self) -> dict:
        out = {"box": self.box.to_json(), "score": self.score, "level": self.level}
        if self.centerness is not None:
            out["centerness"] = self.centerness
        return out


@dataclass
class ProposalSet:
    boxes: np.ndarray  # (N, 7)
    scores: np.ndarray  # (N,)
    levels: np.ndarray  # (N,) int
    indices: np.ndarray  # (N,) int, linear index within the level
    centerness: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.levels = np.asarray(self.levels, dtype=np.int64).reshape(-1)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        n = len(self.boxes)
        if not (len(self.scores) == len(self.levels) == len(self.indices) == n):
            raise ProposalError("proposal arrays differ in length")
        if self.centerness is not None:
            self.centerness = np.asarray(self.centerness, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.boxes)

    def take(self, idx) -> "ProposalSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ProposalSet(self.boxes[idx], self.scores[idx], self.levels[idx], self.indices[idx],
                           None if self.centerness is None else self.centerness[idx])

    @classmethod
    def empty(cls) -> "ProposalSet":
        return cls(np.zeros((0, 7)), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, sets: Sequence["ProposalSet"]) -> "ProposalSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        ctr = None if any(s.centerness is None for s in sets) else np.concatenate([s.centerness for s in sets])
        return cls(np.concatenate([s.boxes for s in sets]), np.concatenate([s.scores for s in sets]),
                   np.concatenate([s.levels for s in sets]), np.concatenate([s.indices for s in sets]), ctr)

    def to_list(self) -> list[Proposal]:
        return [Proposal(Obb.from_params(b), float(s), int(l),
                         None if self.centerness is None else float(self.centerness[i]))
                for i, (b, s, l) in enumerate(zip(self.boxes, self.scores, self.levels))]

    def with_boxes(self, boxes) -> "ProposalSet":
        return ProposalSet(boxes, self.scores, self.levels, self.indices, self.centerness)


# ---------------------------------------------------------------------------
# decode / filter / select


def decode_all(outputs: Sequence[LevelOutput], variant: str, anchors: Sequence[np.ndarray] | None = None,
               centerness_fusion: bool = False) -> ProposalSet:
    """One proposal per anchor or per feature voxel, in voxel-index units."""
    sets = []
    for lvl, out in enumerate(outputs):
        scores = np.asarray(out.scores.value, dtype=np.float64)
        reg = np.asarray(out.regression.value, dtype=np.float64)
        if variant == "anchor":
            if anchors is None:
                raise ProposalError("anchor-based decoding needs the anchor set")
            boxes, _ = decode_anchor_batch(reg, anchors[lvl])
            ctr = None
        else:
            idx = np.stack(np.meshgrid(*[np.arange(n) for n in out.dims], indexing="ij"), -1).reshape(-1, 3)
            boxes, _ = decode_fcos_batch(out.stride * idx.astype(np.float64), reg)
            ctr = np.asarray(out.centerness.value, dtype=np.float64)
            if centerness_fusion:
                scores = np.sqrt(scores * ctr)
        sets.append(ProposalSet(boxes, scores, np.full(len(boxes), lvl), np.arange(len(boxes)), ctr))
    return ProposalSet.concat(sets)


def filter_in_scene(ps: ProposalSet, scene: Aabb) -> ProposalSet:
    """Keep proposals whose centers lie in the closed scene box."""
    c = ps.boxes[:, :3]
    keep = np.all((c >= np.asarray(scene.min)) & (c <= np.asarray(scene.max)), axis=1)
    return ps.take(np.nonzero(keep)[0])


def _ranked(ps: ProposalSet, idx: np.ndarray) -> np.ndarray:
    """``idx`` sorted by descending score, ties by (level, index)."""
    return idx[np.lexsort((ps.indices[idx], ps.levels[idx], -ps.scores[idx]))]


def topk_per_level(ps: ProposalSet, k: int) -> ProposalSet:
    keep = []
    for lvl in np.unique(ps.levels):
        idx = np.nonzero(ps.levels == lvl)[0]
        keep.append(_ranked(ps, idx)[:k])
    if not keep:
        return ps
    return ps.take(_ranked(ps, np.concatenate(keep)))


def final_topk(ps: ProposalSet, k: int) -> ProposalSet:
    return ps.take(_ranked(ps, np.arange(len(ps)))[:k])


def nms_rotated(ps: ProposalSet, iou_thresh: float, topk: int | None = None) -> ProposalSet:
    """Greedy suppression in descending score order; ``IoU > iou_thresh`` suppresses."""
    order = _ranked(ps, np.arange(len(ps)))
    boxes = ps.boxes[order]
    lo, hi = aabb_batch(boxes)
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(i)
        if topk is not None and len(kept) >= topk:
            break
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if len(rest) == 0:
            continue
        near = rest[np.all((lo[rest] < hi[i]) & (hi[rest] > lo[i]), axis=1)]
        if len(near):
            iou = rotated_iou_pairs(np.broadcast_to(boxes[i], (len(near), 7)), boxes[near])
            alive[near[iou > iou_thresh]] = False
    return ps.take(order[kept])


# ---------------------------------------------------------------------------
# rotated roi pooling


def roi_level(roi: np.ndarray, n_levels: int, base_size: float = 16.0) -> int:
    """Coarser levels for larger ROIs: ``floor(log2(cbrt(volume) / base_size))``, clipped to the pyramid."""
    scale = float(np.cbrt(np.prod(roi[3:6])))
    if not scale > 0:
        raise ProposalError(f"degenerate roi {roi.tolist()}")
    lvl = math.floor(math.log2(scale / base_size))
    return int(min(max(lvl, 0), n_levels - 1))


def trilinear(volume: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample ``volume (C, W, L, H)`` at fractional voxel coordinates ``pts (P, 3)``; zero outside."""
    C = volume.shape[0]
    dims = np.asarray(volume.shape[1:])
    base = np.floor(pts).astype(np.int64)
    frac = pts - base
    out = np.zeros((C, len(pts)), dtype=np.float64)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < dims), axis=1)
        if not ok.any():
            continue
        i = np.where(ok[:, None], idx, 0)
        vals = volume[:, i[:, 0], i[:, 1], i[:, 2]]
        out += vals * (w * ok)[None, :]
    return out


def roi_lattice(roi: np.ndarray, enlarge: float = 1.2, n: int = POOL_SIZE) -> np.ndarray:
    """Sample points ``(n**3, 3)`` at the bin centers of the enlarged, rotated roi."""
    roi = np.asarray(roi, dtype=np.float64)
    u = (np.arange(n) + 0.5) / n - 0.5
    g = np.stack(np.meshgrid(u, u, u, indexing="ij"), -1).reshape(-1, 3) * roi[3:6] * enlarge
    c, s = math.cos(roi[6]), math.sin(roi[6])
    x = g[:, 0] * c - g[:, 1] * s
    y = g[:, 0] * s + g[:, 1] * c
    return roi[:3] + np.stack([x, y, g[:, 2]], axis=1)


def roi_pool(pyramid: Sequence[np.ndarray], strides: Sequence[int], roi, enlarge: float = 1.2,
             base_size: float = 16.0, level: int | None = None) -> np.ndarray:
    """Pool ``(C, 3, 3, 3)`` features for one roi given in voxel-index units."""
    roi = roi.params if isinstance(roi, Obb) else np.asarray(roi, dtype=np.float64)
    lvl = roi_level(roi, len(pyramid), base_size) if level is None else level
    pts = roi_lattice(roi, enlarge) / strides[lvl]
    vals = trilinear(pyramid[lvl], pts)
    return vals.reshape(-1, POOL_SIZE, POOL_SIZE, POOL_SIZE)


def roi_pool_batch(pyramid, strides, rois, enlarge: float = 1.2, base_size: float = 16.0) -> np.ndarray:
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 7)
    C = pyramid[0].shape[0]
    out = np.zeros((len(rois), C * POOL_SIZE ** 3))
    for i, r in enumerate(rois):
        out[i] = roi_pool(pyramid, strides, r, enlarge, base_size).reshape(-1)
    return out


# ---------------------------------------------------------------------------
# refinement head


@dataclass
class RefineHead:
    """Two-layer perceptron on flattened roi features -> (score logit, 7 offsets)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, in_features: int, hidden: int = 64, seed: int = 0) -> "RefineHead":
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((in_features, hidden)) * math.sqrt(2.0 / in_features)
        w2 = rng.standard_normal((hidden, 8)) * 0.01
        return cls(w1, np.zeros(hidden), w2, np.zeros(8))

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, feats: np.ndarray, tape: Tape | None = None):
        tape = tape if tape is not None else Tape(np.float64)
        P = {k: tape.var(v) for k, v in self.params.items()}
        h = ad.relu(tape.const(feats) @ P["w1"] + P["b1"])
        out = h @ P["w2"] + P["b2"]
        return ad.sigmoid(out[:, 0]), out[:, 1:], P

    def predict(self, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.maximum(feats @ self.w1 + self.b1, 0.0)
        out = h @ self.w2 + self.b2
        return 1.0 / (1.0 + np.exp(-out[:, 0])), out[:, 1:]

    def to_json(self) -> dict:
        return {k: v.tolist() for k, v in self.params.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "RefineHead":
        return cls(*(np.asarray(obj[k], dtype=np.float64) for k in ("w1", "b1", "w2", "b2")))


def roi_targets(rois: np.ndarray, gts: np.ndarray, pos_iou: float) -> tuple[np.ndarray, np.ndarray]:
    """Labels (IoU > ``pos_iou`` with any GT) and offsets to the best-overlapping GT."""
    labels = np.zeros(len(rois), dtype=np.int8)
    targets = np.zeros((len(rois), 7))
    if len(rois) == 0 or len(gts) == 0:
        return labels, targets
    iou = rotated_iou_matrix(rois, gts)
    best = iou.argmax(axis=1)
    pos = iou[np.arange(len(rois)), best] > pos_iou
    labels[pos] = 1
    if pos.any():
        targets[pos] = encode_roi_batch(gts[best[pos]], rois[pos])
    return labels, targets


def refine(ps: ProposalSet, pyramid, strides, head: RefineHead, score_thresh: float = 0.5,
           enlarge: float = 1.2, base_size: float = 16.0) -> ProposalSet:
    """Rescore and correct proposals; keep those scoring strictly above ``score_thresh``."""
    if len(ps) == 0:
        return ps
    feats = roi_pool_batch(pyramid, strides, ps.boxes, enlarge, base_size)
    scores, g = head.predict(feats)
    boxes = decode_roi_batch(g, ps.boxes)
    keep = np.nonzero(scores > score_thresh)[0]
    out = ProposalSet(boxes, scores, ps.levels, ps.indices, ps.centerness).take(keep)
    return out.take(_ranked(out, np.arange(len(out))))


# ---------------------------------------------------------------------------
# full pipeline


def rpn_proposals(net: MicroNet, grid: VoxelGrid, cfg: RunConfig, nms_iou: float | None = None,
                  topk: int | None = None) -> tuple[ProposalSet, dict]:
    """forward -> decode -> in-scene filter -> per-level top-k -> NMS -> final top-k (voxel units)."""
    t = cfg.test
    timings = {}
    t0 = time.perf_counter()
    outputs = net.forward(grid, requires_grad=False)
    t1 = time.perf_counter()
    anchors = None
    if net.spec.variant == "anchor":
        anchors = generate_anchors([o.dims for o in outputs], net.level_strides, cfg.anchors.shortest_sides,
                                   cfg.anchors.ratios)
    ps = decode_all(outputs, net.spec.variant, anchors, t.centerness_fusion)
    t2 = time.perf_counter()
    scene = Aabb(tuple([-0.5] * 3), tuple(float(d) - 0.5 for d in grid.dims))
    ps = filter_in_scene(ps, scene)
    k = t.topk_per_level if topk is None else topk
    ps = topk_per_level(ps, k)
    t3 = time.perf_counter()
    ps = nms_rotated(ps, t.nms_iou if nms_iou is None else nms_iou, t.post_nms_topk if topk is None else topk)
    t4 = time.perf_counter()
    timings.update(forward=1e3 * (t1 - t0), decode=1e3 * (t2 - t1), select=1e3 * (t3 - t2), nms=1e3 * (t4 - t3))
    return ps, timings


def propose(grid: VoxelGrid, ckpt: Checkpoint, cfg: RunConfig | None = None) -> tuple[ProposalSet, dict]:
    """World-space proposals for one grid, plus per-stage wall-clock timings in milliseconds."""
    cfg = cfg or RunConfig()
    if grid.channels != ckpt.spec.in_channels:
        raise NetError(f"grid has {grid.channels} channels but the checkpoint expects {ckpt.spec.in_channels}")
    ps, timings = rpn_proposals(ckpt.net(), grid, cfg)
    return ps.with_boxes(grid.to_world(ps.boxes)), timings


def proposals_to_json(ps: ProposalSet, timings: dict | None = None) -> dict:
    return {"proposals": [p.to_json() for p in ps.to_list()], "timings_ms": timings or {}}


def proposals_from_json(obj: dict) -> ProposalSet:
    items = obj.get("proposals")
    if not isinstance(items, list):
        raise ProposalError("proposal document lacks a 'proposals' list")
    if not items:
        return ProposalSet.empty()
    boxes = np.stack([Obb.from_json(p["box"]).params for p in items])
    scores = [float(p["score"]) for p in items]
    levels = [int(p.get("level", 0)) for p in items]
    return ProposalSet(boxes, scores, levels, np.arange(len(items)))


def save_proposals(path: str | Path, ps: ProposalSet, timings: dict | None = None) -> None:
    Path(path).write_text(json.dumps(proposals_to_json(ps, timings), indent=1))


def load_proposals(path: str | Path) -> ProposalSet:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ProposalError(f"{path}: invalid JSON at byte {exc.pos}") from exc
    return proposals_from_json(obj)


@dataclass
class RefineSample:
    grid: VoxelGrid
    boxes: np.ndarray  # world-space GT boxes


def train_refiner(ckpt: Checkpoint, samples: Sequence[RefineSample], cfg: RunConfig | None = None,
                  seed: int = 0, steps: int | None = None, log: list | None = None) -> RefineHead:
    """Fit the refinement head on frozen RPN features, one scene per step."""
    cfg = cfg or RunConfig()
    t = cfg.test
    net = ckpt.net()
    C = ckpt.spec.fpn_channels
    head = RefineHead.init(C * POOL_SIZE ** 3, t.refine_hidden, seed)
    opt = AdamW(t.refine_learning_rate, t.refine_weight_decay)
    lcfg = LossConfig(lambda_objectness=t.lambda_objectness, smooth_l1_beta=cfg.train.smooth_l1_beta)
    rng = np.random.default_rng(seed)
    cache = {}
    n_steps = t.refine_steps if steps is None else steps
    for step in range(n_steps):
        i = int(rng.integers(len(samples)))
        if i not in cache:
            s = samples[i]
            ps, _ = rpn_proposals(net, s.grid, cfg, nms_iou=t.refine_input_nms_iou)
            gts = s.grid.to_index(s.boxes)
            labels, targets = roi_targets(ps.boxes, gts, t.refine_positive_iou)
            feats = roi_pool_batch(net.pyramid, net.level_strides, ps.boxes, t.roi_enlarge, t.roi_base_size)
            cache[i] = (feats, labels, targets)
        feats, labels, targets = cache[i]
        if len(feats) == 0:
            continue
        tape = Tape(np.float64)
        scores, offsets, P = head.forward(feats, tape)
        total, bd = objectness_loss(scores, offsets, labels, targets, lcfg)
        tape.backward(total)
        opt.step(head.params, {k: v.grad for k, v in P.items()})
        if log is not None:
            log.append({"step": step, **bd.to_json()})
    return head
