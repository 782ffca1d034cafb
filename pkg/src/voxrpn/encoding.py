"""Anchors, box parameterizations, and label assignment.

Two heads share the midpoint-offset description of a yaw-rotated box: the
xy AABB of its footprint plus ``(da, db)``, the x offset of the top vertex
and the y offset of the right vertex. For axis-aligned footprints the top
vertex is taken as the one with larger x and the right vertex as the one
with smaller y, which is the limit of a small positive yaw.

Batched functions use ``(N, 7)`` box arrays ``[cx, cy, cz, w, l, h, yaw]``;
the scalar wrappers take and return :class:`~voxrpn.geometry.Obb`.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import (ANCHOR_NEG_IOU, ANCHOR_POS_IOU, ANCHOR_RATIOS_BASE, ANCHOR_SHORTEST_SIDES,
                     MINIBATCH_POS_FRACTION, MINIBATCH_SIZE)
from .geometry import Obb, canonicalize_params, corners_batch, rectify_batch, rotated_iou_matrix, wrap_angle

MAX_LOG_DELTA = 20.0
MIN_DISTANCE = 1e-4
POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class EncodingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# midpoint-offset description


def midpoint_params(params) -> np.ndarray:
    """``(N, 7)`` boxes -> ``(N, 8)``: ``[x, y, z, w_aabb, l_aabb, h, da, db]``."""
    p = np.atleast_2d(np.asarray(params, dtype=np.float64))
    quad = corners_batch(p)[:, :4, :2]
    xs, ys = quad[..., 0], quad[..., 1]
    x0, x1 = xs.min(axis=1), xs.max(axis=1)
    y0, y1 = ys.min(axis=1), ys.max(axis=1)
    tol = (1e-9 * (p[:, 3] + p[:, 4]))[:, None]
    # top vertex: max y, ties -> larger x
    top_x = np.where(ys >= y1[:, None] - tol, xs, -np.inf).max(axis=1)
    # right vertex: max x, ties -> smaller y
    right_y = np.where(xs >= x1[:, None] - tol, ys, np.inf).min(axis=1)
    xc, yc = p[:, 0], p[:, 1]
    return np.stack([xc, yc, p[:, 2], x1 - x0, y1 - y0, p[:, 5], top_x - xc, right_y - yc], axis=1)


def midpoint_quads(m) -> np.ndarray:
    """Counter-clockwise parallelogram ``(N, 4, 2)``: right, top, left, bottom vertices."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    x, y, w, l, da, db = m[:, 0], m[:, 1], m[:, 3], m[:, 4], m[:, 6], m[:, 7]
    return np.stack([
        np.stack([x + w / 2, y + db], axis=1),
        np.stack([x + da, y + l / 2], axis=1),
        np.stack([x - w / 2, y - db], axis=1),
        np.stack([x - da, y - l / 2], axis=1),
    ], axis=1)


def boxes_from_midpoint(m) -> tuple[np.ndarray, np.ndarray]:
    """Rectify midpoint descriptions into boxes; invalid rows fall back to their xy AABB."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    center, w, l, yaw, valid = rectify_batch(midpoint_quads(m))
    out = np.stack([center[:, 0], center[:, 1], m[:, 2], w, l, m[:, 5], yaw], axis=1)
    fallback = np.stack([m[:, 0], m[:, 1], m[:, 2], m[:, 3], m[:, 4], m[:, 5], np.zeros(len(m))], axis=1)
    out = np.where(valid[:, None], out, fallback)
    return canonicalize_params(out), valid


# ---------------------------------------------------------------------------
# anchors


def expand_ratios(base: Sequence[Sequence[float]] = ANCHOR_RATIOS_BASE) -> list[tuple]:
    """All distinct permutations of the base ratios, in first-seen order."""
    out: list[tuple] = []
    for r in base:
        for perm in itertools.permutations(r):
            if perm not in out:
                out.append(perm)
    return out


@dataclass(frozen=True)
class Anchor:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    level: int

    @property
    def params(self) -> np.ndarray:
        return np.array([*self.center, *self.size, 0.0])


def anchor_shapes(shortest_side: float, ratios: Sequence[tuple]) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    return shortest_side * r / r.min(axis=1, keepdims=True)


def generate_anchors(level_dims: Sequence[Sequence[int]], level_strides: Sequence[int],
                     shortest_sides: Sequence[float] = ANCHOR_SHORTEST_SIDES,
                     ratios: Sequence[tuple] | None = None) -> list[np.ndarray]:
    """Per-level anchor arrays ``(W*L*H*A, 7)`` (yaw column zero), voxel-major then anchor.

    Positions are in input-voxel units: feature voxel ``v`` of a stride-``s``
    level sits at ``s * v``.
    """
    ratios = expand_ratios() if ratios is None else expand_ratios(ratios)
    if len(set(ratios)) != len(ratios):
        raise EncodingError("duplicate anchor ratios")
    if len(shortest_sides) < len(level_dims):
        raise EncodingError("need one shortest side per level")
    out = []
    for dims, stride, side in zip(level_dims, level_strides, shortest_sides):
        centers = stride * np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), -1).reshape(-1, 3)
        shapes = anchor_shapes(side, ratios)
        A = len(shapes)
        arr = np.zeros((len(centers) * A, 7))
        arr[:, :3] = np.repeat(centers, A, axis=0)
        arr[:, 3:6] = np.tile(shapes, (len(centers), 1))
        out.append(arr)
    return out


def encode_anchor_batch(gt, anchors) -> np.ndarray:
    m = midpoint_params(gt)
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    return np.stack([
        (m[:, 0] - a[:, 0]) / a[:, 3],
        (m[:, 1] - a[:, 1]) / a[:, 4],
        (m[:, 2] - a[:, 2]) / a[:, 5],
        np.log(m[:, 3] / a[:, 3]),
        np.log(m[:, 4] / a[:, 4]),
        np.log(m[:, 5] / a[:, 5]),
        m[:, 6] / m[:, 3],
        m[:, 7] / m[:, 4],
    ], axis=1)


def anchor_deltas_to_midpoint(t, anchors) -> tuple[np.ndarray, np.ndarray]:
    """Deltas -> midpoint description, clamping oversized log-size deltas. Returns ``(m, clamped)``."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    logs = t[:, 3:6]
    clamped = np.any(np.abs(logs) > MAX_LOG_DELTA, axis=1)
    logs = np.clip(logs, -MAX_LOG_DELTA, MAX_LOG_DELTA)
    size = a[:, 3:6] * np.exp(logs)
    m = np.stack([
        a[:, 0] + t[:, 0] * a[:, 3],
        a[:, 1] + t[:, 1] * a[:, 4],
        a[:, 2] + t[:, 2] * a[:, 5],
        size[:, 0], size[:, 1], size[:, 2],
        t[:, 6] * size[:, 0],
        t[:, 7] * size[:, 1],
    ], axis=1)
    return m, clamped


def decode_anchor_batch(t, anchors) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(boxes (N, 7), ok)``; ``ok`` is False for clamped or unrectifiable rows."""
    m, clamped = anchor_deltas_to_midpoint(t, anchors)
    boxes, valid = boxes_from_midpoint(m)
    return boxes, valid & ~clamped


def encode_anchor(gt: Obb, anchor: Anchor | np.ndarray) -> np.ndarray:
    a = anchor.params if isinstance(anchor, Anchor) else np.asarray(anchor, dtype=np.float64)
    return encode_anchor_batch(gt.params, a)[0]


def decode_anchor(t, anchor: Anchor | np.ndarray) -> Obb:
    a = anchor.params if isinstance(anchor, Anchor) else np.asarray(anchor, dtype=np.float64)
    boxes, _ = decode_anchor_batch(np.asarray(t, dtype=np.float64), a)
    return Obb.from_params(boxes[0])


@dataclass
class AssignmentResult:
    labels: np.ndarray  # int8: 1 positive, 0 negative, -1 ignore
    matched: np.ndarray  # gt index for positives, -1 elsewhere
    max_iou: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.nonzero(self.labels == POSITIVE)[0]

    @property
    def negatives(self) -> np.ndarray:
        return np.nonzero(self.labels == NEGATIVE)[0]


def assign_anchors(anchors, gts, pos_thresh: float = ANCHOR_POS_IOU,
                   neg_thresh: float = ANCHOR_NEG_IOU) -> AssignmentResult:
    """Max-IoU labelling with the best-anchor rule guaranteeing each GT a positive."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    if anchors.shape[1] == 6:
        anchors = np.concatenate([anchors, np.zeros((len(anchors), 1))], axis=1)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    n = len(anchors)
    if len(gts) == 0:
        return AssignmentResult(np.zeros(n, np.int8), np.full(n, -1), np.zeros(n))
    iou = rotated_iou_matrix(anchors, gts, min_iou=neg_thresh)
    for g in np.nonzero(iou.max(axis=0) < neg_thresh)[0]:
        iou[:, g] = rotated_iou_matrix(anchors, gts[g:g + 1])[:, 0]
    max_iou = iou.max(axis=1)
    matched = iou.argmax(axis=1)
    labels = np.full(n, IGNORE, dtype=np.int8)
    labels[max_iou < neg_thresh] = NEGATIVE
    labels[max_iou > pos_thresh] = POSITIVE
    col_max = iou.max(axis=0)
    for g in range(len(gts)):
        if col_max[g] > 0:
            best = np.nonzero(iou[:, g] >= col_max[g] * (1 - 1e-9))[0]
        else:
            best = np.array([int(np.argmin(np.linalg.norm(anchors[:, :3] - gts[g, :3], axis=1)))])
        fresh = best[labels[best] != POSITIVE]
        labels[best] = POSITIVE
        matched[fresh] = g
    matched = np.where(labels == POSITIVE, matched, -1)
    return AssignmentResult(labels, matched, max_iou)


def sample_minibatch(labels, n: int = MINIBATCH_SIZE, pos_fraction: float = MINIBATCH_POS_FRACTION,
                     seed=0) -> np.ndarray:
    """Positives up to ``n * pos_fraction``, the rest negatives, uniformly without replacement."""
    labels = labels.labels if isinstance(labels, AssignmentResult) else np.asarray(labels)
    rng = np.random.default_rng(seed)
    pos = np.nonzero(labels == POSITIVE)[0]
    neg = np.nonzero(labels == NEGATIVE)[0]
    if len(neg) == 0:
        raise EncodingError("no negative anchors available: degenerate scene")
    n_pos = min(len(pos), int(n * pos_fraction))
    n_neg = min(len(neg), n - n_pos)
    chosen_pos = rng.choice(pos, n_pos, replace=False) if n_pos else np.zeros(0, dtype=int)
    chosen_neg = rng.choice(neg, n_neg, replace=False)
    return np.sort(np.concatenate([chosen_pos, chosen_neg]))


# ---------------------------------------------------------------------------
# anchor-free targets


@dataclass
class FcosTarget:
    t: np.ndarray  # x0, y0, z0, x1, y1, z1, da, db
    centerness: float
    label: int = 1
    gt_index: int | None = None


def centerness(dist) -> np.ndarray:
    """``sqrt`` of the product of min/max ratios over the three axes; ``dist`` is ``(N, 6)``."""
    d = np.atleast_2d(np.asarray(dist, dtype=np.float64))
    lo = np.minimum(d[:, 0:3], d[:, 3:6])
    hi = np.maximum(d[:, 0:3], d[:, 3:6])
    ratio = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 0.0)
    return np.sqrt(np.clip(np.prod(ratio, axis=1), 0.0, 1.0))


def encode_fcos_batch(positions, gt) -> np.ndarray:
    """``(N, 8)`` regression targets of positions against paired boxes."""
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    m = midpoint_params(gt)
    half = m[:, 3:6] / 2
    lo = m[:, :3] - half
    hi = m[:, :3] + half
    return np.concatenate([pos - lo, hi - pos, (m[:, 0] + m[:, 6] - pos[:, 0])[:, None],
                           (m[:, 1] + m[:, 7] - pos[:, 1])[:, None]], axis=1)


def fcos_to_midpoint(positions, t) -> np.ndarray:
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    d = np.maximum(t[:, :6], MIN_DISTANCE)
    lo = pos - d[:, :3]
    hi = pos + d[:, 3:6]
    c = (lo + hi) / 2
    return np.stack([c[:, 0], c[:, 1], c[:, 2], hi[:, 0] - lo[:, 0], hi[:, 1] - lo[:, 1], hi[:, 2] - lo[:, 2],
                     pos[:, 0] + t[:, 6] - c[:, 0], pos[:, 1] + t[:, 7] - c[:, 1]], axis=1)


def decode_fcos_batch(positions, t) -> tuple[np.ndarray, np.ndarray]:
    return boxes_from_midpoint(fcos_to_midpoint(positions, t))


def encode_fcos(pos, gt: Obb) -> FcosTarget:
    t = encode_fcos_batch(np.asarray(pos, dtype=np.float64), gt.params)[0]
    if np.any(t[:6] < 0):
        raise EncodingError(f"position {pos} lies outside the box's axis-aligned hull")
    return FcosTarget(t, float(centerness(t[:6])[0]))


def decode_fcos(pos, t) -> Obb:
    boxes, _ = decode_fcos_batch(np.asarray(pos, dtype=np.float64), np.asarray(t, dtype=np.float64))
    return Obb.from_params(boxes[0])


def level_ranges(n_levels: int, bounds: Sequence[float] = (16.0, 32.0, 64.0)) -> list[tuple[float, float]]:
    """``(lo, hi]`` regression-distance ranges: the first ``n_levels - 1`` bounds then infinity."""
    edges = [0.0, *list(bounds)[: n_levels - 1], math.inf]
    return [(edges[i], edges[i + 1]) for i in range(n_levels)]


@dataclass
class FcosAssignment:
    labels: np.ndarray  # (N,) 0/1
    matched: np.ndarray  # (N,) gt index or -1
    targets: np.ndarray  # (N, 8)
    centerness: np.ndarray  # (N,)


def assign_fcos(level_positions: Sequence[np.ndarray], level_strides: Sequence[int], gts,
                center_radius: float = 1.5, ranges: Sequence[tuple[float, float]] | None = None) -> list[FcosAssignment]:
    """Center-sampled, scale-bucketed positives; a voxel in several boxes goes to the smallest."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    ranges = ranges if ranges is not None else level_ranges(len(level_positions))
    out = []
    for pos, stride, (lo_r, hi_r) in zip(level_positions, level_strides, ranges):
        pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        labels = np.zeros(n, dtype=np.int8)
        matched = np.full(n, -1)
        targets = np.zeros((n, 8))
        ctr = np.zeros(n)
        if len(gts):
            m = midpoint_params(gts)
            half = m[:, 3:6] / 2
            d_lo = pos[:, None, :] - (m[None, :, :3] - half[None])  # (N,G,3)
            d_hi = (m[None, :, :3] + half[None]) - pos[:, None, :]
            inside = np.all((d_lo > 0) & (d_hi > 0), axis=2)
            near = np.all(np.abs(pos[:, None, :] - m[None, :, :3]) < center_radius * stride, axis=2)
            max_d = np.maximum(d_lo, d_hi).max(axis=2)
            ok = inside & near & (max_d > lo_r) & (max_d <= hi_r)
            vol = np.prod(gts[:, 3:6], axis=1)
            cost = np.where(ok, vol[None, :], np.inf)
            best = cost.argmin(axis=1)
            pos_mask = np.isfinite(cost.min(axis=1))
            idx = np.nonzero(pos_mask)[0]
            labels[idx] = 1
            matched[idx] = best[idx]
            if len(idx):
                targets[idx] = encode_fcos_batch(pos[idx], gts[best[idx]])
                ctr[idx] = centerness(targets[idx, :6])
        out.append(FcosAssignment(labels, matched, targets, ctr))
    return out


# ---------------------------------------------------------------------------
# roi offsets


def encode_roi_batch(gt, roi) -> np.ndarray:
    g = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    r = np.atleast_2d(np.asarray(roi, dtype=np.float64))
    dx, dy = g[:, 0] - r[:, 0], g[:, 1] - r[:, 1]
    c, s = np.cos(r[:, 6]), np.sin(r[:, 6])
    dtheta = wrap_angle(g[:, 6] - r[:, 6])
    return np.stack([
        (dx * c + dy * s) / r[:, 3],
        (dy * c - dx * s) / r[:, 4],
        (g[:, 2] - r[:, 2]) / r[:, 5],
        np.log(g[:, 3] / r[:, 3]),
        np.log(g[:, 4] / r[:, 4]),
        np.log(g[:, 5] / r[:, 5]),
        dtheta / (2 * math.pi),
    ], axis=1)


def decode_roi_batch(g, roi) -> np.ndarray:
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    r = np.atleast_2d(np.asarray(roi, dtype=np.float64))
    c, s = np.cos(r[:, 6]), np.sin(r[:, 6])
    lx, ly = g[:, 0] * r[:, 3], g[:, 1] * r[:, 4]
    out = np.stack([
        r[:, 0] + lx * c - ly * s,
        r[:, 1] + lx * s + ly * c,
        r[:, 2] + g[:, 2] * r[:, 5],
        r[:, 3] * np.exp(np.clip(g[:, 3], -MAX_LOG_DELTA, MAX_LOG_DELTA)),
        r[:, 4] * np.exp(np.clip(g[:, 4], -MAX_LOG_DELTA, MAX_LOG_DELTA)),
        r[:, 5] * np.exp(np.clip(g[:, 5], -MAX_LOG_DELTA, MAX_LOG_DELTA)),
        r[:, 6] + 2 * math.pi * g[:, 6],
    ], axis=1)
    return canonicalize_params(out)


def encode_roi(gt: Obb, roi: Obb) -> np.ndarray:
    return encode_roi_batch(gt.params, roi.params)[0]


def decode_roi(g, roi: Obb) -> Obb:
    return Obb.from_params(decode_roi_batch(g, roi.params)[0])


# ---------------------------------------------------------------------------
# debug dumps


def write_target_dump(path: str | Path, records: Sequence[dict]) -> None:
    """JSON lines, one positive sample per line: ``{level, index, t, cstar?, gt_index}``."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def fcos_target_records(assignments: Sequence[FcosAssignment]) -> list[dict]:
    recs = []
    for level, a in enumerate(assignments):
        for i in np.nonzero(a.labels == 1)[0]:
            recs.append({"level": level, "index": int(i), "t": a.targets[i].tolist(),
                         "cstar": float(a.centerness[i]), "gt_index": int(a.matched[i])})
    return recs


def anchor_target_records(assignment: AssignmentResult, targets: np.ndarray, level_of: np.ndarray,
                          offsets: Sequence[int]) -> list[dict]:
    recs = []
    for i in assignment.positives:
        lvl = int(level_of[i])
        recs.append({"level": lvl, "index": int(i - offsets[lvl]), "t": targets[i].tolist(),
                     "gt_index": int(assignment.matched[i])})
    return recs
