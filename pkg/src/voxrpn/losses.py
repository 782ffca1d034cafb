"""Loss functions and the composite detector objectives.

The elementwise losses (:func:`bce`, :func:`smooth_l1`, :func:`focal`) are
plain numpy and return ``(loss, dloss/dinput)``. Composite objectives take
:class:`~voxrpn.autodiff.Var` predictions, record onto their tape, and return
a scalar ``Var`` plus a :class:`LossBreakdown`; call ``tape.backward`` on the
result to obtain gradients.

Classification losses act on probabilities, clamped to ``[1e-7, 1 - 1e-7]``;
the clamp has zero derivative outside that range.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .config import LAMBDA_ANCHOR, LAMBDA_FCOS, LAMBDA_OBJECTNESS
from .encoding import MIN_DISTANCE
from .geometry import Camera, Obb, corners_batch, footprints

PROB_EPS = 1e-7
REG_LOSSES = ("smooth_l1", "iou", "diou")


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda_anchor: float = LAMBDA_ANCHOR
    lambda_fcos: float = LAMBDA_FCOS
    lambda_objectness: float = LAMBDA_OBJECTNESS
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_beta: float = 1.0
    reg_loss: str = "iou"

    def __post_init__(self):
        if min(self.lambda_anchor, self.lambda_fcos, self.lambda_objectness) < 0:
            raise LossError("loss weights must be non-negative")
        if self.focal_gamma < 0 or not 0 < self.focal_alpha < 1:
            raise LossError("focal loss needs gamma >= 0 and alpha in (0, 1)")
        if self.smooth_l1_beta <= 0:
            raise LossError("smooth-L1 beta must be positive")
        if self.reg_loss not in REG_LOSSES:
            raise LossError(f"reg_loss must be one of {REG_LOSSES}, got {self.reg_loss!r}")


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    total: float
    n_pos: int
    n_cls: int
    n_reg: int
    ctr: float | None = None
    proj: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "extra" and v is not None}
        out.update(self.extra)
        return out


# ---------------------------------------------------------------------------
# elementwise losses


def _clamp(p):
    p = np.asarray(p, dtype=np.float64) if not isinstance(p, np.ndarray) else p
    inside = (p >= PROB_EPS) & (p <= 1 - PROB_EPS)
    return np.clip(p, PROB_EPS, 1 - PROB_EPS), inside


def bce(p, target):
    pc, inside = _clamp(p)
    t = np.asarray(target, dtype=pc.dtype)
    loss = -(t * np.log(pc) + (1 - t) * np.log1p(-pc))
    grad = (-(t / pc) + (1 - t) / (1 - pc)) * inside
    return loss, grad


def smooth_l1(x, beta: float = 1.0):
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    ax = np.abs(x)
    small = ax < beta
    loss = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(small, x / beta, np.sign(x))
    return loss, grad


def focal(p, target, gamma: float = 2.0, alpha: float = 0.25):
    pc, inside = _clamp(p)
    t = np.asarray(target, dtype=pc.dtype)
    q = 1 - pc
    log_p, log_q = np.log(pc), np.log1p(-pc)
    pos = -alpha * q ** gamma * log_p
    neg = -(1 - alpha) * pc ** gamma * log_q
    loss = t * pos + (1 - t) * neg
    # d/dp of each branch
    q_g1 = q ** (gamma - 1) if gamma != 0 else np.zeros_like(q)
    p_g1 = pc ** (gamma - 1) if gamma != 0 else np.zeros_like(pc)
    dpos = -alpha * (-gamma * q_g1 * log_p + q ** gamma / pc)
    dneg = -(1 - alpha) * (gamma * p_g1 * log_q - pc ** gamma / q)
    grad = (t * dpos + (1 - t) * dneg) * inside
    return loss, grad


def _on_tape(fn, x: Var, *args, **kwargs) -> Var:
    loss, grad = fn(x.value, *args, **kwargs)
    return x.tape.record(loss.astype(x.value.dtype), (x,), lambda g: (g * grad,))


def bce_var(p: Var, target) -> Var:
    return _on_tape(bce, p, target)


def smooth_l1_var(x: Var, beta: float = 1.0) -> Var:
    return _on_tape(smooth_l1, x, beta)


def focal_var(p: Var, target, gamma: float = 2.0, alpha: float = 0.25) -> Var:
    return _on_tape(focal, p, target, gamma, alpha)


# ---------------------------------------------------------------------------
# differentiable rotated overlap


def _cross(a: Var, b) -> Var:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def quad_overlap_area(P: Var, Q: np.ndarray) -> Var:
    """Intersection area of CCW quads ``P`` (differentiable, ``(N, 4, 2)``) and constant ``Q``.

    The vertex set and its ordering are fixed from the forward values; the
    area is then a smooth function of ``P`` until the topology changes.
    """
    pv = P.value.astype(np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    n = len(pv)
    tape = P.tape
    # discrete structure from the reference implementation's rules
    scale = np.maximum(np.abs(pv).max(axis=(1, 2)), np.abs(Q).max(axis=(1, 2)))
    tol = (1e-10 * np.maximum(scale, 1.0))[:, None, None]

    def inside(pts, poly):
        e = np.roll(poly, -1, axis=1) - poly
        d = pts[:, :, None, :] - poly[:, None, :, :]
        cr = (e[:, None, :, 0] * d[..., 1] - e[:, None, :, 1] * d[..., 0]) / np.linalg.norm(e, axis=-1)[:, None]
        return np.all(cr >= -tol, axis=-1)

    roll = np.array([1, 2, 3, 0])
    r_np = pv[:, roll] - pv
    s_np = Q[:, roll] - Q
    rr, ss = r_np[:, :, None, :], s_np[:, None, :, :]
    qp = Q[:, None, :, :] - pv[:, :, None, :]
    denom = rr[..., 0] * ss[..., 1] - rr[..., 1] * ss[..., 0]
    ok = np.abs(denom) > 1e-14 * np.linalg.norm(rr, axis=-1) * np.linalg.norm(ss, axis=-1)
    safe = np.where(ok, denom, 1.0)
    t_np = (qp[..., 0] * ss[..., 1] - qp[..., 1] * ss[..., 0]) / safe
    u_np = (qp[..., 0] * rr[..., 1] - qp[..., 1] * rr[..., 0]) / safe
    eps = 1e-12
    hit = ok & (t_np >= -eps) & (t_np <= 1 + eps) & (u_np >= -eps) & (u_np <= 1 + eps)
    mask = np.concatenate([inside(pv, Q), inside(Q, pv), hit.reshape(n, 16)], axis=1)
    pts_np = np.concatenate([pv, Q, (pv[:, :, None, :] + t_np[..., None] * rr).reshape(n, 16, 2)], axis=1)
    count = mask.sum(axis=1)
    centroid = (pts_np * mask[..., None]).sum(axis=1) / np.maximum(count, 1)[:, None]
    rel = pts_np - centroid[:, None, :]
    ang = np.where(mask, np.arctan2(rel[..., 1], rel[..., 0]), np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    sorted_mask = np.take_along_axis(mask, order, axis=1)

    # differentiable recomputation of the same points
    r = P[:, roll] - P
    Qc = tape.const(Q, dtype=P.value.dtype)
    rv = r.reshape(n, 4, 1, 2)
    qpv = Qc.reshape(n, 1, 4, 2) - P.reshape(n, 4, 1, 2)
    tv = _cross(qpv, ss) / ad.where(ok, _cross(rv, ss), 1.0)
    crossing = P.reshape(n, 4, 1, 2) + tv.reshape(n, 4, 4, 1) * rv
    pts = ad.concatenate([P, Qc, crossing.reshape(n, 16, 2)], axis=1)
    sp = ad.take_along_axis(pts, order[..., None], axis=1)
    sp = ad.where(sorted_mask[..., None], sp, sp[:, :1, :])
    ref = centroid[:, None, :]
    a = sp - ref
    b = a[:, np.r_[1:24, 0]]
    area = _cross(a, b).sum(axis=1) * 0.5
    return ad.maximum(ad.where(count >= 3, area, 0.0), 0.0)


def rect_from_midpoint(m: Var) -> tuple[Var, Var]:
    """Rectify midpoint descriptions ``(N, 8)`` on the tape.

    Returns the CCW rectangle footprint ``(N, 4, 2)`` and its area.
    """
    n = m.shape[0]
    x, y = m[:, 0], m[:, 1]
    u1 = ad.stack([m[:, 3] * 0.5, m[:, 7]], axis=1)  # right vertex - center
    u2 = ad.stack([m[:, 6], m[:, 4] * 0.5], axis=1)  # top vertex - center
    n1 = ad.sqrt((u1 * u1).sum(axis=1))
    n2 = ad.sqrt((u2 * u2).sum(axis=1))
    half = ad.maximum(n1, n2)
    e1 = u1 / n1.reshape(n, 1)
    e2 = u2 / n2.reshape(n, 1)
    a = e1 * half.reshape(n, 1)
    b = e2 * half.reshape(n, 1)
    c = ad.stack([x, y], axis=1)
    verts = ad.stack([c + a, c + b, c - a, c - b], axis=1)
    ccw = _cross(u1.value, u2.value) >= 0
    perm = np.where(ccw[:, None], np.arange(4)[None], np.array([0, 3, 2, 1])[None])
    verts = ad.take_along_axis(verts, perm[:, :, None], axis=1)
    area = ad.absolute(_cross(e1, e2)) * half * half * 2.0
    return verts, area


def footprint_from_params(params: Var) -> Var:
    """CCW footprint ``(N, 4, 2)`` of ``[cx, cy, cz, w, l, h, yaw]`` boxes on the tape."""
    n = params.shape[0]
    c, s = ad.cos(params[:, 6]), ad.sin(params[:, 6])
    hw, hl = params[:, 3] * 0.5, params[:, 4] * 0.5
    verts = []
    for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
        lx, ly = hw * sx, hl * sy
        verts.append(ad.stack([params[:, 0] + lx * c - ly * s, params[:, 1] + lx * s + ly * c], axis=1))
    return ad.stack(verts, axis=1).reshape(n, 4, 2)


def overlap_loss(fp: Var, area: Var, zc: Var, h: Var, gt, kind: str = "iou") -> Var:
    """Per-box ``1 - IoU`` (``kind="iou"``) or DIoU loss against constant ``gt`` boxes."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    inter2d = quad_overlap_area(fp, footprints(gt))
    top = ad.minimum(zc + h * 0.5, gt[:, 2] + gt[:, 5] / 2)
    bot = ad.maximum(zc - h * 0.5, gt[:, 2] - gt[:, 5] / 2)
    dz = ad.maximum(top - bot, 0.0)
    inter = inter2d * dz
    union = area * h + np.prod(gt[:, 3:6], axis=1) - inter
    loss = 1.0 - inter / union
    if kind == "iou":
        return loss
    if kind != "diou":
        raise LossError(f"unknown overlap loss {kind!r}")
    gc = corners_batch(gt)
    center_xy = fp.mean(axis=1)
    d2 = ((center_xy - gt[:, :2]) ** 2).sum(axis=1) + (zc - gt[:, 2]) ** 2
    ext = []
    for k in range(2):
        hi = ad.maximum(ad.max_reduce(fp[:, :, k], axis=1), gc[:, :, k].max(axis=1))
        lo = ad.minimum(ad.min_reduce(fp[:, :, k], axis=1), gc[:, :, k].min(axis=1))
        ext.append(hi - lo)
    ez = ad.maximum(zc + h * 0.5, gc[:, :, 2].max(axis=1)) - ad.minimum(zc - h * 0.5, gc[:, :, 2].min(axis=1))
    diag2 = ext[0] * ext[0] + ext[1] * ext[1] + ez * ez
    return loss + d2 / diag2


def midpoint_overlap_loss(m: Var, gt, kind: str = "iou") -> Var:
    fp, area = rect_from_midpoint(m)
    return overlap_loss(fp, area, m[:, 2], m[:, 5], gt, kind)


def params_overlap_loss(params: Var, gt, kind: str = "iou") -> Var:
    fp = footprint_from_params(params)
    return overlap_loss(fp, params[:, 3] * params[:, 4], params[:, 2], params[:, 5], gt, kind)


def _box_loss_scalar(pred: Obb, gt: Obb, kind: str) -> tuple[float, np.ndarray]:
    tape = Tape(np.float64)
    p = tape.var(pred.params[None])
    loss = params_overlap_loss(p, gt.params, kind).sum()
    tape.backward(loss)
    return float(loss.value), p.grad[0]


def iou_loss(pred: Obb, gt: Obb) -> tuple[float, np.ndarray]:
    """``1 - IoU`` and its gradient with respect to ``pred.params``."""
    return _box_loss_scalar(pred, gt, "iou")


def diou_loss(pred: Obb, gt: Obb) -> tuple[float, np.ndarray]:
    return _box_loss_scalar(pred, gt, "diou")


# ---------------------------------------------------------------------------
# parameterization -> midpoint description on the tape


def midpoint_from_anchor(t: Var, anchors: np.ndarray) -> Var:
    a = np.asarray(anchors, dtype=np.float64)
    w = ad.exp(t[:, 3]) * a[:, 3]
    l = ad.exp(t[:, 4]) * a[:, 4]
    h = ad.exp(t[:, 5]) * a[:, 5]
    return ad.stack([t[:, 0] * a[:, 3] + a[:, 0], t[:, 1] * a[:, 4] + a[:, 1], t[:, 2] * a[:, 5] + a[:, 2],
                     w, l, h, t[:, 6] * w, t[:, 7] * l], axis=1)


def midpoint_from_fcos(t: Var, positions: np.ndarray) -> Var:
    pos = np.asarray(positions, dtype=np.float64)
    d = ad.maximum(t[:, :6], MIN_DISTANCE)
    lo = pos - d[:, :3]
    hi = d[:, 3:6] + pos
    c = (lo + hi) * 0.5
    size = hi - lo
    return ad.concatenate([c, size, (t[:, 6] + pos[:, 0] - c[:, 0]).reshape(-1, 1),
                           (t[:, 7] + pos[:, 1] - c[:, 1]).reshape(-1, 1)], axis=1)


# ---------------------------------------------------------------------------
# composite objectives


def _scalar(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(0.0)


def rpn_loss_anchor(obj: Var, deltas: Var, labels, targets, sampled, cfg: LossConfig | None = None,
                    anchors=None, gt_boxes=None) -> tuple[Var, LossBreakdown]:
    """Sampled-anchor objective: mean BCE over the minibatch plus ``lambda / N_reg`` regression.

    ``obj`` holds probabilities ``(N,)``, ``deltas`` ``(N, 8)``; ``targets``
    are encoded deltas for positives. Overlap-based regression needs the
    ``anchors`` and matched ``gt_boxes`` arrays.
    """
    cfg = cfg or LossConfig(reg_loss="smooth_l1")
    tape = obj.tape
    sampled = np.asarray(sampled, dtype=np.int64)
    labels = np.asarray(labels)
    lab = labels[sampled]
    n_cls = len(sampled)
    cls = bce_var(obj[sampled], (lab == 1).astype(np.float64)).sum() * (1.0 / max(n_cls, 1))
    pos = sampled[lab == 1]
    n_reg = len(pos)
    if n_reg:
        if cfg.reg_loss == "smooth_l1":
            diff = deltas[pos] - np.asarray(targets)[pos]
            per = smooth_l1_var(diff, cfg.smooth_l1_beta).sum()
        else:
            m = midpoint_from_anchor(deltas[pos], np.asarray(anchors)[pos])
            per = midpoint_overlap_loss(m, np.asarray(gt_boxes)[pos], cfg.reg_loss).sum()
        reg = per * (cfg.lambda_anchor / n_reg)
        total = cls + reg
    else:
        reg = None
        total = cls
    bd = LossBreakdown(cls=float(cls.value), reg=float(reg.value) if reg is not None else 0.0,
                       total=float(total.value), n_pos=n_reg, n_cls=n_cls, n_reg=n_reg)
    return total, bd


def rpn_loss_fcos(cls_prob: Var, reg: Var, ctr_prob: Var, labels, targets, cstar, positions, gt_boxes,
                  cfg: LossConfig | None = None) -> tuple[Var, LossBreakdown]:
    """Dense objective over every voxel: focal + ``lambda`` overlap + centerness BCE, all over ``N_pos``.

    ``reg`` is ``(N, 8)`` in voxel units; ``gt_boxes`` holds each positive's
    matched box (rows for negatives are ignored).
    """
    cfg = cfg or LossConfig()
    labels = np.asarray(labels)
    pos = np.nonzero(labels == 1)[0]
    n_pos = len(pos)
    norm = 1.0 / max(n_pos, 1)
    cls = focal_var(cls_prob, (labels == 1).astype(np.float64), cfg.focal_gamma, cfg.focal_alpha).sum() * norm
    if n_pos:
        if cfg.reg_loss == "smooth_l1":
            raise LossError("the anchor-free head regresses with an overlap loss (iou or diou)")
        m = midpoint_from_fcos(reg[pos], np.asarray(positions)[pos])
        reg_term = midpoint_overlap_loss(m, np.asarray(gt_boxes)[pos], cfg.reg_loss).sum() * (cfg.lambda_fcos * norm)
        ctr_term = bce_var(ctr_prob[pos], np.asarray(cstar)[pos]).sum() * norm
        total = cls + reg_term + ctr_term
        reg_v, ctr_v = float(reg_term.value), float(ctr_term.value)
    else:
        total = cls
        reg_v, ctr_v = 0.0, 0.0
    bd = LossBreakdown(cls=float(cls.value), reg=reg_v, ctr=ctr_v, total=float(total.value),
                       n_pos=n_pos, n_cls=len(labels), n_reg=n_pos)
    return total, bd


def objectness_loss(scores: Var, offsets: Var, labels, targets, cfg: LossConfig | None = None) -> tuple[Var, LossBreakdown]:
    """ROI objective: mean BCE plus ``lambda / N_reg`` smooth-L1 on ``g`` for object ROIs."""
    cfg = cfg or LossConfig()
    labels = np.asarray(labels)
    n = len(labels)
    cls = bce_var(scores, (labels == 1).astype(np.float64)).sum() * (1.0 / max(n, 1))
    pos = np.nonzero(labels == 1)[0]
    if len(pos):
        diff = offsets[pos] - np.asarray(targets)[pos]
        reg = smooth_l1_var(diff, cfg.smooth_l1_beta).sum() * (cfg.lambda_objectness / len(pos))
        total = cls + reg
        reg_v = float(reg.value)
    else:
        total, reg_v = cls, 0.0
    bd = LossBreakdown(cls=float(cls.value), reg=reg_v, total=float(total.value), n_pos=len(pos),
                       n_cls=n, n_reg=len(pos))
    return total, bd


# ---------------------------------------------------------------------------
# 2D projection loss


def corners_from_rect(fp: Var, zc: Var, h: Var) -> Var:
    """``(N, 8, 3)`` corners: the footprint at the bottom face, then the top face."""
    n = fp.shape[0]
    zb = (zc - h * 0.5).reshape(n, 1, 1)
    zt = (zc + h * 0.5).reshape(n, 1, 1)
    ones = np.ones((n, 4, 1))
    bottom = ad.concatenate([fp, zb * ones], axis=2)
    top = ad.concatenate([fp, zt * ones], axis=2)
    return ad.concatenate([bottom, top], axis=1)


def align_corner_order(pred_fp: np.ndarray, gt_boxes) -> np.ndarray:
    """Cyclic shift per box so predicted footprint vertex ``k`` pairs with GT corner ``k``."""
    gt_fp = footprints(np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7))
    best = np.zeros(len(gt_fp), dtype=np.int64)
    err = np.full(len(gt_fp), np.inf)
    for s in range(4):
        e = np.sum((np.roll(pred_fp, -s, axis=1) - gt_fp) ** 2, axis=(1, 2))
        better = e < err
        best[better], err[better] = s, e[better]
    return (np.arange(4)[None, :] + best[:, None]) % 4


def proj_loss_2d(pred_corners: Var, gt_corners, cameras: Sequence[Camera], beta: float = 1.0) -> Var:
    """Mean over (camera, box) of the summed smooth-L1 pixel error between matched corners.

    Corner pairs with either point at or behind a camera plane are skipped;
    boxes with no usable pair in any camera are left out of the box count.
    """
    gt = np.asarray(gt_corners, dtype=np.float64).reshape(-1, 8, 3)
    tape = pred_corners.tape
    n_box = len(gt)
    if not cameras or n_box == 0:
        return tape.const(0.0)
    terms = []
    seen = np.zeros(n_box, dtype=bool)
    for cam in cameras:
        R = np.asarray(cam.R)
        rel = pred_corners - np.asarray(cam.position)
        pc = _apply_rotation(rel, R)
        gc = (gt - np.asarray(cam.position)) @ R.T
        ok = (pc.value[..., 2] > 0) & (gc[..., 2] > 0)
        if not ok.any():
            continue
        seen |= ok.any(axis=1)
        z = ad.where(ok, pc[..., 2], 1.0)
        pu = pc[..., 0] * cam.focal / z + cam.principal[0]
        pv = pc[..., 1] * cam.focal / z + cam.principal[1]
        gz = np.where(ok, gc[..., 2], 1.0)
        gu = cam.focal * gc[..., 0] / gz + cam.principal[0]
        gv = cam.focal * gc[..., 1] / gz + cam.principal[1]
        err = smooth_l1_var(pu - gu, beta) + smooth_l1_var(pv - gv, beta)
        terms.append(ad.where(ok, err, 0.0).sum())
    if not terms:
        return tape.const(0.0)
    count = len(cameras) * int(seen.sum())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / count)


def _apply_rotation(points: Var, R: np.ndarray) -> Var:
    # (N, 8, 3) @ R.T without a batched matmul primitive
    shape = points.shape
    flat = points.reshape(-1, 3)
    return (flat @ R.T).reshape(*shape)
