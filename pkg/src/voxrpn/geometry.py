"""Yaw-rotated 3D boxes and the exact geometric predicates built on them.

Boxes are yaw-only (rotation about +z). The canonical representation keeps
yaw in ``[-pi/4, pi/4)`` and swaps ``w``/``l`` when a quarter turn is folded
away, so one physical box has one parameter vector. Batched helpers work on
``(N, 7)`` arrays laid out as ``[cx, cy, cz, w, l, h, yaw]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

QUARTER_PI = math.pi / 4.0
HALF_PI = math.pi / 2.0

# xy sign pattern of the 4 bottom corners (counter-clockwise), then the same
# pattern on the top face
_CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=np.float64,
)

CLIP_EPS = 1e-12


class GeometryError(ValueError):
    """Raised for degenerate or invalid geometric input."""


def canonicalize(w, l, yaw):
    """Fold ``yaw`` into ``[-pi/4, pi/4)``, swapping ``w`` and ``l`` on odd quarter turns.

    Works on scalars and arrays. Values already in range are returned
    untouched so canonicalization is bit-idempotent.
    """
    w = np.asarray(w, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    inside = (yaw >= -QUARTER_PI) & (yaw < QUARTER_PI)
    turns = np.floor((yaw + QUARTER_PI) / HALF_PI)
    folded = yaw - turns * HALF_PI
    # floating error can land exactly on the open end
    folded = np.where(folded >= QUARTER_PI, folded - HALF_PI, folded)
    folded = np.where(folded < -QUARTER_PI, folded + HALF_PI, folded)
    swap = (np.mod(turns, 2) == 1) & ~inside
    new_w = np.where(swap, l, w)
    new_l = np.where(swap, w, l)
    new_yaw = np.where(inside, yaw, folded)
    return new_w, new_l, new_yaw


def canonicalize_params(params: np.ndarray) -> np.ndarray:
    """Canonicalize an ``(N, 7)`` (or ``(7,)``) box parameter array."""
    p = np.array(params, dtype=np.float64, copy=True)
    w, l, yaw = canonicalize(p[..., 3], p[..., 4], p[..., 6])
    p[..., 3], p[..., 4], p[..., 6] = w, l, yaw
    return p


def wrap_angle(angle, period=2.0 * math.pi):
    """Wrap into ``[-period/2, period/2)``."""
    half = period / 2.0
    return np.mod(np.asarray(angle, dtype=np.float64) + half, period) - half


def _vec3(values, name) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise GeometryError(f"{name} must have 3 components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} must be finite, got {arr}")
    return float(arr[0]), float(arr[1]), float(arr[2])


@dataclass(frozen=True)
class Obb:
    """Oriented box: center, size ``(w, l, h)`` and yaw about +z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        center = _vec3(self.center, "center")
        size = _vec3(self.size, "size")
        if min(size) <= 0:
            raise GeometryError(f"box size must be strictly positive, got {size}")
        if not math.isfinite(self.yaw):
            raise GeometryError(f"yaw must be finite, got {self.yaw}")
        w, l, yaw = canonicalize(size[0], size[1], float(self.yaw))
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", (float(w), float(l), size[2]))
        object.__setattr__(self, "yaw", float(yaw))

    @classmethod
    def from_params(cls, params: Sequence[float]) -> "Obb":
        p = np.asarray(params, dtype=np.float64)
        return cls(tuple(p[:3]), tuple(p[3:6]), float(p[6]))

    @property
    def params(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def to_json(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw}

    @classmethod
    def from_json(cls, obj: dict) -> "Obb":
        if not isinstance(obj, dict) or set(obj) != {"center", "size", "yaw"}:
            raise GeometryError(f"box object needs exactly center/size/yaw keys, got {obj!r}")
        return cls(tuple(obj["center"]), tuple(obj["size"]), float(obj["yaw"]))


@dataclass(frozen=True)
class Aabb:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        lo = _vec3(self.min, "min")
        hi = _vec3(self.max, "max")
        if any(a > b for a, b in zip(lo, hi)):
            raise GeometryError(f"Aabb min must not exceed max: {lo} > {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return np.subtract(self.max, self.min)

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.min) + np.asarray(self.max)) / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, points) -> np.ndarray:
        """Closed-set membership for an ``(..., 3)`` array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.min) & (pts <= self.max), axis=-1)

    def to_json(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}

    @classmethod
    def from_json(cls, obj: dict) -> "Aabb":
        if not isinstance(obj, dict) or set(obj) != {"min", "max"}:
            raise GeometryError(f"aabb object needs exactly min/max keys, got {obj!r}")
        return cls(tuple(obj["min"]), tuple(obj["max"]))


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass(frozen=True)
class Quad2d:
    """Four xy vertices in counter-clockwise order."""

    vertices: np.ndarray = field(repr=True)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(4, 2)
        if not np.all(np.isfinite(v)):
            raise GeometryError("quad vertices must be finite")
        edges = np.roll(v, -1, axis=0) - v
        turns = _cross2(edges, np.roll(edges, -1, axis=0))
        if polygon_area(v) <= 0 or np.any(turns < -CLIP_EPS * max(1.0, np.abs(v).max() ** 2)):
            raise GeometryError("quad must be counter-clockwise and convex")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation`` maps world axes into camera axes (x right, y down, z forward)."""

    position: tuple[float, float, float]
    rotation: tuple[tuple[float, float, float], ...]
    focal: float
    principal: tuple[float, float]
    image_size: tuple[int, int]

    def __post_init__(self):
        pos = _vec3(self.position, "position")
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {rot.shape}")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
            raise GeometryError("rotation must be orthonormal")
        if not self.focal > 0:
            raise GeometryError(f"focal must be positive, got {self.focal}")
        w, h = (int(s) for s in self.image_size)
        if w <= 0 or h <= 0:
            raise GeometryError(f"image size must be positive, got {self.image_size}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", tuple(tuple(float(x) for x in row) for row in rot))
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal", tuple(float(x) for x in self.principal))
        object.__setattr__(self, "image_size", (w, h))

    @classmethod
    def look_at(cls, position, target, focal=64.0, image_size=(128, 128), up=(0.0, 0.0, 1.0)) -> "Camera":
        pos = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - pos
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise GeometryError("camera target coincides with its position")
        forward /= norm
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        principal = (image_size[0] / 2.0, image_size[1] / 2.0)
        return cls(tuple(pos), tuple(map(tuple, rot)), focal, principal, tuple(image_size))

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation)

    @property
    def optical_axis(self) -> np.ndarray:
        return self.R[2].copy()

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.R.T

    def project(self, points) -> np.ndarray:
        """Pixels of ``(..., 3)`` world points; raises if any is not in front of the camera."""
        pc = self.to_camera(points)
        if np.any(pc[..., 2] <= 0):
            raise GeometryError("point at or behind the camera plane")
        return self.focal * pc[..., :2] / pc[..., 2:3] + np.asarray(self.principal)

    def sees(self, points) -> np.ndarray:
        """Frustum test: in front of the camera and inside the image rectangle."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.focal * pc[..., :2] / z[..., None] + np.asarray(self.principal)
        w, h = self.image_size
        return (z > 0) & (px[..., 0] >= 0) & (px[..., 0] < w) & (px[..., 1] >= 0) & (px[..., 1] < h)

    def to_json(self) -> dict:
        return {
            "position": list(self.position),
            "rotation": [list(r) for r in self.rotation],
            "focal": self.focal,
            "principal": list(self.principal),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        keys = {"position", "rotation", "focal", "principal", "image_size"}
        if not isinstance(obj, dict) or set(obj) != keys:
            raise GeometryError(f"camera object needs exactly {sorted(keys)}, got {obj!r}")
        return cls(tuple(obj["position"]), tuple(map(tuple, obj["rotation"])), obj["focal"],
                   tuple(obj["principal"]), tuple(obj["image_size"]))


# ---------------------------------------------------------------------------
# corners and hulls


def corners_batch(params) -> np.ndarray:
    """``(N, 7)`` params -> ``(N, 8, 3)`` corners in the fixed octant order."""
    p = np.atleast_2d(np.asarray(params, dtype=np.float64))
    half = p[:, None, 3:6] / 2.0 * _CORNER_SIGNS[None]
    c, s = np.cos(p[:, 6])[:, None], np.sin(p[:, 6])[:, None]
    x = c * half[..., 0] - s * half[..., 1]
    y = s * half[..., 0] + c * half[..., 1]
    return np.stack([x, y, half[..., 2]], axis=-1) + p[:, None, :3]


def obb_corners(box: Obb) -> np.ndarray:
    return corners_batch(box.params)[0]


def footprints(params) -> np.ndarray:
    """Counter-clockwise xy footprints ``(N, 4, 2)``."""
    return corners_batch(params)[:, :4, :2]


def obb_to_aabb(box: Obb) -> Aabb:
    pts = obb_corners(box)
    return Aabb(tuple(pts.min(axis=0)), tuple(pts.max(axis=0)))


def aabb_batch(params) -> tuple[np.ndarray, np.ndarray]:
    """Exact AABB bounds ``(N, 3)`` lo/hi of each box."""
    p = np.atleast_2d(np.asarray(params, dtype=np.float64))
    c, s = np.abs(np.cos(p[:, 6])), np.abs(np.sin(p[:, 6]))
    hx = (c * p[:, 3] + s * p[:, 4]) / 2.0
    hy = (s * p[:, 3] + c * p[:, 4]) / 2.0
    half = np.stack([hx, hy, p[:, 5] / 2.0], axis=1)
    return p[:, :3] - half, p[:, :3] + half


def points_in_boxes(points, params) -> np.ndarray:
    """``(P, N)`` closed-set membership of points in oriented boxes."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p = np.atleast_2d(np.asarray(params, dtype=np.float64))
    d = pts[:, None, :] - p[None, :, :3]
    c, s = np.cos(p[:, 6]), np.sin(p[:, 6])
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    return (np.abs(lx) <= p[:, 3] / 2) & (np.abs(ly) <= p[:, 4] / 2) & (np.abs(d[..., 2]) <= p[:, 5] / 2)


# ---------------------------------------------------------------------------
# polygon clipping


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    pts = np.asarray(poly, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject, clipper) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a polygon by a convex counter-clockwise polygon."""
    out = [tuple(map(float, p)) for p in subject]
    clip = [tuple(map(float, p)) for p in clipper]
    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= -CLIP_EPS:
                if s_prev < -CLIP_EPS:
                    out.append(_segment_cut(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= -CLIP_EPS:
                out.append(_segment_cut(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return out


def _segment_cut(p, q, sp, sq):
    denom = sp - sq
    if abs(denom) <= CLIP_EPS:
        return q
    t = sp / denom
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou(a: Obb, b: Obb) -> float:
    """Volume IoU: clipped footprint area times z overlap over the volume union."""
    dz = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2) - max(
        a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2
    )
    if dz <= 0:
        return 0.0
    fa = footprints(a.params)[0]
    fb = footprints(b.params)[0]
    area = polygon_area(clip_convex(fa, fb))
    if area <= 0:
        return 0.0
    inter = area * dz
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def _quad_intersection_area(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Intersection area of paired convex CCW quads ``(N, 4, 2)``.

    Vertex-set construction: corners of one quad inside the other plus all
    edge crossings, ordered by angle about their centroid.
    """
    n = P.shape[0]
    if n == 0:
        return np.zeros(0)
    scale = np.maximum(np.abs(P).max(axis=(1, 2)), np.abs(Q).max(axis=(1, 2)))
    tol = (1e-10 * np.maximum(scale, 1.0))[:, None, None]

    def inside(pts, poly):
        e = np.roll(poly, -1, axis=1) - poly  # (N,4,2)
        elen = np.linalg.norm(e, axis=-1)  # (N,4)
        d = pts[:, :, None, :] - poly[:, None, :, :]  # (N,K,4,2)
        cr = _cross2(e[:, None], d) / elen[:, None]
        return np.all(cr >= -tol, axis=-1)

    p_in = inside(P, Q)
    q_in = inside(Q, P)

    r = np.roll(P, -1, axis=1) - P  # (N,4,2)
    s = np.roll(Q, -1, axis=1) - Q
    rr = r[:, :, None, :]
    ss = s[:, None, :, :]
    qp = Q[:, None, :, :] - P[:, :, None, :]
    denom = _cross2(rr, ss)
    ok = np.abs(denom) > 1e-14 * (np.linalg.norm(rr, axis=-1) * np.linalg.norm(ss, axis=-1))
    safe = np.where(ok, denom, 1.0)
    t = _cross2(qp, ss) / safe
    u = _cross2(qp, rr) / safe
    eps = 1e-12
    hit = ok & (t >= -eps) & (t <= 1 + eps) & (u >= -eps) & (u <= 1 + eps)
    cross_pts = P[:, :, None, :] + t[..., None] * rr

    pts = np.concatenate([P, Q, cross_pts.reshape(n, 16, 2)], axis=1)  # (N,24,2)
    mask = np.concatenate([p_in, q_in, hit.reshape(n, 16)], axis=1)
    count = mask.sum(axis=1)
    centroid = (pts * mask[..., None]).sum(axis=1) / np.maximum(count, 1)[:, None]
    rel = pts - centroid[:, None, :]
    ang = np.arctan2(rel[..., 1], rel[..., 0])
    ang = np.where(mask, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    sp = np.take_along_axis(pts, order[..., None], axis=1)
    sm = np.take_along_axis(mask, order, axis=1)
    sp = np.where(sm[..., None], sp, sp[:, :1, :])
    nxt = np.roll(sp, -1, axis=1)
    area = 0.5 * _cross2(sp - centroid[:, None], nxt - centroid[:, None]).sum(axis=1)
    return np.where(count >= 3, np.maximum(area, 0.0), 0.0)


def rotated_iou_pairs(A, B) -> np.ndarray:
    """Elementwise IoU of paired ``(N, 7)`` box arrays."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    za0, za1 = A[:, 2] - A[:, 5] / 2, A[:, 2] + A[:, 5] / 2
    zb0, zb1 = B[:, 2] - B[:, 5] / 2, B[:, 2] + B[:, 5] / 2
    dz = np.clip(np.minimum(za1, zb1) - np.maximum(za0, zb0), 0.0, None)
    area = _quad_intersection_area(footprints(A), footprints(B))
    inter = area * dz
    union = np.prod(A[:, 3:6], axis=1) + np.prod(B[:, 3:6], axis=1) - inter
    return np.clip(inter / union, 0.0, 1.0)


def rotated_iou_matrix(A, B, chunk: int = 200_000, min_iou: float = 0.0) -> np.ndarray:
    """``(N, M)`` IoU matrix; pairs with disjoint AABBs are skipped.

    With ``min_iou > 0`` pairs whose IoU provably falls below it (the AABB
    overlap volume bounds the intersection) are reported as 0.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64)).reshape(-1, 7)
    B = np.atleast_2d(np.asarray(B, dtype=np.float64)).reshape(-1, 7)
    out = np.zeros((len(A), len(B)))
    if len(A) == 0 or len(B) == 0:
        return out
    alo, ahi = aabb_batch(A)
    blo, bhi = aabb_batch(B)
    avol = np.prod(A[:, 3:6], axis=1)
    bvol = np.prod(B[:, 3:6], axis=1)
    for j in range(len(B)):
        ov = np.clip(np.minimum(ahi, bhi[j]) - np.maximum(alo, blo[j]), 0.0, None).prod(axis=1)
        if min_iou > 0:
            ub = np.minimum(ov, np.minimum(avol, bvol[j]))
            keep = ub > 0
            keep &= ub >= min_iou * (avol + bvol[j] - ub) * (1 - 1e-9)
            cand = np.nonzero(keep)[0]
        else:
            cand = np.nonzero(ov > 0)[0]
        for start in range(0, len(cand), chunk):
            idx = cand[start:start + chunk]
            out[idx, j] = rotated_iou_pairs(A[idx], np.broadcast_to(B[j], (len(idx), 7)))
    return out


# ---------------------------------------------------------------------------
# DIoU


def diou_penalty(a: Obb, b: Obb) -> float:
    """Squared center distance over the squared diagonal of the enclosing axis-aligned box."""
    pts = np.concatenate([obb_corners(a), obb_corners(b)])
    diag2 = float(np.sum((pts.max(axis=0) - pts.min(axis=0)) ** 2))
    dist2 = float(np.sum((np.subtract(a.center, b.center)) ** 2))
    return dist2 / diag2


def diou_loss_value(a: Obb, b: Obb) -> float:
    return 1.0 - rotated_iou(a, b) + diou_penalty(a, b)


# ---------------------------------------------------------------------------
# parallelogram rectification


def rectify_batch(vertices) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Rectify ``(N, 4, 2)`` parallelograms by stretching the shorter diagonal.

    Returns ``(center (N,2), w, l, yaw, valid)``; canonical ``(w, l, yaw)``.
    Rows flagged invalid (zero-area input) carry garbage values.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 4, 2)
    center = v.mean(axis=1)
    d1 = v[:, 2] - v[:, 0]
    d2 = v[:, 3] - v[:, 1]
    n1 = np.linalg.norm(d1, axis=1)
    n2 = np.linalg.norm(d2, axis=1)
    half = np.maximum(n1, n2) / 2.0
    valid = (n1 > 0) & (n2 > 0)
    u1 = d1 / np.where(valid, n1, 1.0)[:, None]
    u2 = d2 / np.where(valid, n2, 1.0)[:, None]
    sin_phi = _cross2(u1, u2)
    valid &= np.abs(sin_phi) > 1e-12
    side_w = half[:, None] * (u1 - u2)
    side_l = half[:, None] * (u1 + u2)
    w = np.linalg.norm(side_w, axis=1)
    l = np.linalg.norm(side_l, axis=1)
    yaw = np.arctan2(side_w[:, 1], side_w[:, 0])
    valid &= (w > 0) & (l > 0)
    w, l, yaw = canonicalize(np.where(valid, w, 1.0), np.where(valid, l, 1.0), yaw)
    return center, w, l, yaw, valid


def rectify_parallelogram(q: Quad2d | np.ndarray) -> tuple[np.ndarray, float, float, float]:
    """Turn a parallelogram into the rectangle with the same center and diagonal directions."""
    v = q.vertices if isinstance(q, Quad2d) else np.asarray(q, dtype=np.float64).reshape(4, 2)
    scale = max(float(np.abs(v).max()), 1.0)
    if np.abs((v[1] - v[0]) - (v[2] - v[3])).max() > 1e-6 * scale:
        raise GeometryError("quad is not a parallelogram")
    center, w, l, yaw, valid = rectify_batch(v[None])
    if not valid[0]:
        raise GeometryError("degenerate (zero-area) quad cannot be rectified")
    return center[0], float(w[0]), float(l[0]), float(yaw[0])


# ---------------------------------------------------------------------------
# projection


def project_box(cam: Camera, box: Obb) -> np.ndarray:
    """Pinhole pixels ``(8, 2)`` of the box corners."""
    return cam.project(obb_corners(box))
