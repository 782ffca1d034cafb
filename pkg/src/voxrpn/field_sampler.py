"""Sampling a queryable density/radiance field onto a voxel grid.

Fields are queried in batches: ``density_at`` takes an ``(N, 3)`` array of
world positions and ``radiance_at`` additionally an ``(N, 3)`` array of unit
viewing directions.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .config import ALPHA_DELTA, N_FIXED_DIRECTIONS, SH_DEGREE, SH_DIRECTIONS
from .geometry import Aabb, Camera, Obb, corners_batch

NVG_MAGIC = b"NVG1"
_HEADER = struct.Struct("<4s4I4f")

N_SH_BASIS = (SH_DEGREE + 1) ** 2


class SamplingError(ValueError):
    pass


class RadianceField(Protocol):
    def density_at(self, pos: np.ndarray) -> np.ndarray:
        """Non-negative density for ``(N, 3)`` positions."""

    def radiance_at(self, pos: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """RGB in ``[0, 1]`` for ``(N, 3)`` positions and unit directions."""


def _f32(x) -> float:
    return float(np.float32(x))


@dataclass
class VoxelGrid:
    """Dense ``C x W x L x H`` samples; voxel ``(i, j, k)`` is centered at ``origin + spacing * (i, j, k)``."""

    data: np.ndarray
    origin: tuple[float, float, float]
    spacing: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise SamplingError(f"grid data must be C x W x L x H, got {data.shape}")
        if not self.spacing > 0:
            raise SamplingError(f"spacing must be positive, got {self.spacing}")
        self.data = np.ascontiguousarray(data)
        self.origin = tuple(_f32(x) for x in self.origin)
        self.spacing = _f32(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return self.data[0]

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + self.spacing * (np.asarray(self.dims) - 1) / 2.0

    def voxel_centers(self) -> np.ndarray:
        """World positions ``(W, L, H, 3)`` of every voxel center."""
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), axis=-1)
        return np.asarray(self.origin) + self.spacing * idx

    def bounds(self) -> Aabb:
        """Closed hull of the voxel cells."""
        lo = np.asarray(self.origin) - self.spacing / 2
        return Aabb(tuple(lo), tuple(lo + self.spacing * np.asarray(self.dims)))

    def to_index(self, params) -> np.ndarray:
        """World-space boxes ``(N, 7)`` -> voxel-index space."""
        p = np.array(params, dtype=np.float64).reshape(-1, 7)
        p[:, :3] = (p[:, :3] - np.asarray(self.origin)) / self.spacing
        p[:, 3:6] /= self.spacing
        return p

    def to_world(self, params) -> np.ndarray:
        p = np.array(params, dtype=np.float64).reshape(-1, 7)
        p[:, :3] = p[:, :3] * self.spacing + np.asarray(self.origin)
        p[:, 3:6] *= self.spacing
        return p

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.data.copy(), self.origin, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.origin == other.origin and self.spacing == other.spacing
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


def write_nvg(grid: VoxelGrid, path: str | Path) -> None:
    """Write the little-endian NVG1 layout (x index fastest)."""
    C, W, L, H = grid.data.shape
    header = _HEADER.pack(NVG_MAGIC, W, L, H, C, grid.spacing, *grid.origin)
    body = np.ascontiguousarray(grid.data.transpose(0, 3, 2, 1)).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_nvg(path: str | Path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SamplingError(f"{path}: truncated NVG1 header")
    magic, W, L, H, C, spacing, ox, oy, oz = _HEADER.unpack_from(raw)
    if magic != NVG_MAGIC:
        raise SamplingError(f"{path}: bad magic {magic!r}")
    n = C * W * L * H
    if len(raw) != _HEADER.size + 4 * n:
        raise SamplingError(f"{path}: expected {n} values, file has {(len(raw) - _HEADER.size) / 4}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(C, H, L, W).transpose(0, 3, 2, 1)
    return VoxelGrid(data.astype(np.float32), (ox, oy, oz), spacing)


# ---------------------------------------------------------------------------
# volume and resolution


def traceable_volume(cameras: Sequence[Camera], boxes: Sequence[Obb], margin_fraction: float = 0.05) -> Aabb:
    pts = [np.asarray(c.position)[None] for c in cameras]
    if boxes:
        pts.append(corners_batch(np.stack([b.params for b in boxes])).reshape(-1, 3))
    if not pts:
        raise SamplingError("traceable volume needs at least one camera or box")
    pts = np.concatenate(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    grow = margin_fraction * float(np.linalg.norm(hi - lo))
    return Aabb(tuple(lo - grow), tuple(hi + grow))


def grid_resolution(volume: Aabb, target_longest: int = 160) -> tuple[int, int, int]:
    """Voxel counts proportional to the volume's extents; the longest side gets ``target_longest``."""
    ext = volume.extent
    if np.any(ext <= 0):
        raise SamplingError(f"volume has a zero extent: {ext}")
    dims = np.floor(ext / ext.max() * target_longest + 0.5).astype(int)
    return tuple(int(max(1, d)) for d in dims)


def density_to_alpha(sigma, delta: float = ALPHA_DELTA):
    """Opacity of a ``delta``-long segment: ``clip(1 - exp(-sigma * delta), 0, 1)``."""
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s < 0):
        raise SamplingError("density must be non-negative")
    out = np.clip(1.0 - np.exp(-s * delta), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# directions and spherical harmonics


def fixed_directions() -> np.ndarray:
    """The 18 fixed viewing directions, elevation-major."""
    dirs = []
    for phi in (math.pi / 3, 0.0, -math.pi / 3):
        for k in range(6):
            theta = k * math.pi / 3
            dirs.append((math.cos(phi) * math.cos(theta), math.cos(phi) * math.sin(theta), math.sin(phi)))
    out = np.array(dirs)
    assert len(out) == N_FIXED_DIRECTIONS
    return out


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sh_basis(dirs) -> np.ndarray:
    """Real orthonormal spherical harmonics up to degree 3, ``(N, 16)``.

    Order is ``l`` ascending, ``m`` from ``-l`` to ``l``.
    """
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    return np.stack([
        np.full_like(x, 0.28209479177387814),
        0.4886025119029199 * y,
        0.4886025119029199 * z,
        0.4886025119029199 * x,
        1.0925484305920792 * x * y,
        1.0925484305920792 * y * z,
        0.31539156525252005 * (3 * zz - 1),
        1.0925484305920792 * x * z,
        0.5462742152960396 * (xx - yy),
        0.5900435899266435 * y * (3 * xx - yy),
        2.890611442640554 * x * y * z,
        0.4570457994644658 * y * (5 * zz - 1),
        0.3731763325901154 * z * (5 * zz - 3),
        0.4570457994644658 * x * (5 * zz - 1),
        1.445305721320277 * z * (xx - yy),
        0.5900435899266435 * x * (xx - 3 * yy),
    ], axis=1)


@dataclass(frozen=True)
class ShCoeffs:
    """Per-channel SH coefficients, ``(3, 16)``: r, g, b rows."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.size != 3 * N_SH_BASIS:
            raise SamplingError(f"expected {3 * N_SH_BASIS} coefficients, got {c.size}")
        object.__setattr__(self, "coeffs", c.reshape(3, N_SH_BASIS))

    def evaluate(self, dirs) -> np.ndarray:
        return sh_basis(dirs) @ self.coeffs.T

    def to_vector(self) -> np.ndarray:
        return self.coeffs.reshape(-1)


def _sh_solver(n_dirs: int) -> tuple[np.ndarray, np.ndarray]:
    """Lattice directions and the least-squares solve matrix ``(16, n_dirs)``."""
    if n_dirs < N_SH_BASIS:
        raise SamplingError(f"need at least {N_SH_BASIS} directions, got {n_dirs}")
    dirs = fibonacci_sphere(n_dirs)
    B = sh_basis(dirs)
    if np.linalg.matrix_rank(B) < N_SH_BASIS:
        raise SamplingError("rank-deficient SH system")
    return dirs, np.linalg.pinv(B)


def fit_sh(field: RadianceField, pos, n_dirs: int = SH_DIRECTIONS) -> ShCoeffs:
    """Least-squares SH fit of the radiance seen at ``pos`` from a Fibonacci lattice of directions."""
    dirs, solve = _sh_solver(n_dirs)
    p = np.broadcast_to(np.asarray(pos, dtype=np.float64), dirs.shape)
    samples = np.asarray(field.radiance_at(p, dirs), dtype=np.float64)
    return ShCoeffs((solve @ samples).T)


# ---------------------------------------------------------------------------
# radiance averaging


STRATEGIES = ("density", "fixed18", "camera_avg", "frustum_avg", "sh3")


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str = "density"
    cameras: tuple = field(default=(), repr=False)
    n_dirs: int = SH_DIRECTIONS

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise SamplingError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.kind in ("camera_avg", "frustum_avg") and not self.cameras:
            raise SamplingError(f"strategy {self.kind!r} needs a camera list")

    @property
    def channels(self) -> int:
        return {"density": 1, "sh3": 1 + 3 * N_SH_BASIS}.get(self.kind, 4)


def _view_dirs(points: np.ndarray, cam: Camera) -> np.ndarray:
    d = points - np.asarray(cam.position)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    return d / np.where(n > 0, n, 1.0)


def _average_radiance_batch(field: RadianceField, points: np.ndarray, strategy: SamplingStrategy) -> np.ndarray:
    n = len(points)
    if strategy.kind == "fixed18":
        total = np.zeros((n, 3))
        for d in fixed_directions():
            total += field.radiance_at(points, np.broadcast_to(d, points.shape))
        return total / N_FIXED_DIRECTIONS
    cams = strategy.cameras
    if not cams:
        raise SamplingError("camera strategies need a non-empty camera list")
    total = np.zeros((n, 3))
    seen_total = np.zeros((n, 3))
    seen_count = np.zeros(n)
    for cam in cams:
        rgb = field.radiance_at(points, _view_dirs(points, cam))
        total += rgb
        if strategy.kind == "frustum_avg":
            vis = cam.sees(points)
            seen_total += rgb * vis[:, None]
            seen_count += vis
    mean_all = total / len(cams)
    if strategy.kind == "camera_avg":
        return mean_all
    # points seen by no camera fall back to the all-camera mean
    seen = seen_count > 0
    return np.where(seen[:, None], seen_total / np.maximum(seen_count, 1)[:, None], mean_all)


def average_radiance(field: RadianceField, pos, strategy: SamplingStrategy | str,
                     cameras: Sequence[Camera] = ()) -> np.ndarray:
    if isinstance(strategy, str):
        strategy = SamplingStrategy(strategy, tuple(cameras))
    if strategy.kind not in ("fixed18", "camera_avg", "frustum_avg"):
        raise SamplingError(f"strategy {strategy.kind!r} does not average radiance")
    return _average_radiance_batch(field, np.asarray(pos, dtype=np.float64).reshape(1, 3), strategy)[0]


def grid_geometry(volume: Aabb, dims) -> tuple[tuple[float, float, float], float]:
    """Origin and spacing placing ``dims`` voxel centers inside ``volume``, centered in it."""
    dims = np.asarray(dims)
    spacing = float(np.min(volume.extent / dims))
    origin = volume.center - spacing * (dims - 1) / 2.0
    return tuple(origin), spacing


def sample_grid(field: RadianceField, volume: Aabb, dims, strategy: SamplingStrategy | str = "density",
                chunk: int = 32768) -> VoxelGrid:
    """Sample ``field`` at voxel centers; channel 0 is alpha, then radiance per strategy."""
    if isinstance(strategy, str):
        strategy = SamplingStrategy(strategy)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise SamplingError(f"invalid dims {dims}")
    origin, spacing = grid_geometry(volume, dims)
    grid = VoxelGrid(np.zeros((strategy.channels, *dims), dtype=np.float32), origin, spacing)
    points = grid.voxel_centers().reshape(-1, 3)
    out = np.zeros((strategy.channels, len(points)), dtype=np.float64)
    if strategy.kind == "sh3":
        dirs, solve = _sh_solver(strategy.n_dirs)
    for start in range(0, len(points), chunk):
        pts = points[start:start + chunk]
        sl = slice(start, start + len(pts))
        out[0, sl] = density_to_alpha(np.asarray(field.density_at(pts), dtype=np.float64))
        if strategy.kind in ("fixed18", "camera_avg", "frustum_avg"):
            out[1:4, sl] = _average_radiance_batch(field, pts, strategy).T
        elif strategy.kind == "sh3":
            sub = max(1, chunk // len(dirs))
            for s0 in range(0, len(pts), sub):
                p = pts[s0:s0 + sub]
                rep = np.repeat(p, len(dirs), axis=0)
                rgb = field.radiance_at(rep, np.tile(dirs, (len(p), 1))).reshape(len(p), len(dirs), 3)
                coeffs = np.einsum("bd,ndc->ncb", solve, rgb).reshape(len(p), -1)
                out[1:, start + s0:start + s0 + len(p)] = coeffs.T
    grid.data[:] = out.reshape(strategy.channels, *dims)
    return grid
