"""Synthetic scenes with analytic density fields, training augmentation, and scene I/O."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .config import FLIP_PROB, JITTER_PROB, JITTER_RANGE, ROT90_PROB, SceneSection
from .field_sampler import (SamplingStrategy, VoxelGrid, grid_resolution, sample_grid,
                            traceable_volume)
from .geometry import (HALF_PI, Aabb, Camera, GeometryError, Obb, aabb_batch, canonicalize_params,
                       points_in_boxes, rotated_iou)

SCENE_VERSION = "1"
_N_NOISE_WAVES = 4


class PlacementError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SceneObject:
    box: Obb
    sigma: float
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    shell: float | None = None


@dataclass
class SyntheticScene:
    room: Aabb
    objects: list[SceneObject]
    ambient_sigma: float
    cameras: list[Camera] = field(default_factory=list)
    seed: int = 0
    noise_amplitude: float = 0.0

    def __post_init__(self):
        if self.ambient_sigma < 0:
            raise ValueError("ambient density must be non-negative")
        for obj in self.objects:
            if not obj.sigma > self.ambient_sigma:
                raise ValueError("object density must exceed the ambient density")

    @property
    def boxes(self) -> list[Obb]:
        return [o.box for o in self.objects]

    def box_params(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 7))
        return np.stack([o.box.params for o in self.objects])

    @property
    def field(self) -> "SceneField":
        return SceneField(self)


class SceneField:
    """The density/radiance field implied by a :class:`SyntheticScene`."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene
        self._params = scene.box_params()
        rng = np.random.default_rng([scene.seed, 0x6E6F])
        ext = scene.room.extent
        self._k = rng.normal(size=(_N_NOISE_WAVES, 3)) * (2 * math.pi / ext) * 1.5
        self._phase = rng.uniform(0, 2 * math.pi, _N_NOISE_WAVES)
        self._light = np.array([0.3, 0.2, 0.93]) / np.linalg.norm([0.3, 0.2, 0.93])

    def _owner(self, pos: np.ndarray) -> np.ndarray:
        """Index of the object containing each point, or -1."""
        owner = np.full(len(pos), -1)
        for i, obj in enumerate(self.scene.objects):
            inside = points_in_boxes(pos, self._params[i])[:, 0]
            if obj.shell is not None:
                p = self._params[i].copy()
                p[3:6] -= 2 * obj.shell
                if np.all(p[3:6] > 0):
                    inside &= ~points_in_boxes(pos, p)[:, 0]
            owner = np.where(inside & (owner < 0), i, owner)
        return owner

    def density_at(self, pos) -> np.ndarray:
        pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
        owner = self._owner(pos)
        sig = np.array([o.sigma for o in self.scene.objects] + [self.scene.ambient_sigma])
        out = sig[owner]  # owner -1 picks ambient
        if self.scene.noise_amplitude:
            waves = np.sin(pos @ self._k.T + self._phase).sum(axis=1) / math.sqrt(_N_NOISE_WAVES)
            out = np.clip(out + self.scene.noise_amplitude * waves, 0.0, None)
        return out

    def radiance_at(self, pos, dirs) -> np.ndarray:
        pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        owner = self._owner(pos)
        colors = np.array([o.color for o in self.scene.objects] + [(0.5, 0.5, 0.5)])
        shade = 0.85 + 0.15 * (dirs @ self._light)
        return np.clip(colors[owner] * shade[:, None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# synthesis


def _room(config: SceneSection) -> Aabb:
    size = np.asarray(config.room_size, dtype=np.float64)
    return Aabb((0.0, 0.0, 0.0), tuple(size))


def synth_scene(config: SceneSection | None = None, seed: int = 0, max_tries: int = 500) -> SyntheticScene:
    """Random non-overlapping solid boxes in an empty room, deterministic in ``seed``."""
    config = config or SceneSection()
    room = _room(config)
    place_rng, color_rng, cam_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    lo_n, hi_n = config.count_range
    count = int(place_rng.integers(lo_n, hi_n + 1))
    boxes: list[Obb] = []
    for n in range(count):
        for _ in range(max_tries):
            w, l = place_rng.uniform(*config.size_range, size=2)
            h = place_rng.uniform(*config.height_range)
            y0, y1 = config.yaw_range
            yaw = y0 if y0 == y1 else place_rng.uniform(y0, y1)
            probe = np.array([0, 0, 0, w, l, h, yaw])
            lo, hi = aabb_batch(probe)
            room_lo = np.asarray(room.min) - lo[0]
            room_hi = np.asarray(room.max) - hi[0]
            if np.any(room_hi < room_lo):
                continue
            center = place_rng.uniform(room_lo, room_hi)
            cand = Obb(tuple(center), (w, l, h), yaw)
            if all(rotated_iou(cand, b) < config.max_pair_iou for b in boxes):
                boxes.append(cand)
                break
        else:
            raise PlacementError(f"could not place object {n + 1} of {count} after {max_tries} tries")
    objects = [
        SceneObject(b, float(config.interior_sigma), tuple(float(c) for c in color_rng.uniform(0.1, 0.9, 3)),
                    config.hollow_shell)
        for b in boxes
    ]
    scene = SyntheticScene(room, objects, float(config.ambient_sigma), [], int(seed), float(config.noise_amplitude))
    if config.n_general_cameras or config.n_closeup_per_object:
        scene.cameras = place_cameras(scene, config.n_general_cameras, config.n_closeup_per_object,
                                      int(cam_rng.integers(2**63)))
    return scene


def place_cameras(scene: SyntheticScene, n_general: int, n_closeup_per_object: int = 0, seed: int = 0,
                  mode: str = "random", focal: float = 64.0, image_size=(128, 128)) -> list[Camera]:
    """General views inside the room plus close-ups aimed at each object center.

    ``mode="corners"`` instead puts ``n_general`` (must be 4) cameras at the top
    corners of the room, aimed at the room center.
    """
    rng = np.random.default_rng(seed)
    room_lo, room_hi = np.asarray(scene.room.min), np.asarray(scene.room.max)
    cams: list[Camera] = []
    if mode == "corners":
        if n_general != 4:
            raise ValueError("corner placement uses exactly 4 cameras")
        target = scene.room.center
        for x in (room_lo[0], room_hi[0]):
            for y in (room_lo[1], room_hi[1]):
                cams.append(Camera.look_at((x, y, room_hi[2]), target, focal, image_size))
    elif mode == "random":
        inset = 0.05 * (room_hi - room_lo)
        while len(cams) < n_general:
            pos = rng.uniform(room_lo + inset, room_hi - inset)
            target = rng.uniform(room_lo, room_hi)
            if np.linalg.norm(target - pos) > 1e-3:
                cams.append(Camera.look_at(pos, target, focal, image_size))
    else:
        raise ValueError(f"unknown camera placement mode {mode!r}")
    for obj in scene.objects:
        center = np.asarray(obj.box.center)
        dist = 1.5 * float(np.linalg.norm(obj.box.size))
        for _ in range(n_closeup_per_object):
            d = rng.normal(size=3)
            d[2] = abs(d[2]) + 0.2
            d /= np.linalg.norm(d)
            cams.append(Camera.look_at(center + dist * d, center, focal, image_size))
    return cams


def sample_scene(scene: SyntheticScene, target_longest: int = 48, strategy: SamplingStrategy | str = "density",
                 margin_fraction: float = 0.0, use_room_volume: bool = True) -> VoxelGrid:
    """Voxelize a scene over its room (or its camera/object traceable volume)."""
    if use_room_volume:
        volume = scene.room
    else:
        volume = traceable_volume(scene.cameras, scene.boxes, margin_fraction)
    if isinstance(strategy, str):
        strategy = SamplingStrategy(strategy, tuple(scene.cameras))
    return sample_grid(scene.field, volume, grid_resolution(volume, target_longest), strategy)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentSpec:
    flip_x_prob: float = FLIP_PROB
    flip_y_prob: float = FLIP_PROB
    rot90_prob: float = ROT90_PROB
    jitter_prob: float = JITTER_PROB
    jitter_range: float = JITTER_RANGE

    def __post_init__(self):
        for name in ("flip_x_prob", "flip_y_prob", "rot90_prob", "jitter_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.jitter_range < 0:
            raise ValueError("jitter_range must be non-negative")


def _rotate_params(params: np.ndarray, center: np.ndarray, angle: float, exact_quarter: bool = False) -> np.ndarray:
    p = params.copy()
    rel = p[:, :2] - center[:2]
    if exact_quarter:
        rot = np.stack([-rel[:, 1], rel[:, 0]], axis=1)
    else:
        c, s = math.cos(angle), math.sin(angle)
        rot = np.stack([c * rel[:, 0] - s * rel[:, 1], s * rel[:, 0] + c * rel[:, 1]], axis=1)
    p[:, :2] = rot + center[:2]
    p[:, 6] += angle
    return canonicalize_params(p)


def flip_grid(grid: VoxelGrid, params: np.ndarray, axis: int) -> tuple[VoxelGrid, np.ndarray]:
    """Mirror along world x (``axis=0``) or y (``axis=1``) through the grid center."""
    data = np.flip(grid.data, axis=1 + axis).copy()
    p = params.copy()
    c = grid.center
    p[:, axis] = 2 * c[axis] - p[:, axis]
    p[:, 6] = -p[:, 6]
    return VoxelGrid(data, grid.origin, grid.spacing), canonicalize_params(p)


def rot90_grid(grid: VoxelGrid, params: np.ndarray) -> tuple[VoxelGrid, np.ndarray]:
    """Counter-clockwise quarter turn about +z through the grid center (needs W == L)."""
    W, L, _ = grid.dims
    if W != L:
        raise ValueError(f"quarter-turn augmentation needs a square xy footprint, got {W}x{L}")
    data = np.rot90(grid.data, 1, axes=(1, 2)).copy()
    return VoxelGrid(data, grid.origin, grid.spacing), _rotate_params(params, grid.center, HALF_PI, True)


def jitter_grid(grid: VoxelGrid, params: np.ndarray, angle: float) -> tuple[VoxelGrid, np.ndarray]:
    """Rotate by a small ``angle`` about +z, resampling trilinearly (zero outside)."""
    W, L, H = grid.dims
    ci, cj = (W - 1) / 2.0, (L - 1) / 2.0
    ii, jj, kk = np.meshgrid(np.arange(W), np.arange(L), np.arange(H), indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    di, dj = ii - ci, jj - cj
    src = np.stack([c * di + s * dj + ci, -s * di + c * dj + cj, kk.astype(np.float64)])
    data = np.stack([
        ndimage.map_coordinates(ch.astype(np.float64), src, order=1, mode="constant", cval=0.0)
        for ch in grid.data
    ]).astype(np.float32)
    return VoxelGrid(data, grid.origin, grid.spacing), _rotate_params(params, grid.center, angle)


def augment(grid: VoxelGrid, boxes: Sequence[Obb] | np.ndarray, spec: AugmentSpec, seed) -> tuple[VoxelGrid, list[Obb]]:
    """Random flips, quarter turn, and small-angle jitter applied jointly to grid and boxes."""
    grid, out_params = _augment_params(grid, _as_params(boxes), spec, np.random.default_rng(seed))
    return grid, [Obb.from_params(p) for p in out_params]


def _as_params(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 7).astype(np.float64)
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.params for b in boxes])


def _augment_params(grid: VoxelGrid, params: np.ndarray, spec: AugmentSpec, rng) -> tuple[VoxelGrid, np.ndarray]:
    draws = rng.uniform(size=5)
    if draws[0] < spec.flip_x_prob:
        grid, params = flip_grid(grid, params, 0)
    if draws[1] < spec.flip_y_prob:
        grid, params = flip_grid(grid, params, 1)
    if draws[2] < spec.rot90_prob:
        grid, params = rot90_grid(grid, params)
    if draws[3] < spec.jitter_prob and spec.jitter_range > 0:
        angle = (2 * draws[4] - 1) * spec.jitter_range
        grid, params = jitter_grid(grid, params, angle)
    return grid, params


# ---------------------------------------------------------------------------
# editing


def delete_region(grid: VoxelGrid, box: Obb) -> VoxelGrid:
    """Zero every channel of the voxels whose centers fall inside ``box``."""
    centers = grid.voxel_centers().reshape(-1, 3)
    inside = points_in_boxes(centers, box.params)[:, 0].reshape(grid.dims)
    out = grid.copy()
    out.data[:, inside] = 0.0
    return out


# ---------------------------------------------------------------------------
# persistence

_SCENE_KEYS = {"version", "seed", "room", "ambient_sigma", "noise_amplitude", "objects", "cameras"}
_OBJECT_KEYS = {"box", "sigma", "color", "shell"}


def scene_to_json(scene: SyntheticScene) -> dict:
    return {
        "version": SCENE_VERSION,
        "seed": scene.seed,
        "room": scene.room.to_json(),
        "ambient_sigma": scene.ambient_sigma,
        "noise_amplitude": scene.noise_amplitude,
        "objects": [
            {"box": o.box.to_json(), "sigma": o.sigma, "color": list(o.color), "shell": o.shell}
            for o in scene.objects
        ],
        "cameras": [c.to_json() for c in scene.cameras],
    }


def save_scene(scene: SyntheticScene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_json(scene), indent=1))


def _locate(text: str, key: str) -> int:
    pos = text.find(f'"{key}"')
    return max(pos, 0)


def scene_from_json(obj, text: str = "") -> SyntheticScene:
    if not isinstance(obj, dict):
        raise SceneFormatError("scene root must be an object", 0)
    unknown = set(obj) - _SCENE_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise SceneFormatError(f"unknown scene key {key!r}", _locate(text, key))
    missing = _SCENE_KEYS - set(obj)
    if missing:
        raise SceneFormatError(f"missing scene keys {sorted(missing)}", 0)
    if obj["version"] != SCENE_VERSION:
        raise SceneFormatError(f"unsupported scene version {obj['version']!r}", _locate(text, "version"))
    try:
        objects = []
        for o in obj["objects"]:
            if not isinstance(o, dict) or set(o) != _OBJECT_KEYS:
                raise SceneFormatError(f"object entries need exactly {sorted(_OBJECT_KEYS)}", _locate(text, "objects"))
            objects.append(SceneObject(Obb.from_json(o["box"]), float(o["sigma"]),
                                       tuple(float(c) for c in o["color"]),
                                       None if o["shell"] is None else float(o["shell"])))
        return SyntheticScene(
            Aabb.from_json(obj["room"]), objects, float(obj["ambient_sigma"]),
            [Camera.from_json(c) for c in obj["cameras"]], int(obj["seed"]), float(obj["noise_amplitude"]))
    except (GeometryError, TypeError, KeyError) as exc:
        raise SceneFormatError(f"invalid scene content: {exc}", 0) from exc


def load_scene(path: str | Path) -> SyntheticScene:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: {exc.msg}", exc.pos) from exc
    return scene_from_json(obj, text)
