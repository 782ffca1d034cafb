import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxrpn.config import SceneSection
from voxrpn.field_sampler import VoxelGrid
from voxrpn.geometry import Obb, obb_corners, rotated_iou
from voxrpn.scene_forge import (AugmentSpec, PlacementError, SceneFormatError, augment, delete_region, flip_grid,
                                jitter_grid, load_scene, place_cameras, rot90_grid, sample_scene, save_scene,
                                scene_to_json, synth_scene)

NO_AUG = AugmentSpec(0, 0, 0, 0, 0)


def test_single_axis_aligned_box():
    scene = synth_scene(SceneSection(count_range=(1, 1), yaw_range=(0.0, 0.0)), seed=4)
    assert len(scene.objects) == 1 and scene.objects[0].box.yaw == 0.0


def test_same_seed_same_scene():
    assert scene_to_json(synth_scene(seed=11)) == scene_to_json(synth_scene(seed=11))
    assert scene_to_json(synth_scene(seed=11)) != scene_to_json(synth_scene(seed=12))


def test_objects_are_separated_and_inside_the_room():
    cfg = SceneSection(count_range=(3, 4))
    for seed in range(150):
        scene = synth_scene(cfg, seed)
        for a, b in itertools.combinations(scene.boxes, 2):
            assert rotated_iou(a, b) < 0.05
        room = scene.room
        for box in scene.boxes:
            assert np.all(room.contains(obb_corners(box)))


def test_placement_failure_is_reported():
    cfg = SceneSection(room_size=(1, 1, 1), size_range=(0.9, 0.95), count_range=(3, 3), max_pair_iou=0.01)
    with pytest.raises(PlacementError):
        synth_scene(cfg, seed=0, max_tries=20)


def test_implied_field_values():
    scene = synth_scene(SceneSection(count_range=(1, 1)), seed=2)
    box = scene.objects[0].box
    f = scene.field
    assert f.density_at(np.asarray(box.center)[None])[0] == scene.objects[0].sigma
    assert f.density_at(np.asarray(scene.room.min)[None] + 1e-3)[0] == scene.ambient_sigma


def test_camera_counts_and_closeups_aim_at_objects():
    scene = synth_scene(SceneSection(count_range=(2, 2)), seed=5)
    cams = place_cameras(scene, 5, 3, seed=1)
    assert len(cams) == 5 + 3 * 2
    for cam, obj in zip(cams[5:], [o for o in scene.objects for _ in range(3)]):
        to_center = np.asarray(obj.box.center) - cam.position
        miss = np.linalg.norm(np.cross(cam.optical_axis, to_center))
        assert miss < 1e-9


def test_corner_cameras():
    scene = synth_scene(seed=0)
    cams = place_cameras(scene, 4, mode="corners")
    tops = sorted(tuple(c.position) for c in cams)
    lo, hi = scene.room.min, scene.room.max
    assert tops == sorted((x, y, hi[2]) for x in (lo[0], hi[0]) for y in (lo[1], hi[1]))
    for c in cams:
        to_center = scene.room.center - c.position
        assert np.linalg.norm(np.cross(c.optical_axis, to_center)) < 1e-9


def _random_grid(seed, n=5, h=3, channels=2):
    data = np.random.default_rng(seed).uniform(size=(channels, n, n, h)).astype(np.float32)
    return VoxelGrid(data, (0.0, 0.0, 0.0), 1.0)


def test_all_zero_probabilities_are_identity():
    grid = _random_grid(0)
    boxes = [Obb((1, 2, 1), (1, 2, 1), 0.3)]
    out, out_boxes = augment(grid, boxes, NO_AUG, seed=9)
    assert out == grid and out_boxes == boxes


def test_flip_twice_is_identity():
    grid = _random_grid(1)
    params = np.array([[1.2, 2.1, 1.0, 1, 2, 1, 0.3]])
    for axis in (0, 1):
        once, p1 = flip_grid(grid, params, axis)
        twice, p2 = flip_grid(once, p1, axis)
        assert twice == grid
        assert np.allclose(p2, params, atol=1e-12)


def test_quarter_turn_index_map():
    n = 5
    grid = _random_grid(2, n)
    turned, _ = rot90_grid(grid, np.zeros((0, 7)))
    for i, j, k in itertools.product(range(n), range(n), range(3)):
        assert turned.data[0, i, j, k] == grid.data[0, j, n - 1 - i, k]
    delta = np.zeros((1, n, n, 3), np.float32)
    delta[0, 1, 0, 2] = 1.0
    moved, _ = rot90_grid(VoxelGrid(delta, (0, 0, 0), 1.0), np.zeros((0, 7)))
    assert np.argwhere(moved.data[0]).tolist() == [[n - 1 - 0, 1, 2]]


def test_quarter_turn_moves_boxes_with_the_grid():
    n = 7
    grid = VoxelGrid(np.zeros((1, n, n, 3)), (0, 0, 0), 1.0)
    grid.data[0, 5, 1, 1] = 1.0
    params = np.array([[5.0, 1.0, 1.0, 1.0, 0.6, 0.6, 0.2]])
    turned, p = rot90_grid(grid, params)
    (i, j, k), = np.argwhere(turned.data[0])
    assert np.allclose(p[0, :3], (i, j, k), atol=1e-12)
    # 0.2 + pi/2 folds back to 0.2 with width and length swapped
    assert p[0, 6] == pytest.approx(0.2) and p[0, 3:5] == pytest.approx((0.6, 1.0))


def test_quarter_turn_needs_square_grid():
    with pytest.raises(ValueError):
        rot90_grid(VoxelGrid(np.zeros((1, 4, 5, 2)), (0, 0, 0), 1.0), np.zeros((0, 7)))


@given(st.integers(0, 2**32 - 1))
def test_permutation_augmentations_conserve_channel_sums(seed):
    grid = _random_grid(seed % 1000)
    out, _ = augment(grid, np.zeros((0, 7)), AugmentSpec(0.5, 0.5, 0.5, 0.0, 0.0), seed)
    # identical multiset of values, so float sums in a fixed order agree bit-exactly
    for a, b in zip(grid.data, out.data):
        assert np.sort(a, axis=None).sum() == np.sort(b, axis=None).sum()


@given(st.integers(0, 2**32 - 1))
def test_augmented_boxes_stay_valid(seed):
    grid = _random_grid(0, 8)
    boxes = [Obb((3, 4, 1), (2, 1, 1), 0.7), Obb((5, 2, 1.5), (1, 1.5, 0.5), -0.3)]
    _, out = augment(grid, boxes, AugmentSpec(0.5, 0.5, 0.5, 0.5, math.pi / 18), seed)
    for b in out:
        assert min(b.size) > 0 and -math.pi / 4 <= b.yaw < math.pi / 4


def test_jitter_round_trip_on_smooth_field():
    n = 24
    x, y, z = np.meshgrid(*[np.linspace(0, 1, n)] * 2, np.linspace(0, 1, 4), indexing="ij")
    smooth = (0.5 + 0.25 * np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y)).astype(np.float32)
    grid = VoxelGrid(smooth[None], (0, 0, 0), 1.0)
    there, _ = jitter_grid(grid, np.zeros((0, 7)), 0.15)
    back, _ = jitter_grid(there, np.zeros((0, 7)), -0.15)
    # the outer ring reads zeros from outside the grid
    inner = slice(4, n - 4)
    assert np.abs(back.data[0, inner, inner] - smooth[inner, inner]).max() < 0.05


def test_delete_region_cases():
    grid = _random_grid(3, 6, 4)
    everything = delete_region(grid, Obb((2.5, 2.5, 1.5), (10, 10, 10)))
    assert not everything.data.any()
    assert delete_region(grid, Obb((50, 50, 50), (1, 1, 1))) == grid
    # 2 x 3 x 2 voxel centres inside
    box = Obb((2.5, 2.0, 1.5), (2.0, 3.0, 2.0))
    out = delete_region(grid, box)
    zeroed = np.all(out.data == 0, axis=0)
    assert zeroed.sum() == 12
    assert np.array_equal(out.data[:, ~zeroed], grid.data[:, ~zeroed])


def test_delete_region_drops_the_object_alpha_mass():
    scene = synth_scene(SceneSection(count_range=(1, 1), ambient_sigma=0.0), seed=8)
    grid = sample_scene(scene, 32)
    box = scene.objects[0].box
    before = grid.alpha.sum(dtype=np.float64)
    after = delete_region(grid, box).alpha.sum(dtype=np.float64)
    per_voxel = grid.alpha.max()
    expected = box.volume / grid.spacing**3 * per_voxel
    size = np.asarray(box.size) / grid.spacing
    shell = 2 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2]) * per_voxel
    assert abs((before - after) - expected) <= 2 * shell


def test_scene_json_roundtrip_and_strictness(tmp_path):
    scene = synth_scene(SceneSection(n_general_cameras=2), seed=3)
    path = tmp_path / "s.json"
    save_scene(scene, path)
    back = load_scene(path)
    assert scene_to_json(back) == scene_to_json(scene)
    obj = json.loads(path.read_text())
    bad = dict(obj, extra=1)
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(SceneFormatError):
        load_scene(tmp_path / "bad.json")
    (tmp_path / "v2.json").write_text(json.dumps(dict(obj, version="2")))
    with pytest.raises(SceneFormatError):
        load_scene(tmp_path / "v2.json")
    (tmp_path / "trunc.json").write_text(path.read_text()[:40])
    with pytest.raises(SceneFormatError) as err:
        load_scene(tmp_path / "trunc.json")
    assert err.value.offset > 0
