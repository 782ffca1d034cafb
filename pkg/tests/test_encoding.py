import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from voxrpn.encoding import (EncodingError, assign_anchors, assign_fcos, centerness, decode_anchor_batch,
                             decode_fcos_batch, decode_roi_batch, encode_anchor_batch, encode_fcos, encode_fcos_batch,
                             encode_roi, encode_roi_batch, expand_ratios, generate_anchors, level_ranges,
                             midpoint_params, sample_minibatch)
from voxrpn.geometry import Obb

box_params = st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.5, 6), st.floats(0.5, 6),
                       st.floats(0.5, 6), st.floats(-math.pi, math.pi)).map(np.array)


def _corner_gap(a, b) -> float:
    ca, cb = oracles.corners(a), oracles.corners(b)
    d = np.linalg.norm(ca[:, None] - cb[None], axis=-1)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def test_thirteen_ratios_and_level_sizes():
    ratios = expand_ratios()
    assert len(ratios) == 13 and len(set(ratios)) == 13
    levels = generate_anchors([(2, 3, 2), (1, 2, 1)], [1, 2])
    assert [len(a) for a in levels] == [13 * 12, 13 * 2]
    assert np.array_equal(levels[0][0, 3:6], (8, 8, 8))
    assert sorted(map(tuple, levels[1][:13, 3:6])) == sorted(
        tuple(16 * np.array(r) / min(r)) for r in ratios)
    assert np.all(levels[0][:, 6] == 0)
    # feature voxel v of a stride-2 level sits at 2v
    assert np.array_equal(levels[1][13, :3], (0, 2, 0))


def test_midpoint_tie_break_for_axis_aligned_boxes():
    m = midpoint_params(np.array([1.0, 2.0, 3.0, 4.0, 2.0, 1.0, 0.0]))[0]
    # top vertex takes the larger x, right vertex the smaller y
    assert np.allclose(m, (1, 2, 3, 4, 2, 1, 2.0, -1.0))
    eps = 1e-7
    m_eps = midpoint_params(np.array([1.0, 2.0, 3.0, 4.0, 2.0, 1.0, eps]))[0]
    assert np.allclose(m_eps, m, atol=1e-6)


def test_anchor_encoding_values():
    anchor = np.array([0.0, 0.0, 0.0, 8.0, 8.0, 8.0, 0.0])
    t = encode_anchor_batch(anchor, anchor)[0]
    assert np.allclose(t, (0, 0, 0, 0, 0, 0, 0.5, -0.5), atol=1e-15)
    wider = np.array([0.0, 0.0, 0.0, 16.0, 8.0, 8.0, 0.0])
    assert encode_anchor_batch(wider, anchor)[0, 3] == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("offsets", [(0.5, 0.5), (0.5, -0.5)])
def test_zero_deltas_decode_to_the_anchor(offsets):
    anchor = np.array([1.0, 2.0, 3.0, 8.0, 8.0, 8.0, 0.0])
    boxes, _ = decode_anchor_batch(np.array([0, 0, 0, 0, 0, 0, *offsets]), anchor)
    assert np.allclose(boxes[0], anchor, atol=1e-12)


@given(box_params, st.sampled_from(range(13)), st.floats(-3, 3), st.floats(-3, 3))
def test_anchor_round_trip(gt, ratio_index, ax, ay):
    r = np.array(expand_ratios()[ratio_index], dtype=float)
    anchor = np.array([ax, ay, 0.0, *(4 * r / r.min()), 0.0])
    boxes, ok = decode_anchor_batch(encode_anchor_batch(gt, anchor), anchor)
    assert ok[0]
    assert _corner_gap(boxes[0], gt) < 1e-6
    assert -math.pi / 4 <= boxes[0, 6] < math.pi / 4 and np.all(boxes[0, 3:6] > 0)


@given(st.lists(st.floats(-4, 4), min_size=8, max_size=8))
def test_decoded_anchor_boxes_are_rectangles(t):
    anchor = np.array([0.0, 0.0, 0.0, 8.0, 16.0, 8.0, 0.0])
    boxes, _ = decode_anchor_batch(np.array(t), anchor)
    b = boxes[0]
    assert np.all(b[3:6] > 0) and -math.pi / 4 <= b[6] < math.pi / 4
    fp = np.array(oracles.footprint(b))
    d1, d2 = np.linalg.norm(fp[0] - fp[2]), np.linalg.norm(fp[1] - fp[3])
    assert abs(d1 - d2) < 1e-9 * max(1.0, d1)


def test_assignment_examples():
    gt = np.array([[16.0, 16.0, 16.0, 8.0, 8.0, 8.0, 0.0]])
    anchors = np.array([
        [16.0, 16.0, 16.0, 8.0, 8.0, 8.0, 0.0],  # identical
        [19.0, 16.0, 16.0, 8.0, 8.0, 8.0, 0.0],  # IoU 5/11
        [22.0, 16.0, 16.0, 8.0, 8.0, 8.0, 0.0],  # IoU 1/7
        [60.0, 60.0, 60.0, 8.0, 8.0, 8.0, 0.0],  # disjoint
        [16.0, 16.0, 16.0, 8.0, 8.0, 16.0, 0.0],  # IoU 1/2
    ])
    res = assign_anchors(anchors, gt)
    assert res.labels.tolist() == [1, 1, 0, 0, 1]
    assert res.matched.tolist() == [0, 0, -1, -1, 0]
    assert res.max_iou[1] == pytest.approx(5 / 11, abs=1e-12)
    # overlaps under the negative threshold are pruned, only their side of the cut matters
    assert res.max_iou[2] < 0.2


def test_lonely_gt_still_gets_its_best_anchor():
    gt = np.array([[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.3]])
    anchors = np.array([[0.0, 0.0, 0.0, 8.0, 8.0, 8.0, 0.0], [40.0, 0.0, 0.0, 8.0, 8.0, 8.0, 0.0]])
    res = assign_anchors(anchors, gt)
    assert res.max_iou[0] < 0.2
    assert res.labels.tolist() == [1, 0] and res.matched.tolist() == [0, -1]


def test_assignment_without_gts_is_all_negative():
    res = assign_anchors(np.zeros((4, 7)) + [0, 0, 0, 1, 1, 1, 0], np.zeros((0, 7)))
    assert res.labels.tolist() == [0, 0, 0, 0]


def test_minibatch_fill_rule_and_determinism():
    labels = np.zeros(2000, dtype=np.int8)
    labels[:10] = 1
    chosen = sample_minibatch(labels, seed=4)
    assert len(chosen) == 256 and np.count_nonzero(labels[chosen] == 1) == 10
    labels[:300] = 1
    chosen = sample_minibatch(labels, seed=4)
    assert np.count_nonzero(labels[chosen] == 1) == 128 and np.count_nonzero(labels[chosen] == 0) == 128
    assert np.array_equal(chosen, sample_minibatch(labels, seed=4))
    assert len(np.unique(chosen)) == 256
    with pytest.raises(EncodingError):
        sample_minibatch(np.ones(10, dtype=np.int8))


def test_centerness_examples():
    assert centerness([0.5] * 6)[0] == 1.0
    assert centerness([0.0, 0.5, 0.5, 1.0, 0.5, 0.5])[0] == 0.0
    assert centerness([1, 1, 1, 3, 1, 1])[0] == pytest.approx(math.sqrt(1 / 3), abs=1e-15)


@given(st.lists(st.floats(0, 10), min_size=6, max_size=6))
def test_centerness_range(d):
    c = centerness(d)[0]
    assert 0.0 <= c <= 1.0
    if c == 1.0:
        assert all(abs(d[k] - d[k + 3]) <= 1e-12 * max(1.0, d[k]) for k in range(3))


def test_fcos_center_of_unit_cube():
    target = encode_fcos((0, 0, 0), Obb((0, 0, 0), (1, 1, 1)))
    assert np.allclose(target.t[:6], 0.5) and target.centerness == 1.0
    # zero offsets relative to the tie-break: top vertex at +w/2, right vertex at -l/2
    assert np.allclose(target.t[6:], (0.5, -0.5))
    boxes, _ = decode_fcos_batch(np.zeros(3), target.t)
    assert np.allclose(boxes[0], (0, 0, 0, 1, 1, 1, 0), atol=1e-12)
    with pytest.raises(EncodingError):
        encode_fcos((2, 0, 0), Obb((0, 0, 0), (1, 1, 1)))


@given(box_params, st.floats(-0.45, 0.45), st.floats(-0.45, 0.45), st.floats(-0.45, 0.45))
def test_fcos_round_trip(gt, fx, fy, fz):
    m = midpoint_params(gt)[0]
    pos = m[:3] + np.array([fx, fy, fz]) * m[3:6]
    boxes, ok = decode_fcos_batch(pos, encode_fcos_batch(pos, gt))
    assert ok[0] and _corner_gap(boxes[0], gt) < 1e-6
    assert -math.pi / 2 <= boxes[0, 6] < math.pi / 2


def test_level_ranges():
    assert level_ranges(4) == [(0.0, 16.0), (16.0, 32.0), (32.0, 64.0), (64.0, math.inf)]
    assert level_ranges(1) == [(0.0, math.inf)]


def test_fcos_center_voxel_lands_on_one_level():
    gt = np.array([[16.0, 16.0, 16.0, 40.0, 36.0, 30.0, 0.0]])
    pos = [np.array([[16.0, 16.0, 16.0]])] * 4
    res = assign_fcos(pos, [1, 2, 4, 8], gt)
    assert [int(a.labels[0]) for a in res] == [0, 1, 0, 0]
    assert res[1].centerness[0] == 1.0


def test_fcos_far_voxel_and_nested_boxes():
    big = [0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 0.0]
    small = [0.5, 0.0, 0.0, 4.0, 4.0, 4.0, 0.0]
    pos = np.array([[0.0, 0.0, 0.0], [30.0, 30.0, 30.0]])
    res = assign_fcos([pos], [4], np.array([big, small]))[0]
    assert res.labels.tolist() == [1, 0]
    assert res.matched.tolist() == [1, -1]
    assert np.allclose(res.targets[0, :6], (1.5, 2, 2, 2.5, 2, 2))


def test_roi_offsets():
    roi = Obb((1, 2, 3), (2, 3, 4), 0.3)
    assert np.allclose(encode_roi(roi, roi), 0.0, atol=1e-15)
    shifted = Obb((3, 2, 3), (2, 3, 4), 0.0)
    g = encode_roi(shifted, Obb((1, 2, 3), (2, 3, 4), 0.0))
    assert g[0] == pytest.approx(1.0) and np.allclose(g[1:], 0.0)


@given(box_params, box_params)
def test_roi_round_trip(gt, roi):
    back = decode_roi_batch(encode_roi_batch(gt, roi), roi)[0]
    assert _corner_gap(back, gt) < 1e-9 * max(1.0, np.abs(gt[:3]).max())
