"""Acceptance criteria, one PASS/FAIL line each (echoed in the pytest summary).

Tolerances are pinned here and nowhere else.
"""
import math
import time

import numpy as np
import pytest

import oracles
from voxrpn import autodiff as ad
from voxrpn.config import RunConfig
from voxrpn.encoding import (assign_anchors, decode_anchor_batch, decode_fcos_batch, decode_roi_batch,
                             encode_anchor_batch, encode_fcos_batch, encode_roi_batch, generate_anchors)
from voxrpn.field_sampler import density_to_alpha, fit_sh, read_nvg, write_nvg
from voxrpn.geometry import Camera, Obb, corners_batch, rotated_iou
from voxrpn.losses import (LossConfig, bce, bce_var, diou_loss, focal, focal_var, iou_loss, objectness_loss,
                           params_overlap_loss, proj_loss_2d, rpn_loss_anchor, rpn_loss_fcos, smooth_l1,
                           smooth_l1_var)
from voxrpn.metrics import evaluate
from voxrpn.micronet import (AdamW, Checkpoint, MicroNet, NetSpec, TrainingSample, load_checkpoint, save_checkpoint,
                             train)
from voxrpn.proposals import ProposalSet, nms_rotated, propose
from voxrpn.scene_forge import load_scene, place_cameras, sample_scene, save_scene, synth_scene

IOU_MC_SAMPLES = 1_000_000
IOU_MC_TOL = 0.01
IOU_CLOSED_TOL = 1e-9
IOU_SUITE_SECONDS = 60.0
ROUNDTRIP_CASES = 10_000
ROUNDTRIP_TOL = 1e-6
ROUNDTRIP_SECONDS = 10.0
GRAD_TOL = 1e-5
GRAD_H = 1e-6
GRAD_SECONDS = 300.0
SH_RMS_TOL = 1e-6
SH_CONST_TOL = 1e-9
ALPHA_TOL = 1e-12
E2E_CPU_MINUTES = 30.0
E2E_FCOS_STEPS = 600
E2E_ANCHOR_STEPS = 600


def _corner_set_error(a, b) -> float:
    """Largest distance from a corner of one box to the nearest corner of the other (order-free)."""
    ca, cb = corners_batch(a), corners_batch(b)
    d = np.linalg.norm(ca[:, :, None, :] - cb[:, None, :, :], axis=-1)
    return float(max(d.min(axis=2).max(), d.min(axis=1).max()))


# ---------------------------------------------------------------------------


def test_desk_scale_substitution(verdict):
    pytest.skip("benchmark-scale recall/AP needs curated radiance-field datasets; "
                "replaced by the desk-scale criteria below")


def test_geometry_oracle_suite(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_mc = 0.0
    for _ in range(200):
        a, b = oracles.random_box(rng, 0.5), oracles.random_box(rng, 0.5)
        got = rotated_iou(Obb.from_params(a), Obb.from_params(b))
        worst_mc = max(worst_mc, abs(got - oracles.monte_carlo_iou(a, b, IOU_MC_SAMPLES, rng)))
    worst_closed = 0.0
    for _ in range(200):
        a, b = oracles.random_box(rng, 0.8, yaw=False), oracles.random_box(rng, 0.8, yaw=False)
        worst_closed = max(worst_closed, abs(rotated_iou(Obb.from_params(a), Obb.from_params(b))
                                             - oracles.aabb_iou(a, b)))
    elapsed = time.perf_counter() - start
    verdict("rotated IoU oracle suite",
            worst_mc <= IOU_MC_TOL and worst_closed <= IOU_CLOSED_TOL and elapsed < IOU_SUITE_SECONDS,
            f"max |IoU - MC| {worst_mc:.4f} (tol {IOU_MC_TOL}), max |IoU - closed form| {worst_closed:.1e} "
            f"(tol {IOU_CLOSED_TOL}), {elapsed:.1f} s (limit {IOU_SUITE_SECONDS:.0f} s)")


def test_roundtrip_suite(verdict):
    rng = np.random.default_rng(7)
    n = ROUNDTRIP_CASES
    start = time.perf_counter()
    gt = np.column_stack([rng.uniform(-20, 20, (n, 3)), rng.uniform(0.5, 30, (n, 3)), rng.uniform(-np.pi, np.pi, n)])

    anchors = np.column_stack([gt[:, :3] + rng.uniform(-4, 4, (n, 3)), rng.uniform(2, 40, (n, 3)), np.zeros(n)])
    boxes, ok = decode_anchor_batch(encode_anchor_batch(gt, anchors), anchors)
    err_anchor = _corner_set_error(gt, boxes)

    positions = gt[:, :3] + rng.uniform(-0.2, 0.2, (n, 3)) * gt[:, 3:6].min(axis=1, keepdims=True)
    boxes_f, ok_f = decode_fcos_batch(positions, encode_fcos_batch(positions, gt))
    err_fcos = _corner_set_error(gt, boxes_f)

    rois = np.column_stack([gt[:, :3] + rng.uniform(-2, 2, (n, 3)), gt[:, 3:6] * rng.uniform(0.5, 2, (n, 3)),
                            rng.uniform(-np.pi / 4, np.pi / 4, n)])
    err_roi = _corner_set_error(gt, decode_roi_batch(encode_roi_batch(gt, rois), rois))
    elapsed = time.perf_counter() - start
    worst = max(err_anchor, err_fcos, err_roi)
    verdict("encode/decode round trips",
            worst < ROUNDTRIP_TOL and ok.all() and ok_f.all() and elapsed < ROUNDTRIP_SECONDS,
            f"{n} cases each; max corner error anchor {err_anchor:.1e}, anchor-free {err_fcos:.1e}, "
            f"roi {err_roi:.1e} (tol {ROUNDTRIP_TOL}); {elapsed:.2f} s (limit {ROUNDTRIP_SECONDS:.0f} s)")


def _quarter_turn(params):
    p = np.array(params, dtype=np.float64).reshape(-1, 7)
    out = p.copy()
    out[:, 0], out[:, 1] = -p[:, 1], p[:, 0]
    out[:, 6] = p[:, 6] + np.pi / 2
    return out


def test_assignment_invariants(verdict):
    cfg = RunConfig()
    spec = NetSpec(variant="anchor")
    missing = 0
    mismatched = 0
    n_gt = 0
    for seed in range(100):
        scene = synth_scene(cfg.scene, seed)
        grid = sample_scene(scene, cfg.sampling.target_longest)
        gts = grid.to_index(scene.box_params())
        anchors = np.concatenate(generate_anchors(spec.level_dims(grid.dims), spec.level_strides,
                                                  cfg.anchors.shortest_sides, cfg.anchors.ratios))
        res = assign_anchors(anchors, gts, cfg.anchors.pos_iou, cfg.anchors.neg_iou)
        n_gt += len(gts)
        missing += sum(1 for g in range(len(gts)) if not np.any(res.matched[res.positives] == g))
        rot = assign_anchors(_quarter_turn(anchors), _quarter_turn(gts), cfg.anchors.pos_iou, cfg.anchors.neg_iou)
        counts = [np.bincount(r.labels + 1, minlength=3).tolist() for r in (res, rot)]
        mismatched += counts[0] != counts[1]
    verdict("anchor assignment invariants", missing == 0 and mismatched == 0,
            f"100 scenes, {n_gt} GT boxes: {missing} without a positive, "
            f"{mismatched} scenes with different label counts after a quarter turn")


# -- gradients ---------------------------------------------------------------


def _tape_grad(build, x):
    tape = ad.Tape(np.float64)
    v = tape.var(np.array(x, dtype=np.float64))
    tape.backward(build(v))
    return v.grad


def _tape_value(build, x):
    tape = ad.Tape(np.float64)
    return float(build(tape.var(np.array(x, dtype=np.float64))).value)


def _check(build, x):
    return oracles.rel_err(_tape_grad(build, x), oracles.central_difference(lambda y: _tape_value(build, y), x, GRAD_H))


def _loss_gradient_errors(rng) -> dict:
    errs = {}
    p = rng.uniform(0.05, 0.95, 12)
    target = (rng.uniform(size=12) > 0.5).astype(float)
    soft = rng.uniform(size=12)
    x = rng.uniform(-3, 3, 12)
    x = x[np.abs(np.abs(x) - 1.0) > 1e-2]

    for name, fn, args in (("bce", bce, (target,)), ("bce soft", bce, (soft,)), ("focal", focal, (target,))):
        _, g = fn(p, *args)
        fd = oracles.central_difference(lambda q: float(fn(q, *args)[0].sum()), p, GRAD_H)
        errs[name + " (numpy)"] = oracles.rel_err(g, fd)
    _, g = smooth_l1(x)
    errs["smooth_l1 (numpy)"] = oracles.rel_err(g, oracles.central_difference(lambda q: float(smooth_l1(q)[0].sum()), x, GRAD_H))
    errs["bce"] = _check(lambda v: bce_var(v, soft).sum(), p)
    errs["focal"] = _check(lambda v: focal_var(v, target).sum(), p)
    errs["smooth_l1"] = _check(lambda v: smooth_l1_var(v).sum(), x)

    gt = np.array([0.3, -0.1, 0.2, 1.4, 0.8, 1.1, 0.35])
    pred = gt + np.array([0.12, -0.07, 0.05, 0.1, -0.15, 0.08, 0.2])
    for name, fn in (("iou", iou_loss), ("diou", diou_loss)):
        _, g = fn(Obb.from_params(pred), Obb.from_params(gt))
        fd = oracles.central_difference(lambda q: fn(Obb.from_params(q), Obb.from_params(gt))[0], pred, GRAD_H)
        errs[name] = oracles.rel_err(g, fd)
        errs[name + " (tape)"] = _check(lambda v: params_overlap_loss(v, gt[None], name).sum(), pred[None])

    n = 10
    anchors = np.column_stack([rng.uniform(0, 10, (n, 3)), rng.uniform(2, 6, (n, 3)), np.zeros(n)])
    gts = anchors + np.column_stack([rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(-0.4, 0.4, (n, 3)),
                                     rng.uniform(-0.3, 0.3, n)])
    labels = np.array([1, 1, 1, 0, 0, 1, -1, 0, 1, 0])
    sampled = np.array([0, 1, 2, 3, 4, 5, 7, 8, 9])
    targets = encode_anchor_batch(gts, anchors)
    deltas0 = targets + rng.normal(0, 0.1, targets.shape)
    # keep every predicted z interval partly overlapping its GT's: under containment either way the
    # z derivative is exactly zero and a relative error is meaningless
    deltas0[:, 2] = targets[:, 2] + 0.4
    obj0 = rng.uniform(0.1, 0.9, n)
    for kind in ("smooth_l1", "iou"):
        cfg = LossConfig(reg_loss=kind)
        errs[f"anchor objective ({kind}) scores"] = _check(
            lambda v: rpn_loss_anchor(v, v.tape.const(deltas0), labels, targets, sampled, cfg, anchors, gts)[0], obj0)
        errs[f"anchor objective ({kind}) deltas"] = _check(
            lambda v: rpn_loss_anchor(v.tape.const(obj0), v, labels, targets, sampled, cfg, anchors, gts)[0], deltas0)

    pos = gts[:, :3] + rng.uniform(-0.3, 0.3, (n, 3))
    ftargets = encode_fcos_batch(pos, gts)
    reg0 = ftargets + rng.normal(0, 0.05, ftargets.shape)
    flabels = np.array([1, 1, 0, 1, 0, 0, 1, 0, 1, 0])
    cstar = rng.uniform(0.2, 0.9, n)
    cls0, ctr0 = rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, n)
    fcfg = LossConfig(reg_loss="diou")
    errs["anchor-free objective cls"] = _check(
        lambda v: rpn_loss_fcos(v, v.tape.const(reg0), v.tape.const(ctr0), flabels, ftargets, cstar, pos, gts, fcfg)[0], cls0)
    errs["anchor-free objective reg"] = _check(
        lambda v: rpn_loss_fcos(v.tape.const(cls0), v, v.tape.const(ctr0), flabels, ftargets, cstar, pos, gts, fcfg)[0], reg0)
    errs["anchor-free objective ctr"] = _check(
        lambda v: rpn_loss_fcos(v.tape.const(cls0), v.tape.const(reg0), v, flabels, ftargets, cstar, pos, gts, fcfg)[0], ctr0)

    g_t = rng.normal(0, 0.3, (n, 7))
    g0 = g_t + rng.normal(0, 0.5, (n, 7))
    errs["objectness objective offsets"] = _check(
        lambda v: objectness_loss(v.tape.const(obj0), v, labels, g_t)[0], g0)
    errs["objectness objective scores"] = _check(
        lambda v: objectness_loss(v, v.tape.const(g0), labels, g_t)[0], obj0)

    cams = [_camera(p) for p in ((6, -5, 4), (-5, -6, 3), (0, 8, 5))]
    gt_corners = corners_batch(gts[:4] * [0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 1])
    pred_corners = gt_corners + rng.normal(0, 0.05, gt_corners.shape)
    errs["projection"] = _check(lambda v: proj_loss_2d(v, gt_corners, cams), pred_corners)
    return errs


def _camera(position):
    return Camera.look_at(position, (1.5, 1.5, 0.5), focal=20.0)


def _net_gradient_error(variant: str, rng) -> float:
    spec = NetSpec(variant=variant, stage_channels=(2, 3, 3), fpn_channels=2, head_convs=1, n_anchors=2)
    net = MicroNet(spec, 3, np.float64)
    # zero biases leave relu inputs exactly at the kink wherever a window sees only padding
    for name, arr in net.params.items():
        if name.endswith(".b"):
            arr += rng.normal(0, 0.1, arr.shape)
    x = rng.uniform(0, 1, (1, 6, 6, 6))
    weights = {}

    def loss(outs, tape):
        total = tape.const(0.0)
        for lvl, o in enumerate(outs):
            for key, var in (("s", o.scores), ("r", o.regression), ("c", o.centerness)):
                if var is None:
                    continue
                w = weights.setdefault((lvl, key), rng.normal(size=var.shape))
                total = total + (var * w).sum()
        return total

    tape = ad.Tape(np.float64)
    grads = net.backward(loss(net.forward(x, tape), tape))
    # the difference quotient runs on an extended-precision copy of the same weights: in double the
    # rounding of the summed readout (~1e-8 after dividing by 2h) swamps parameters whose true gradient
    # is itself ~1e-6, which says nothing about the analytic gradient under test
    ext = MicroNet(spec, 3, np.longdouble, {k: v.astype(np.longdouble) for k, v in net.params.items()})
    worst = 0.0
    for name, arr in net.params.items():
        def f(vals, name=name):
            saved = ext.params[name]
            ext.params[name] = vals.reshape(saved.shape).astype(np.longdouble)
            t = ad.Tape(np.longdouble)
            out = loss(ext.forward(x, t, requires_grad=False), t).value[()]
            ext.params[name] = saved
            return out
        worst = max(worst, oracles.rel_err(grads[name], oracles.central_difference(f, arr.copy(), GRAD_H)))
    return worst


def test_gradient_checks(verdict):
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    errs = _loss_gradient_errors(rng)
    errs["network (anchor head)"] = _net_gradient_error("anchor", rng)
    errs["network (anchor-free head)"] = _net_gradient_error("fcos", rng)
    elapsed = time.perf_counter() - start
    worst_name = max(errs, key=errs.get)
    verdict("gradient checks", errs[worst_name] < GRAD_TOL and elapsed < GRAD_SECONDS,
            f"{len(errs)} checks, worst {worst_name} {errs[worst_name]:.1e} (tol {GRAD_TOL}); "
            f"{elapsed:.1f} s (limit {GRAD_SECONDS:.0f} s)")


def test_nms_equivalence(verdict):
    rng = np.random.default_rng(5)
    differing = 0
    kept_total = 0
    for _ in range(50):
        n = 500
        boxes = np.column_stack([rng.uniform(0, 24, (n, 3)), rng.uniform(1, 6, (n, 3)), rng.uniform(-np.pi, np.pi, n)])
        scores = rng.uniform(size=n)
        ps = ProposalSet(boxes, scores, np.zeros(n, dtype=int), np.arange(n))
        got = nms_rotated(ps, 0.1).indices.tolist()
        want = oracles.reference_nms(boxes, scores, 0.1)
        differing += got != want
        kept_total += len(want)
    verdict("rotated NMS equals reference greedy NMS", differing == 0,
            f"50 sets x 500 proposals, {kept_total} kept in total, {differing} sets differ")


def test_sh_fitting(verdict):
    rng = np.random.default_rng(3)
    coeffs = rng.normal(size=(3, 20))

    def poly(dirs):
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        mono = np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, y * z, x * z,
                         x ** 3, y ** 3, z ** 3, x * x * y, x * x * z, y * y * x, y * y * z, z * z * x, z * z * y,
                         x * y * z], axis=1)
        return mono @ coeffs.T

    class PolyField:
        def radiance_at(self, pos, dirs):
            return poly(np.asarray(dirs))

    class ConstField:
        def radiance_at(self, pos, dirs):
            return np.tile([0.7, 0.2, 0.45], (len(dirs), 1))

    fit = fit_sh(PolyField(), np.zeros(3))
    test_dirs = rng.normal(size=(2000, 3))
    test_dirs /= np.linalg.norm(test_dirs, axis=1, keepdims=True)
    rms = float(np.sqrt(np.mean((fit.evaluate(test_dirs) - poly(test_dirs)) ** 2)))
    const = fit_sh(ConstField(), np.zeros(3)).coeffs
    expect = np.zeros_like(const)
    expect[:, 0] = np.array([0.7, 0.2, 0.45]) * 2 * math.sqrt(math.pi)
    const_err = float(np.abs(const - expect).max())
    verdict("spherical harmonics fit", rms < SH_RMS_TOL and const_err < SH_CONST_TOL,
            f"cubic field RMS {rms:.1e} (tol {SH_RMS_TOL}); constant field coefficient error {const_err:.1e} "
            f"(tol {SH_CONST_TOL})")


def test_density_to_alpha_values(verdict):
    a0 = density_to_alpha(0.0)
    a100 = density_to_alpha(100.0)
    err = abs(a100 - (1 - math.exp(-1)))
    verdict("density to opacity", a0 == 0.0 and err < ALPHA_TOL,
            f"sigma=0 -> {a0}, sigma=100 -> {a100:.15f} (error {err:.1e}, tol {ALPHA_TOL})")


def test_format_roundtrips(verdict, tmp_path):
    scene = synth_scene(RunConfig().scene, 17)
    scene.cameras = place_cameras(scene, 4, mode="corners")
    save_scene(scene, tmp_path / "a.json")
    loaded = load_scene(tmp_path / "a.json")
    save_scene(loaded, tmp_path / "b.json")
    scene_ok = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes() and \
        np.array_equal(loaded.box_params(), scene.box_params())

    grid = sample_scene(scene, 24, "fixed18")
    write_nvg(grid, tmp_path / "a.nvg")
    back = read_nvg(tmp_path / "a.nvg")
    write_nvg(back, tmp_path / "b.nvg")
    grid_ok = np.array_equal(back.data, grid.data) and back.origin == grid.origin and back.spacing == grid.spacing \
        and (tmp_path / "a.nvg").read_bytes() == (tmp_path / "b.nvg").read_bytes()

    net = MicroNet(NetSpec(variant="anchor", n_anchors=13), seed=4)
    opt = AdamW()
    opt.step(net.params, {k: np.full_like(v, 0.1) for k, v in net.params.items()})
    ckpt = Checkpoint(net.spec, net.params, 4, 1, opt, {"note": "roundtrip"})
    save_checkpoint(ckpt, tmp_path / "c.json")
    re = load_checkpoint(tmp_path / "c.json")
    save_checkpoint(re, tmp_path / "d.json")
    ckpt_ok = all(np.array_equal(re.params[k], v) for k, v in ckpt.params.items()) and \
        all(np.array_equal(re.optimizer.m[k], v) for k, v in opt.m.items()) and \
        (tmp_path / "c.json.bin").read_bytes() == (tmp_path / "d.json.bin").read_bytes() and \
        (tmp_path / "c.json").read_text().replace("c.json", "X") == (tmp_path / "d.json").read_text().replace("d.json", "X")
    verdict("file format round trips", scene_ok and grid_ok and ckpt_ok,
            f"scene JSON {'exact' if scene_ok else 'differs'}, NVG1 {'exact' if grid_ok else 'differs'}, "
            f"checkpoint {'exact' if ckpt_ok else 'differs'}")


def test_projection_loss_decomposition(verdict):
    cfg = RunConfig()
    cfg.train.steps = 1
    cfg.train.dtype = "float64"
    scene = synth_scene(cfg.scene, 21)
    grid = sample_scene(scene, 24)
    cams = tuple(place_cameras(scene, 4, mode="corners"))
    sample = TrainingSample(grid, scene.box_params(), cams)
    weight = 0.37
    results = {}
    for variant in ("fcos", "anchor"):
        seen = {}
        for w in (0.0, weight):
            cfg.train.proj_loss_weight = w
            train([sample], variant, cfg, seed=9, on_step=lambda step, bd, w=w: seen.__setitem__(w, bd))
        base, with_proj = seen[0.0], seen[weight]
        results[variant] = (with_proj.total, base.total + with_proj.proj * weight, with_proj.proj)
    exact = all(a == b and p > 0 for a, b, p in results.values())
    verdict("projection loss adds exactly its weighted term at step 0", exact,
            "; ".join(f"{v}: with={a!r} base+w*proj={b!r} proj={p:.4g}" for v, (a, b, p) in results.items()))


# -- end to end --------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_data():
    cfg = RunConfig()

    def make(seed):
        scene = synth_scene(cfg.scene, seed)
        return scene, sample_scene(scene, 48)

    start = time.process_time()
    train_set = [TrainingSample(g, s.box_params()) for s, g in map(make, range(200))]
    held_out = [make(10_000 + s) for s in range(50)]
    return train_set, held_out, time.process_time() - start


def _desk_run(variant, steps, desk_data):
    train_set, held_out, data_cpu = desk_data
    cfg = RunConfig()
    cfg.train.steps = steps
    start = time.process_time()
    ckpt, _ = train(train_set, variant, cfg, seed=0)
    results = [(str(i), propose(grid, ckpt, cfg)[0].boxes, scene.box_params()) for i, (scene, grid) in enumerate(held_out)]
    report = evaluate(results)
    cpu_min = (time.process_time() - start + data_cpu) / 60
    return report, cpu_min


@pytest.mark.slow
def test_desk_scale_anchor_free(verdict, desk_data):
    report, cpu_min = _desk_run("fcos", E2E_FCOS_STEPS, desk_data)
    r25, r50 = report.recall[0.25], report.recall[0.5]
    verdict("desk-scale anchor-free recall", r25 >= 0.85 and r50 >= 0.6 and cpu_min <= E2E_CPU_MINUTES,
            f"Recall@0.25 {r25:.3f} (>= 0.85), Recall@0.5 {r50:.3f} (>= 0.6), AP@0.25 {report.ap[0.25]:.3f}, "
            f"{cpu_min:.1f} CPU-min (limit {E2E_CPU_MINUTES:.0f})")


@pytest.mark.slow
def test_desk_scale_anchor(verdict, desk_data):
    report, cpu_min = _desk_run("anchor", E2E_ANCHOR_STEPS, desk_data)
    r25 = report.recall[0.25]
    verdict("desk-scale anchor recall", r25 >= 0.75 and cpu_min <= E2E_CPU_MINUTES,
            f"Recall@0.25 {r25:.3f} (>= 0.75), Recall@0.5 {report.recall[0.5]:.3f}, AP@0.25 {report.ap[0.25]:.3f}, "
            f"{cpu_min:.1f} CPU-min (limit {E2E_CPU_MINUTES:.0f})")
