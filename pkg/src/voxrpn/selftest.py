"""Quick built-in checks: rotated IoU against sampling, and gradients against finite differences."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .geometry import Obb, rotated_iou
from .losses import params_overlap_loss
from .micronet import MicroNet, NetSpec


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _sampled_iou(a: Obb, b: Obb, n: int, rng) -> float:
    # uniform points in the union's bounding box, membership by local coordinates
    def inside(box: Obb, pts):
        c, s = np.cos(box.yaw), np.sin(box.yaw)
        d = pts - np.asarray(box.center)
        lx = d[:, 0] * c + d[:, 1] * s
        ly = -d[:, 0] * s + d[:, 1] * c
        half = np.asarray(box.size) / 2
        return (np.abs(lx) <= half[0]) & (np.abs(ly) <= half[1]) & (np.abs(d[:, 2]) <= half[2])

    r = [np.linalg.norm(np.asarray(x.size)) / 2 for x in (a, b)]
    lo = np.minimum(np.asarray(a.center) - r[0], np.asarray(b.center) - r[1])
    hi = np.maximum(np.asarray(a.center) + r[0], np.asarray(b.center) + r[1])
    pts = rng.uniform(lo, hi, size=(n, 3))
    ia, ib = inside(a, pts), inside(b, pts)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def check_iou(pairs: int = 20, samples: int = 200_000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        a = Obb.from_params(np.r_[rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 2, 3), rng.uniform(-np.pi, np.pi)])
        b = Obb.from_params(np.r_[rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 2, 3), rng.uniform(-np.pi, np.pi)])
        worst = max(worst, abs(rotated_iou(a, b) - _sampled_iou(a, b, samples, rng)))
    return CheckResult("rotated IoU vs sampling", worst < 0.02, f"max deviation {worst:.4f} over {pairs} pairs")


def _rel_err(a, b) -> float:
    return float(abs(a - b) / max(abs(a), abs(b), 1e-8))


def check_loss_gradient(seed: int = 0, h: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    gt = np.array([0.1, -0.2, 0.05, 1.3, 0.9, 1.1, 0.3])
    pred = gt + rng.normal(0, 0.15, 7)

    def value(p):
        return float(params_overlap_loss(Tape().var(p[None]), gt, "diou").value[0])

    tape = Tape()
    v = tape.var(pred[None])
    tape.backward(params_overlap_loss(v, gt, "diou").sum())
    worst = 0.0
    for k in range(7):
        e = np.zeros(7)
        e[k] = h
        worst = max(worst, _rel_err((value(pred + e) - value(pred - e)) / (2 * h), v.grad[0, k]))
    return CheckResult("DIoU loss gradient", worst < 1e-5, f"max relative error {worst:.2e}")


def check_net_gradient(variant: str, seed: int = 0, probes: int = 12, h: float = 1e-6) -> CheckResult:
    spec = NetSpec(variant=variant, stage_channels=(2, 3, 4), fpn_channels=3, head_convs=1, n_anchors=2)
    net = MicroNet(spec, seed, np.float64)
    rng = np.random.default_rng(seed + 1)
    # zero biases put relu inputs exactly on the kink wherever a window sees only zeros
    for name, arr in net.params.items():
        if name.endswith(".b"):
            arr += rng.normal(0, 0.1, arr.shape)
    x = rng.uniform(0, 1, (1, 8, 8, 8))
    weights = {}

    def loss(outs, tape):
        total = tape.const(0.0)
        for lvl, o in enumerate(outs):
            for name, var in (("s", o.scores), ("r", o.regression), ("c", o.centerness)):
                if var is None:
                    continue
                key = (lvl, name)
                if key not in weights:
                    weights[key] = rng.normal(size=var.shape)
                total = total + (var * weights[key]).sum()
        return total

    tape = Tape(np.float64)
    total = loss(net.forward(x, tape), tape)
    grads = net.backward(total)
    names = list(net.params)
    # difference quotients in extended precision, so rounding of the summed readout stays far below h
    ext = MicroNet(spec, seed, np.longdouble, {k: v.astype(np.longdouble) for k, v in net.params.items()})
    worst = 0.0
    for _ in range(probes):
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(n)) for n in net.params[name].shape)
        orig = ext.params[name][idx]
        vals = []
        for sign in (1, -1):
            ext.params[name][idx] = orig + sign * h
            t = Tape(np.longdouble)
            vals.append(loss(ext.forward(x, t, requires_grad=False), t).value[()])
        ext.params[name][idx] = orig
        worst = max(worst, _rel_err((vals[0] - vals[1]) / (2 * h), grads[name][idx]))
    return CheckResult(f"{variant} network gradient", worst < 1e-5, f"max relative error {worst:.2e} over {probes} probes")


def run_all(seed: int = 0) -> list[CheckResult]:
    start = time.perf_counter()
    results = [check_iou(seed=seed), check_loss_gradient(seed), check_net_gradient("fcos", seed),
               check_net_gradient("anchor", seed)]
    results.append(CheckResult("runtime", True, f"{time.perf_counter() - start:.1f} s"))
    return results
