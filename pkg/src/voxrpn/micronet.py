"""Small 3D convolutional proposal network with a feature pyramid and two heads.

The forward pass records onto an :class:`~voxrpn.autodiff.Tape`, so gradients
of any loss built from the outputs flow back to the parameters. Feature
voxel ``a`` of a stride-``s`` level sits at input-voxel position ``s * a``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, TapeError, Var
from .config import ANCHOR_SHORTEST_SIDES, RunConfig
from .encoding import (assign_anchors, assign_fcos, encode_anchor_batch, expand_ratios, generate_anchors,
                       level_ranges, sample_minibatch)
from .field_sampler import VoxelGrid
from .geometry import Camera, corners_batch
from .losses import (LossBreakdown, LossConfig, align_corner_order, corners_from_rect, midpoint_from_anchor,
                     midpoint_from_fcos, proj_loss_2d, rect_from_midpoint, rpn_loss_anchor, rpn_loss_fcos)

CHECKPOINT_FORMAT = "voxrpn-checkpoint"
CHECKPOINT_VERSION = 1
HEAD_VARIANTS = ("anchor", "fcos")
OBJECTNESS_PRIOR = 0.01


class NetError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int, breakdown: dict | None = None):
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown


# ---------------------------------------------------------------------------
# layers on the tape


def _out_len(n: int, k: int, stride: int) -> int:
    return (n + 2 * (k // 2) - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, out_dims) -> np.ndarray:
    C = xp.shape[0]
    Wo, Lo, Ho = out_dims
    cols = np.empty((C, k, k, k, Wo, Lo, Ho), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                cols[:, a, b, c] = xp[:, a:a + stride * (Wo - 1) + 1:stride,
                                      b:b + stride * (Lo - 1) + 1:stride,
                                      c:c + stride * (Ho - 1) + 1:stride]
    return cols.reshape(C * k * k * k, -1)


def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                   stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded cross-correlation of ``x (C, W, L, H)`` with ``weight (O, C, k, k, k)``.

    Returns ``(output, cols)``; ``cols`` is the unfolded input reused by the backward pass.
    """
    if x.ndim != 4 or weight.ndim != 5 or x.shape[0] != weight.shape[1]:
        raise NetError(f"conv3d shape mismatch: input {x.shape}, weight {weight.shape}")
    O, C, k = weight.shape[:3]
    out_dims = tuple(_out_len(n, k, stride) for n in x.shape[1:])
    if k == 1:
        cols = x[:, ::stride, ::stride, ::stride].reshape(C, -1)
    else:
        p = k // 2
        cols = _im2col(np.pad(x, ((0, 0), (p, p), (p, p), (p, p))), k, stride, out_dims)
    out = weight.reshape(O, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    return out.reshape(O, *out_dims), cols


def conv3d_backward(dy: np.ndarray, cols: np.ndarray, x_shape, weight: np.ndarray,
                    stride: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(dx, dweight, dbias)`` of :func:`conv3d_forward`."""
    O, C, k = weight.shape[:3]
    out_dims = dy.shape[1:]
    dy2 = dy.reshape(O, -1)
    dw = (dy2 @ cols.T).reshape(weight.shape)
    db = dy2.sum(axis=1)
    dcols = weight.reshape(O, -1).T @ dy2
    Wo, Lo, Ho = out_dims
    if k == 1:
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, ::stride, ::stride, ::stride] = dcols.reshape(C, Wo, Lo, Ho)
        return dx, dw, db
    p = k // 2
    dxp = np.zeros((C, x_shape[1] + 2 * p, x_shape[2] + 2 * p, x_shape[3] + 2 * p), dtype=dy.dtype)
    dcols = dcols.reshape(C, k, k, k, Wo, Lo, Ho)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                dxp[:, a:a + stride * (Wo - 1) + 1:stride,
                    b:b + stride * (Lo - 1) + 1:stride,
                    c:c + stride * (Ho - 1) + 1:stride] += dcols[:, a, b, c]
    return dxp[:, p:p + x_shape[1], p:p + x_shape[2], p:p + x_shape[3]], dw, db


def conv3d(x: Var, weight: Var, bias: Var | None = None, stride: int = 1) -> Var:
    out, cols = conv3d_forward(x.value, weight.value, None if bias is None else bias.value, stride)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        dx, dw, db = conv3d_backward(g, cols, x.shape, weight.value, stride)
        return (dx, dw) if bias is None else (dx, dw, db)

    return x.tape.record(out, parents, back)


def upsample_to(x: Var, dims, events: list | None = None) -> Var:
    """Nearest ×2 upsampling, then crop or edge-replicate to ``dims``."""
    up = x.value.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    pads = [max(0, d - u) for d, u in zip(dims, up.shape[1:])]
    if any(pads):
        if events is not None:
            events.append({"event": "upsample_pad", "from": list(up.shape[1:]), "to": list(dims)})
        up = np.pad(up, ((0, 0), *[(0, p) for p in pads]), mode="edge")
    out = up[:, :dims[0], :dims[1], :dims[2]]
    src = x.shape[1:]

    def back(g):
        if tuple(dims) == tuple(2 * n for n in src):
            C = g.shape[0]
            return (g.reshape(C, src[0], 2, src[1], 2, src[2], 2).sum(axis=(2, 4, 6)),)
        # each output voxel reads source voxel min(i // 2, n - 1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        idx = [np.minimum(np.arange(d) // 2, n - 1) for d, n in zip(dims, src)]
        acc = np.zeros((x.shape[0], src[0], dims[1], dims[2]), dtype=g.dtype)
        np.add.at(acc, (slice(None), idx[0]), g)
        acc2 = np.zeros((x.shape[0], src[0], src[1], dims[2]), dtype=g.dtype)
        np.add.at(acc2, (slice(None), slice(None), idx[1]), acc)
        np.add.at(gx, (slice(None), slice(None), slice(None), idx[2]), acc2)
        return (gx,)

    return x.tape.record(np.ascontiguousarray(out), (x,), back)


# ---------------------------------------------------------------------------
# network layout and parameters


@dataclass
class NetSpec:
    variant: str = "fcos"
    in_channels: int = 1
    stage_channels: tuple = (8, 16, 32)
    stage_strides: tuple = (1, 2, 2)
    fpn_channels: int = 16
    fpn_levels: int = 2
    head_convs: int = 2
    n_anchors: int = 13

    def __post_init__(self):
        if self.variant not in HEAD_VARIANTS:
            raise NetError(f"head variant must be one of {HEAD_VARIANTS}, got {self.variant!r}")
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        if len(self.stage_channels) != len(self.stage_strides):
            raise NetError("stage_channels and stage_strides differ in length")
        if not 1 <= self.fpn_levels <= len(self.stage_channels):
            raise NetError(f"fpn_levels must be in [1, {len(self.stage_channels)}]")
        strides = self.level_strides
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise NetError(f"pyramid strides must increase strictly, got {strides}")

    @property
    def stage_total_strides(self) -> list[int]:
        return [int(np.prod(self.stage_strides[: i + 1])) for i in range(len(self.stage_strides))]

    @property
    def level_strides(self) -> list[int]:
        return self.stage_total_strides[-self.fpn_levels:]

    def level_dims(self, dims) -> list[tuple[int, int, int]]:
        out, cur = [], tuple(dims)
        for s in self.stage_strides:
            cur = tuple(_out_len(n, 3, s) for n in cur)
            out.append(cur)
        return out[-self.fpn_levels:]

    def layers(self) -> list[tuple[str, tuple]]:
        """``(name, weight shape)`` of every conv in creation order; biases are implied."""
        out = []
        cin = self.in_channels
        for i, c in enumerate(self.stage_channels):
            out.append((f"stage{i}", (c, cin, 3, 3, 3)))
            cin = c
        F = self.fpn_channels
        for lvl in range(self.fpn_levels):
            c = self.stage_channels[len(self.stage_channels) - self.fpn_levels + lvl]
            out.append((f"lateral{lvl}", (F, c, 1, 1, 1)))
            out.append((f"fpn_out{lvl}", (F, F, 3, 3, 3)))
        towers = ["tower"] if self.variant == "anchor" else ["cls_tower", "reg_tower"]
        for t in towers:
            for j in range(self.head_convs):
                out.append((f"{t}{j}", (F, F, 3, 3, 3)))
        if self.variant == "anchor":
            out.append(("objectness", (self.n_anchors, F, 1, 1, 1)))
            out.append(("deltas", (8 * self.n_anchors, F, 1, 1, 1)))
        else:
            out.append(("cls", (1, F, 1, 1, 1)))
            out.append(("reg", (8, F, 1, 1, 1)))
            out.append(("ctr", (1, F, 1, 1, 1)))
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_strides"] = list(self.stage_strides)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "NetSpec":
        return cls(**obj)


FINAL_LAYERS = ("objectness", "deltas", "cls", "reg", "ctr")


def init_params(spec: NetSpec, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    prior_bias = -math.log((1 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR)
    for name, shape in spec.layers():
        fan_in = int(np.prod(shape[1:]))
        std = 0.01 if name in FINAL_LAYERS else math.sqrt(2.0 / fan_in)
        params[name + ".w"] = (rng.standard_normal(shape) * std).astype(dtype)
        bias = np.zeros(shape[0], dtype=dtype)
        if name in ("objectness", "cls"):
            bias[:] = prior_bias
        params[name + ".b"] = bias
    return params


@dataclass
class LevelOutput:
    stride: int
    dims: tuple
    scores: Var  # (N,) probabilities; anchor head: N = voxels * A
    regression: Var  # (N, 8) anchor deltas, or voxel-unit targets for the anchor-free head
    centerness: Var | None = None


class MicroNet:
    """Backbone, pyramid, and one head; parameters live in :attr:`params` as numpy arrays."""

    def __init__(self, spec: NetSpec, seed: int = 0, dtype=np.float32, params: dict | None = None):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(spec, seed, self.dtype)
        self.events: list[dict] = []
        self.pyramid: list[np.ndarray] = []
        self._leaves: dict[str, Var] | None = None
        self._tape: Tape | None = None

    @property
    def level_strides(self) -> list[int]:
        return self.spec.level_strides

    def forward(self, grid, tape: Tape | None = None, requires_grad: bool = True) -> list[LevelOutput]:
        """Run the network; the FPN outputs are kept as numpy arrays in :attr:`pyramid`."""
        data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid)
        if data.ndim == 3:
            data = data[None]
        if data.shape[0] != self.spec.in_channels:
            raise NetError(f"grid has {data.shape[0]} channels, network expects {self.spec.in_channels}")
        tape = tape if tape is not None else Tape(self.dtype)
        self._tape = tape
        make = tape.var if requires_grad else (lambda v, name=None: tape.const(v))
        P = {k: make(v, name=k) for k, v in self.params.items()}
        self._leaves = P
        spec = self.spec

        def conv(x, name, stride=1):
            return conv3d(x, P[name + ".w"], P[name + ".b"], stride)

        x = tape.const(data.astype(self.dtype))
        feats = []
        for i, s in enumerate(spec.stage_strides):
            x = ad.relu(conv(x, f"stage{i}", s))
            feats.append(x)
        feats = feats[-spec.fpn_levels:]
        laterals = [conv(f, f"lateral{lvl}") for lvl, f in enumerate(feats)]
        merged = [None] * len(laterals)
        merged[-1] = laterals[-1]
        for lvl in range(len(laterals) - 2, -1, -1):
            merged[lvl] = laterals[lvl] + upsample_to(merged[lvl + 1], laterals[lvl].shape[1:], self.events)
        pyramid = [conv(m, f"fpn_out{lvl}") for lvl, m in enumerate(merged)]
        self.pyramid = [p.value for p in pyramid]

        outs = []
        for lvl, feat in enumerate(pyramid):
            stride = spec.level_strides[lvl]
            dims = feat.shape[1:]
            nvox = int(np.prod(dims))
            if spec.variant == "anchor":
                t = feat
                for j in range(spec.head_convs):
                    t = ad.relu(conv(t, f"tower{j}"))
                A = spec.n_anchors
                obj = ad.sigmoid(conv(t, "objectness")).reshape(A, nvox).transpose(1, 0).reshape(nvox * A)
                deltas = conv(t, "deltas").reshape(A, 8, nvox).transpose(2, 0, 1).reshape(nvox * A, 8)
                outs.append(LevelOutput(stride, dims, obj, deltas))
            else:
                c = feat
                r = feat
                for j in range(spec.head_convs):
                    c = ad.relu(conv(c, f"cls_tower{j}"))
                    r = ad.relu(conv(r, f"reg_tower{j}"))
                cls = ad.sigmoid(conv(c, "cls")).reshape(nvox)
                raw = conv(r, "reg").reshape(8, nvox).transpose(1, 0)
                dist = ad.exp(raw[:, :6]) * float(stride)
                offs = raw[:, 6:] * float(stride)
                reg = ad.concatenate([dist, offs], axis=1)
                ctr = ad.sigmoid(conv(r, "ctr")).reshape(nvox)
                outs.append(LevelOutput(stride, dims, cls, reg, ctr))
        return outs

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        if self._tape is None or self._leaves is None:
            raise TapeError("backward called before forward")
        self._tape.backward(loss)
        grads = {}
        for k, v in self._leaves.items():
            grads[k] = v.grad if v.grad is not None else np.zeros_like(self.params[k])
        self._tape.clear()
        self._tape = self._leaves = None
        return grads

    def positions(self, dims) -> list[np.ndarray]:
        """Input-voxel positions ``(N_l, 3)`` of every feature voxel, per level."""
        out = []
        for s, d in zip(self.level_strides, self.spec.level_dims(dims)):
            idx = np.stack(np.meshgrid(*[np.arange(n) for n in d], indexing="ij"), -1).reshape(-1, 3)
            out.append(s * idx.astype(np.float64))
        return out

    def anchors(self, dims, shortest_sides=ANCHOR_SHORTEST_SIDES, ratios=None) -> list[np.ndarray]:
        return generate_anchors(self.spec.level_dims(dims), self.level_strides, shortest_sides, ratios)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamW:
    lr: float = 3e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray] | None) -> None:
        """In-place update with decoupled weight decay."""
        if grads is None:
            raise TapeError("optimizer step requested without gradients; run forward and backward first")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for k, p in params.items():
            g = grads[k].astype(p.dtype, copy=False)
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p *= p.dtype.type(1 - self.lr * self.weight_decay)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: NetSpec
    params: dict[str, np.ndarray]
    seed: int = 0
    step: int = 0
    optimizer: AdamW | None = None
    extra: dict = field(default_factory=dict)

    def net(self) -> MicroNet:
        return MicroNet(self.spec, self.seed, np.float32, {k: v.copy() for k, v in self.params.items()})


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Writes ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian f32 tensors)."""
    path = Path(path)
    tensors, blobs, offset = [], [], 0

    def add(name, arr):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        blobs.append(a.tobytes())
        offset += a.nbytes

    for k, v in ckpt.params.items():
        add(k, v)
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"lr": o.lr, "weight_decay": o.weight_decay, "beta1": o.beta1, "beta2": o.beta2,
               "eps": o.eps, "step": o.step_count}
        for k in o.m:
            add("adam.m." + k, o.m[k])
            add("adam.v." + k, o.v[k])
    manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "netspec": ckpt.spec.to_json(),
                "seed": ckpt.seed, "step": ckpt.step, "optimizer": opt, "tensors": tensors,
                "blob": path.name + ".bin", "extra": ckpt.extra}
    path.with_name(path.name + ".bin").write_bytes(b"".join(blobs))
    path.write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetError(f"{path}: invalid checkpoint manifest at byte {exc.pos}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise NetError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    blob = path.with_name(manifest["blob"]).read_bytes()
    arrays = {}
    for t in manifest["tensors"]:
        end = t["offset"] + 4 * t["count"]
        if end > len(blob):
            raise NetError(f"{path}: tensor {t['name']} runs past the end of the blob")
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f4", count=t["count"],
                                          offset=t["offset"]).reshape(t["shape"]).astype(np.float32)
    spec = NetSpec.from_json(manifest["netspec"])
    expected = {n for name, _ in spec.layers() for n in (name + ".w", name + ".b")}
    params = {k: arrays[k] for k in arrays if not k.startswith("adam.")}
    if set(params) != expected:
        raise NetError(f"{path}: tensor table does not match the network spec")
    opt = None
    if manifest.get("optimizer"):
        o = manifest["optimizer"]
        opt = AdamW(lr=o["lr"], weight_decay=o["weight_decay"], beta1=o["beta1"], beta2=o["beta2"],
                    eps=o["eps"], step_count=o["step"])
        for k in params:
            if "adam.m." + k in arrays:
                opt.m[k] = arrays["adam.m." + k]
                opt.v[k] = arrays["adam.v." + k]
    # keep insertion order identical to a freshly initialized net
    ordered = {name + s: params[name + s] for name, _ in spec.layers() for s in (".w", ".b")}
    return Checkpoint(spec, ordered, manifest["seed"], manifest["step"], opt, manifest.get("extra", {}))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingSample:
    grid: VoxelGrid
    boxes: np.ndarray  # world-space (G, 7)
    cameras: tuple = ()


def netspec_from_config(cfg: RunConfig, variant: str | None = None, in_channels: int = 1) -> NetSpec:
    h = cfg.head
    return NetSpec(variant=variant or h.variant, in_channels=in_channels, stage_channels=h.stage_channels,
                   stage_strides=h.stage_strides, fpn_channels=h.fpn_channels, fpn_levels=h.fpn_levels,
                   head_convs=h.head_convs, n_anchors=len(expand_ratios(cfg.anchors.ratios)))


def loss_config(cfg: RunConfig, variant: str) -> LossConfig:
    t = cfg.train
    return LossConfig(lambda_anchor=t.lambda_anchor, lambda_fcos=t.lambda_fcos,
                      lambda_objectness=cfg.test.lambda_objectness, focal_gamma=t.focal_gamma,
                      focal_alpha=t.focal_alpha, smooth_l1_beta=t.smooth_l1_beta,
                      reg_loss=t.anchor_reg_loss if variant == "anchor" else t.reg_loss)


def level_positions(outputs: Sequence[LevelOutput]) -> list[np.ndarray]:
    out = []
    for o in outputs:
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in o.dims], indexing="ij"), -1).reshape(-1, 3)
        out.append(o.stride * idx.astype(np.float64))
    return out


def compute_loss(net: MicroNet, outputs: list[LevelOutput], gt_index: np.ndarray, cfg: RunConfig,
                 seed=0, proj_weight: float = 0.0, cameras: Sequence[Camera] = (),
                 grid: VoxelGrid | None = None) -> tuple[Var, LossBreakdown]:
    """Assign targets for ``gt_index`` (voxel-index boxes) and build the loss on the outputs' tape."""
    spec = net.spec
    lcfg = loss_config(cfg, spec.variant)
    if spec.variant == "anchor":
        level_dims = [o.dims for o in outputs]
        anchors = np.concatenate(generate_anchors(level_dims, net.level_strides,
                                                  cfg.anchors.shortest_sides, cfg.anchors.ratios))
        assignment = assign_anchors(anchors, gt_index, cfg.anchors.pos_iou, cfg.anchors.neg_iou)
        sampled = sample_minibatch(assignment, cfg.anchors.minibatch, cfg.anchors.pos_fraction, seed)
        targets = np.zeros((len(anchors), 8))
        pos = assignment.positives
        if len(pos):
            targets[pos] = encode_anchor_batch(gt_index[assignment.matched[pos]], anchors[pos])
        matched_boxes = np.zeros((len(anchors), 7))
        matched_boxes[pos] = gt_index[assignment.matched[pos]]
        scores = ad.concatenate([o.scores for o in outputs], axis=0)
        deltas = ad.concatenate([o.regression for o in outputs], axis=0)
        total, bd = rpn_loss_anchor(scores, deltas, assignment.labels, targets, sampled, lcfg,
                                    anchors, matched_boxes)
        proj_sel = sampled[assignment.labels[sampled] == 1]
        proj_boxes = matched_boxes[proj_sel]

        def proj_midpoint():
            return midpoint_from_anchor(deltas[proj_sel], anchors[proj_sel])
    else:
        positions = level_positions(outputs)
        ranges = level_ranges(len(outputs), cfg.head.level_bounds)
        assigns = assign_fcos(positions, net.level_strides, gt_index, cfg.head.center_radius, ranges)
        labels = np.concatenate([a.labels for a in assigns])
        targets = np.concatenate([a.targets for a in assigns])
        cstar = np.concatenate([a.centerness for a in assigns])
        matched = np.concatenate([a.matched for a in assigns])
        pos_all = np.concatenate(positions)
        matched_boxes = np.zeros((len(labels), 7))
        pos = np.nonzero(labels == 1)[0]
        matched_boxes[pos] = gt_index[matched[pos]]
        cls = ad.concatenate([o.scores for o in outputs], axis=0)
        reg = ad.concatenate([o.regression for o in outputs], axis=0)
        ctr = ad.concatenate([o.centerness for o in outputs], axis=0)
        total, bd = rpn_loss_fcos(cls, reg, ctr, labels, targets, cstar, pos_all, matched_boxes, lcfg)
        proj_sel = pos
        proj_boxes = matched_boxes[pos]

        def proj_midpoint():
            return midpoint_from_fcos(reg[proj_sel], pos_all[proj_sel])

    if proj_weight > 0 and cameras and len(proj_sel):
        if grid is None:
            raise NetError("the projection loss needs the grid to map voxel indices to world space")
        proj = projection_term(proj_midpoint(), grid.to_world(proj_boxes), cameras, grid)
        total = total + proj * proj_weight
        bd.proj = float(proj.value)
        bd.total = float(total.value)
    return total, bd


def projection_term(m: Var, gt_world: np.ndarray, cameras: Sequence[Camera], grid: VoxelGrid) -> Var:
    """Projection loss of predicted midpoint boxes (voxel units) against world-space GT boxes."""
    fp, _ = rect_from_midpoint(m)
    n = fp.shape[0]
    fp_world = fp * float(grid.spacing) + np.asarray(grid.origin[:2])
    order = align_corner_order(fp_world.value, gt_world)
    fp_world = ad.take_along_axis(fp_world, order[:, :, None], axis=1)
    zc = m[:, 2] * float(grid.spacing) + float(grid.origin[2])
    h = m[:, 5] * float(grid.spacing)
    corners = corners_from_rect(fp_world, zc, h)
    return proj_loss_2d(corners, corners_batch(gt_world).reshape(n, 8, 3), cameras)


def _json_float(x: float):
    return x if math.isfinite(x) else repr(x)


def train(samples: Sequence[TrainingSample], variant: str = "fcos", config: RunConfig | None = None,
          seed: int = 0, log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
          on_step: Callable[[int, LossBreakdown], None] | None = None,
          time_budget_s: float | None = None) -> tuple[Checkpoint, list[dict]]:
    """One scene per step: augment, forward, assign, loss, backward, AdamW.

    Deterministic for a given seed. Aborts with :class:`TrainingError` on a
    non-finite loss. ``time_budget_s`` stops early once the wall clock runs out.
    """
    from .scene_forge import AugmentSpec, _augment_params

    cfg = config or RunConfig()
    if not samples:
        raise NetError("no training samples")
    channels = samples[0].grid.channels
    spec = netspec_from_config(cfg, variant, channels)
    ss = np.random.SeedSequence(seed)
    init_seed, order_seed, aug_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    dtype = np.float64 if cfg.train.dtype == "float64" else np.float32
    net = MicroNet(spec, init_seed, dtype)
    opt = AdamW(cfg.train.learning_rate, cfg.train.weight_decay)
    order_rng = np.random.default_rng(order_seed)
    aug_rng = np.random.default_rng(aug_seed)
    t = cfg.train
    aug = AugmentSpec(t.flip_prob, t.flip_prob, t.rot90_prob, t.jitter_prob, t.jitter_range)
    aug_no_rot = AugmentSpec(t.flip_prob, t.flip_prob, 0.0, t.jitter_prob, t.jitter_range)
    log: list[dict] = []
    fh = open(log_path, "w") if log_path else None
    order: list[int] = []
    start = time.perf_counter()
    try:
        for step in range(t.steps):
            if not order:
                order = list(order_rng.permutation(len(samples)))
            sample = samples[order.pop(0)]
            grid, boxes = sample.grid, np.asarray(sample.boxes, dtype=np.float64).reshape(-1, 7)
            grid, boxes = _augment_params(grid, boxes, aug if grid.dims[0] == grid.dims[1] else aug_no_rot, aug_rng)
            step_seed = int(aug_rng.integers(2 ** 31))
            tape = Tape(dtype)
            outputs = net.forward(grid, tape)
            total, bd = compute_loss(net, outputs, grid.to_index(boxes), cfg, step_seed,
                                     t.proj_loss_weight, sample.cameras, grid)
            record = {"step": step, **{k: _json_float(v) if isinstance(v, float) else v
                                       for k, v in bd.to_json().items()}}
            if not np.isfinite(bd.total):
                raise TrainingError(f"non-finite loss at step {step}: {record}", step, record)
            grads = net.backward(total)
            opt.step(net.params, grads)
            log.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
            if on_step:
                on_step(step, bd)
            if checkpoint_path and t.checkpoint_every and (step + 1) % t.checkpoint_every == 0:
                save_checkpoint(Checkpoint(spec, net.params, init_seed, step + 1, opt), checkpoint_path)
            if time_budget_s is not None and time.perf_counter() - start > time_budget_s:
                break
    finally:
        if fh:
            fh.close()
    ckpt = Checkpoint(spec, net.params, init_seed, len(log), opt, {"train_seed": seed})
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt, log
