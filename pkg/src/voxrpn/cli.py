"""Command line entry point: ``voxrpn <subcommand> [options]``.

Exit status: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .field_sampler import read_nvg, write_nvg
from .geometry import Obb, project_box
from .metrics import evaluate
from .micronet import CHECKPOINT_VERSION, TrainingSample, load_checkpoint, train
from .proposals import (RefineHead, RefineSample, load_proposals, propose, refine, rpn_proposals,
                        save_proposals, train_refiner)
from .scene_forge import SCENE_VERSION, delete_region, load_scene, place_cameras, sample_scene, save_scene, synth_scene

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config)


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _pairs(data_dir: Path) -> list[tuple[Path, Path]]:
    """``scene_*.json`` files that have a sibling ``.nvg`` grid."""
    pairs = []
    for scene in sorted(data_dir.glob("*.json")):
        grid = scene.with_suffix(".nvg")
        if grid.exists():
            pairs.append((scene, grid))
    if not pairs:
        raise UsageError(f"no scene/grid pairs (name.json + name.nvg) in {data_dir}")
    return pairs


# ---------------------------------------------------------------------------
# subcommands


def _sample_to(scene, cfg: RunConfig, out_path) -> None:
    s = cfg.sampling
    write_nvg(sample_scene(scene, s.target_longest, s.strategy, s.margin_fraction, s.use_room_volume), out_path)


def _synth_one(job):
    seed, stem, cfg_json, with_grid = job
    cfg = RunConfig.from_json(cfg_json)
    scene = synth_scene(cfg.scene, seed)
    save_scene(scene, stem + ".json")
    if with_grid:
        _sample_to(scene, cfg, stem + ".nvg")
    return stem


def _sample_one(job):
    scene_path, out_path, cfg_json = job
    _sample_to(load_scene(scene_path), RunConfig.from_json(cfg_json), out_path)
    return out_path


def _run_jobs(fn, jobs, n_workers: int) -> list:
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_synth(args) -> int:
    """Each scene becomes ``scene_XXXX.json`` plus its sampled ``scene_XXXX.nvg``."""
    cfg = _load_config(args)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
    jobs = [(int(s), str(out / f"scene_{i:04d}"), cfg.to_json(), not args.no_grid) for i, s in enumerate(seeds)]
    _run_jobs(_synth_one, jobs, args.jobs)
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    scenes = [_require(p, "scene file") for p in args.scene]
    out = Path(args.out) if args.out else None
    jobs = []
    for p in scenes:
        target = (out / p.with_suffix(".nvg").name) if out else p.with_suffix(".nvg")
        if out:
            out.mkdir(parents=True, exist_ok=True)
        jobs.append((str(p), str(target), cfg.to_json()))
    done = _run_jobs(_sample_one, jobs, args.jobs)
    print(f"wrote {len(done)} grids")
    return EXIT_OK


def _samples(data_dir: Path, cameras: bool = False) -> list[TrainingSample]:
    out = []
    for scene_path, grid_path in _pairs(data_dir):
        scene = load_scene(scene_path)
        cams = tuple(place_cameras(scene, 4, mode="corners")) if cameras else ()
        out.append(TrainingSample(read_nvg(grid_path), scene.box_params(), cams))
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    samples = _samples(_require(args.data, "training data directory"), cfg.train.proj_loss_weight > 0)
    head = args.head or cfg.head.variant
    ckpt, _ = train(samples, head, cfg, args.seed, args.log, args.out)
    print(f"trained {head} head for {ckpt.step} steps -> {args.out}")
    return EXIT_OK


def cmd_propose(args) -> int:
    cfg = _load_config(args)
    grid = read_nvg(_require(args.grid, "grid"))
    ckpt = load_checkpoint(_require(args.ckpt, "checkpoint"))
    ps, timings = propose(grid, ckpt, cfg)
    save_proposals(args.out, ps, timings)
    print(f"{len(ps)} proposals -> {args.out}")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _load_config(args)
    ckpt = load_checkpoint(_require(args.ckpt, "checkpoint"))
    if args.fit:
        samples = [RefineSample(s.grid, s.boxes) for s in _samples(_require(args.data, "training data directory"))]
        head = train_refiner(ckpt, samples, cfg, args.seed)
        Path(args.out).write_text(json.dumps(head.to_json()))
        print(f"refinement head -> {args.out}")
        return EXIT_OK
    grid = read_nvg(_require(args.grid, "grid"))
    head = RefineHead.from_json(json.loads(_require(args.head_params, "refinement head").read_text()))
    net = ckpt.net()
    t = cfg.test
    ps, timings = rpn_proposals(net, grid, cfg, nms_iou=t.refine_input_nms_iou)
    ps = refine(ps, net.pyramid, net.level_strides, head, t.refine_score, t.roi_enlarge, t.roi_base_size)
    save_proposals(args.out, ps.with_boxes(grid.to_world(ps.boxes)), timings)
    print(f"{len(ps)} refined proposals -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if len(args.proposals) != len(args.scene):
        raise UsageError("give one --scene per --proposals file")
    items = []
    for prop_path, scene_path in zip(args.proposals, args.scene):
        ps = load_proposals(_require(prop_path, "proposals"))
        order = np.lexsort((np.arange(len(ps)), -ps.scores))
        items.append((Path(prop_path).stem, ps.boxes[order], load_scene(_require(scene_path, "scene")).box_params()))
    report = evaluate(items, cfg.eval.ious)
    text = json.dumps(report.to_json(), indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def cmd_project(args) -> int:
    scene = load_scene(_require(args.scene, "scene"))
    cams = scene.cameras or place_cameras(scene, 4, mode="corners")
    out = []
    for ci, cam in enumerate(cams):
        for bi, box in enumerate(scene.boxes):
            corners = box_corners_visible(cam, box)
            out.append({"camera": ci, "box": bi, "pixels": corners})
    text = json.dumps({"cameras": [c.to_json() for c in cams], "projections": out}, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def box_corners_visible(cam, box: Obb):
    """Pixel corners, or ``None`` when a corner lies behind the camera."""
    from .geometry import GeometryError
    try:
        return project_box(cam, box).tolist()
    except GeometryError:
        return None


def cmd_edit(args) -> int:
    grid = read_nvg(_require(args.grid, "grid"))
    try:
        box = Obb.from_json(json.loads(args.box))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--box is not valid JSON (byte {exc.pos})") from exc
    write_nvg(delete_region(grid, box), args.out)
    print(f"edited grid -> {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all
    results = run_all(args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxrpn", description="Region proposals for rotated 3D boxes in voxel grids.")
    p.add_argument("--version", action="version",
                   version=f"voxrpn {__version__} (NVG1, scene v{SCENE_VERSION}, checkpoint v{CHECKPOINT_VERSION})")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "generate synthetic scenes")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--no-grid", action="store_true", help="write scene JSON only")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("sample", cmd_sample, "voxelize scenes into NVG1 grids")
    sp.add_argument("--scene", nargs="+", required=True)
    sp.add_argument("--out", help="output directory (default: next to each scene)")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("train", cmd_train, "train a proposal network")
    sp.add_argument("--data", required=True, help="directory of name.json + name.nvg pairs")
    sp.add_argument("--head", choices=["anchor", "fcos"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True, help="checkpoint manifest path")
    sp.add_argument("--log", help="JSON-lines loss log")

    sp = add("propose", cmd_propose, "propose boxes for a grid")
    sp.add_argument("--grid", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)

    sp = add("refine", cmd_refine, "fit or apply the objectness refinement stage")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--fit", action="store_true", help="train the refinement head on --data")
    sp.add_argument("--data")
    sp.add_argument("--grid")
    sp.add_argument("--head-params", help="refinement head JSON written by --fit")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score proposals against scene boxes")
    sp.add_argument("--proposals", nargs="+", required=True)
    sp.add_argument("--scene", nargs="+", required=True)
    sp.add_argument("--out")
    sp.add_argument("--csv")

    sp = add("project", cmd_project, "project scene boxes into its cameras")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out")

    sp = add("edit", cmd_edit, "zero the voxels inside a box")
    sp.add_argument("--grid", required=True)
    sp.add_argument("--box", required=True, help='JSON: {"center": [..], "size": [..], "yaw": ..}')
    sp.add_argument("--out", required=True)

    add("selftest", cmd_selftest, "run IoU and gradient self-checks")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_INVALID
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        print(f"voxrpn: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort exit status
        print(f"voxrpn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
