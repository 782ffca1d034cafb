import json
import subprocess
import sys

import numpy as np
import pytest

from voxrpn.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from voxrpn.field_sampler import read_nvg


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "scene": {"count_range": [1, 2]},
        "sampling": {"target_longest": 16},
        "head": {"stage_channels": [2, 3, 4], "fpn_channels": 3, "head_convs": 1},
        "test": {"refine_steps": 2, "refine_hidden": 4},
    }))
    return str(path)


def test_version_names_the_file_formats(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "NVG1" in out and "scene v1" in out and "checkpoint v1" in out


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "voxrpn", "--version"], capture_output=True, text=True)
    assert done.returncode == 0 and "NVG1" in done.stdout


def test_usage_errors_exit_one(capsys):
    assert main([]) == EXIT_INVALID
    assert "usage:" in capsys.readouterr().err
    assert main(["propose", "--grid", "g.nvg"]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "usage:" in err and "--ckpt" in err
    assert main(["frobnicate"]) == EXIT_INVALID
    assert main(["synth", "--out", "x", "--count", "many"]) == EXIT_INVALID


def test_bad_inputs_exit_one(tmp_path, capsys):
    assert main(["propose", "--grid", str(tmp_path / "none.nvg"), "--ckpt", "c", "--out", "o"]) == EXIT_INVALID
    (tmp_path / "g.nvg").write_bytes(b"NVG9" + bytes(40))
    (tmp_path / "c.json").write_text("{}")
    assert main(["propose", "--grid", str(tmp_path / "g.nvg"), "--ckpt", str(tmp_path / "c.json"),
                 "--out", "o"]) == EXIT_INVALID
    (tmp_path / "cfg.json").write_text('{"nope": 1}')
    assert main(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "cfg.json")]) == EXIT_INVALID
    assert "unknown config keys" in capsys.readouterr().err


def test_pipeline_smoke(tmp_path, small_config, capsys):
    data, work = tmp_path / "data", tmp_path / "work"
    work.mkdir()
    assert main(["synth", "--count", "10", "--out", str(data), "--seed", "3", "--no-grid",
                 "--config", small_config]) == EXIT_OK
    scenes = sorted(str(p) for p in data.glob("*.json"))
    assert len(scenes) == 10 and not list(data.glob("*.nvg"))
    assert main(["sample", "--scene", *scenes, "--config", small_config]) == EXIT_OK
    assert len(list(data.glob("*.nvg"))) == 10
    assert max(read_nvg(data / "scene_0000.nvg").dims) == 16

    ckpt = str(work / "model.json")
    log = work / "log.jsonl"
    assert main(["train", "--data", str(data), "--steps", "2", "--out", ckpt, "--log", str(log),
                 "--config", small_config]) == EXIT_OK
    assert len(log.read_text().splitlines()) == 2

    props = str(work / "p.json")
    grid = str(data / "scene_0000.nvg")
    assert main(["propose", "--grid", grid, "--ckpt", ckpt, "--out", props, "--config", small_config]) == EXIT_OK
    doc = json.loads((work / "p.json").read_text())
    assert doc["proposals"] and set(doc["timings_ms"]) == {"forward", "decode", "select", "nms"}

    all_props = []
    for i, scene in enumerate(scenes):
        all_props.append(str(work / f"p{i}.json"))
        assert main(["propose", "--grid", scene[:-5] + ".nvg", "--ckpt", ckpt, "--out", all_props[-1],
                     "--config", small_config]) == EXIT_OK
    report, table = work / "r.json", work / "r.csv"
    assert main(["eval", "--proposals", *all_props, "--scene", *scenes, "--out", str(report),
                 "--csv", str(table)]) == EXIT_OK
    rep = json.loads(report.read_text())
    assert set(rep["recall"]) == {"0.25", "0.5"} and all(0 <= v <= 1 for v in rep["recall"].values())
    assert len(rep["scenes"]) == 10
    assert table.read_text().startswith("scene,n_gt,n_proposals")
    assert main(["eval", "--proposals", props, props, "--scene", str(data / "scene_0000.json")]) == EXIT_INVALID

    head = str(work / "head.json")
    assert main(["refine", "--fit", "--ckpt", ckpt, "--data", str(data), "--out", head,
                 "--config", small_config]) == EXIT_OK
    assert main(["refine", "--ckpt", ckpt, "--grid", grid, "--head-params", head, "--out", str(work / "rp.json"),
                 "--config", small_config]) == EXIT_OK
    assert "proposals" in json.loads((work / "rp.json").read_text())

    assert main(["project", "--scene", str(data / "scene_0000.json"), "--out", str(work / "proj.json")]) == EXIT_OK
    assert json.loads((work / "proj.json").read_text())["projections"]


def test_edit_zeroes_the_box(tmp_path, small_config):
    assert main(["synth", "--out", str(tmp_path), "--config", small_config]) == EXIT_OK
    src = read_nvg(tmp_path / "scene_0000.nvg")
    box = json.dumps({"center": list(src.voxel_centers()[4, 4, 4]), "size": [src.spacing * 2.5] * 3, "yaw": 0.0})
    out = tmp_path / "edited.nvg"
    assert main(["edit", "--grid", str(tmp_path / "scene_0000.nvg"), "--box", box, "--out", str(out)]) == EXIT_OK
    edited = read_nvg(out)
    assert not edited.data[:, 3:6, 3:6, 3:6].any()
    assert np.array_equal(edited.data[:, 8:, 8:, 8:], src.data[:, 8:, 8:, 8:])
    assert main(["edit", "--grid", str(out), "--box", "{oops", "--out", str(out)]) == EXIT_INVALID


def test_unwritable_output_is_a_runtime_failure(tmp_path, small_config, capsys):
    assert main(["synth", "--out", str(tmp_path), "--config", small_config]) == EXIT_OK
    blocked = tmp_path / "dir"
    blocked.mkdir()
    # the output path is a directory, so the write fails after the inputs were accepted
    code = main(["edit", "--grid", str(tmp_path / "scene_0000.nvg"),
                 "--box", '{"center": [0, 0, 0], "size": [1, 1, 1], "yaw": 0}', "--out", str(blocked)])
    assert code == EXIT_RUNTIME
    assert "IsADirectoryError" in capsys.readouterr().err
