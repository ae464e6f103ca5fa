import json
import os
from dataclasses import asdict

import numpy as np
import pytest

from sparsevox.cli import main
from sparsevox.config import RunConfig, serialize_config
from sparsevox.scenegen import load_manifest, load_scene

from conftest import tiny_config, tiny_spec


def write_spec(tmp_path, **kw):
    spec = tiny_spec(**kw)
    path = str(tmp_path / "spec.json")
    with open(path, "w") as f:
        json.dump(asdict(spec), f)
    return path


def gen(tmp_path, count=2, seed=0, name="scenes", **kw):
    out = str(tmp_path / name)
    spec = write_spec(tmp_path, **kw)
    assert main(["gen-scenes", "--out", out, "--count", str(count),
                 "--seed", str(seed), "--spec", spec]) == 0
    return out


def write_config(tmp_path, **kw):
    cfg = tiny_config(**kw)
    path = str(tmp_path / "run.cfg")
    with open(path, "w") as f:
        f.write(serialize_config(cfg))
    return path


def test_gen_scenes_files_and_manifest(tmp_path):
    out = gen(tmp_path, count=1)
    doc, files = load_manifest(out)
    assert doc["count"] == 1
    assert len(files) == 1
    assert os.path.exists(files[0])
    assert os.path.exists(files[0].replace(".json", ".svpc"))


def test_gen_scenes_deterministic_bytes(tmp_path):
    a = gen(tmp_path, count=2, seed=3, name="a")
    b = gen(tmp_path, count=2, seed=3, name="b")
    for name in sorted(os.listdir(a)):
        with open(os.path.join(a, name), "rb") as fa, \
             open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read(), name


def test_gen_scene_seeds_are_sequential(tmp_path):
    out = gen(tmp_path, count=3, seed=10)
    _, files = load_manifest(out)
    assert [load_scene(p).seed for p in files] == [10, 11, 12]


def test_analyze_sparsity_outputs(tmp_path, capsys):
    out = gen(tmp_path, count=2)
    rep = str(tmp_path / "report")
    code = main(["analyze-sparsity", "--scenes", out, "--out", rep,
                 "--voxel-size", "1.8,1.8,1.0", "--stages", "2x2x2",
                 "--no-image"])
    assert code == 0
    text = capsys.readouterr().out
    assert "BEV cell count: 900" in text
    assert os.path.exists(os.path.join(rep, "sparsity.json"))
    assert os.path.exists(os.path.join(rep, "sparsity.csv"))


def test_analyze_sparsity_coarser_grid_fewer_cells(tmp_path):
    out = gen(tmp_path, count=2)

    def mean_final(voxel):
        rep = str(tmp_path / f"rep{voxel[0]}")
        main(["analyze-sparsity", "--scenes", out, "--out", rep,
              "--voxel-size", ",".join(map(str, voxel)), "--stages", "2x2x2",
              "--no-image"])
        return json.load(open(os.path.join(rep, "sparsity.json")))["mean_final"]

    assert mean_final((3.6, 3.6, 2.0)) < mean_final((1.8, 1.8, 1.0))


def test_analyze_missing_scenes_exits_2(tmp_path):
    assert main(["analyze-sparsity", "--scenes", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "r")]) == 2


def test_train_smoke_and_determinism(tmp_path):
    scenes = gen(tmp_path, count=2)
    cfg = write_config(tmp_path, steps=25)
    ck1 = str(tmp_path / "a.svxf")
    ck2 = str(tmp_path / "b.svxf")
    assert main(["train", "--scenes", scenes, "--config", cfg, "--out", ck1]) == 0
    assert main(["train", "--scenes", scenes, "--config", cfg, "--out", ck2]) == 0
    with open(ck1, "rb") as fa, open(ck2, "rb") as fb:
        assert fa.read() == fb.read()
    with open(ck1 + ".loss.csv") as fa, open(ck2 + ".loss.csv") as fb:
        assert fa.read() == fb.read()
    rows = open(ck1 + ".loss.csv").read().strip().splitlines()
    assert rows[0].startswith("step,")
    assert len(rows) == 26
    first = float(rows[1].split(",")[2])
    last = float(rows[-1].split(",")[2])
    assert last < first


def test_train_loss_decreases_50_steps(tmp_path):
    scenes = gen(tmp_path, count=2)
    cfg = write_config(tmp_path, steps=50)
    ck = str(tmp_path / "c.svxf")
    assert main(["train", "--scenes", scenes, "--config", cfg, "--out", ck]) == 0
    rows = open(ck + ".loss.csv").read().strip().splitlines()[1:]
    totals = [float(r.split(",")[2]) for r in rows]
    assert totals[-1] < totals[0]


def test_train_nan_aborts_exit_3(tmp_path):
    scenes = gen(tmp_path, count=1)
    cfg = write_config(tmp_path, steps=60, optimizer="sgd", lr=1e18,
                      grad_clip=0.0, denoise=False)
    ck = str(tmp_path / "nan.svxf")
    code = main(["train", "--scenes", scenes, "--config", cfg, "--out", ck])
    assert code == 3
    assert os.path.exists(ck + ".loss.csv")  # log preserved


def test_detect_eval_round_trip(tmp_path, capsys):
    scenes = gen(tmp_path, count=2)
    cfg = write_config(tmp_path, steps=10)
    ck = str(tmp_path / "m.svxf")
    assert main(["train", "--scenes", scenes, "--config", cfg, "--out", ck]) == 0
    det1 = str(tmp_path / "d1.json")
    det2 = str(tmp_path / "d2.json")
    assert main(["detect", "--ckpt", ck, "--scenes", scenes, "--out", det1]) == 0
    assert main(["detect", "--ckpt", ck, "--scenes", scenes, "--out", det2]) == 0
    with open(det1, "rb") as fa, open(det2, "rb") as fb:
        assert fa.read() == fb.read()
    doc = json.load(open(det1))
    assert "config_hash" in doc["metadata"]
    ev = str(tmp_path / "metrics.json")
    assert main(["eval", "--detections", det1, "--scenes", scenes,
                 "--out", ev]) == 0
    metrics = json.load(open(ev))
    assert 0.0 <= metrics["map"] <= 1.0
    assert "range_bands" in metrics


def test_eval_oracle_detections_reach_map_one(tmp_path):
    scenes_dir = gen(tmp_path, count=2)
    _, files = load_manifest(scenes_dir)
    entries = []
    for p in files:
        scene = load_scene(p)
        dets = [dict(b.to_dict(), score=0.9) for b in scene.gt_boxes]
        entries.append({"scene": os.path.basename(p), "detections": dets})
    det = str(tmp_path / "oracle.json")
    with open(det, "w") as f:
        json.dump({"metadata": {}, "scenes": entries}, f)
    ev = str(tmp_path / "m.json")
    assert main(["eval", "--detections", det, "--scenes", scenes_dir,
                 "--out", ev]) == 0
    metrics = json.load(open(ev))
    assert metrics["map"] == pytest.approx(1.0)
    assert metrics["nds_simplified"] == pytest.approx(1.0)


def test_eval_empty_detections_map_zero(tmp_path):
    scenes_dir = gen(tmp_path, count=1)
    _, files = load_manifest(scenes_dir)
    doc = {"metadata": {}, "scenes": [{"scene": os.path.basename(files[0]),
                                       "detections": []}]}
    det = str(tmp_path / "empty.json")
    with open(det, "w") as f:
        json.dump(doc, f)
    ev = str(tmp_path / "m.json")
    assert main(["eval", "--detections", det, "--scenes", scenes_dir,
                 "--out", ev]) == 0
    assert json.load(open(ev))["map"] == 0.0


def test_detect_version_mismatch_exit_4(tmp_path, capsys):
    scenes = gen(tmp_path, count=1)
    cfg_path = write_config(tmp_path, steps=2)
    ck = str(tmp_path / "v.svxf")
    assert main(["train", "--scenes", scenes, "--config", cfg_path, "--out", ck]) == 0
    blob = bytearray(open(ck, "rb").read())
    blob[4:8] = (99).to_bytes(4, "little")  # force version 99
    with open(ck, "wb") as f:
        f.write(bytes(blob))
    code = main(["detect", "--ckpt", ck, "--scenes", scenes,
                 "--out", str(tmp_path / "d.json")])
    assert code == 4
    err = capsys.readouterr().err
    assert "99" in err and "1" in err


def test_project_check_passes_on_default_scenes(tmp_path, capsys):
    scenes = gen(tmp_path, count=2, seed=5)
    assert main(["project-check", "--scenes", scenes, "--samples", "20"]) == 0
    out = capsys.readouterr().out
    assert "(100.0%)" in out
    max_err = float(out.split("max round-trip error:")[1].split("m")[0])
    assert max_err < 1e-6


def test_project_check_rejects_tampered_camera(tmp_path):
    scenes = gen(tmp_path, count=1)
    _, files = load_manifest(scenes)
    doc = json.load(open(files[0]))
    doc["cameras"][0]["T"][0] = 3.0  # break orthonormality
    with open(files[0], "w") as f:
        json.dump(doc, f)
    assert main(["project-check", "--scenes", scenes]) == 2


def test_unwritable_output_exit_2(tmp_path):
    target = tmp_path / "file.txt"
    target.write_text("x")
    # path exists as a file -> cannot be used as a directory
    assert main(["gen-scenes", "--out", str(target), "--count", "1",
                 "--seed", "0"]) == 2
