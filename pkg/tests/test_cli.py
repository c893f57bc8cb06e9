import json
import sys

import numpy as np
import pytest

from visnerf.cli import main
from visnerf.io import load_checkpoint, read_mask_png, read_pfm, read_png
from visnerf.pipeline import StagePlan

TINY_FIELD = {"levels": 3, "base_resolution": 4, "log2_table_size": 10, "hidden_width": 16, "geo_features": 8}


@pytest.fixture(scope="module")
def scene_path(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["make-scene", "--kind", "box-occluder", "--resolution", "16", "--cameras", "3",
                 "--image-size", "12", "--samples", "64", "--out-dir", str(out)]) == 0
    return out / "scene.json"


def tiny_plan(path, **kw):
    d = dict(stage1_iters=3, stage2_iters=2, stage3_iters=2, rays_per_batch=64, samples_per_ray=16,
             eval_samples=16, field=TINY_FIELD,
             visibility={"k": 2, "tau": 0.5, "n_secondary": 8, "lattice_resolution": 6})
    d.update(kw)
    StagePlan(**d).save(path)
    return path


@pytest.fixture(scope="module")
def checkpoint(scene_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    plan = tiny_plan(out / "plan.json")
    assert main(["train", str(scene_path), str(plan), str(out / "m.ckpt"), "--stage", "1"]) == 0
    return out / "m.ckpt"


def test_make_scene_outputs(scene_path):
    doc = json.loads(scene_path.read_text())
    assert {f["split"] for f in doc["frames"]} == {"train", "interp", "extrap"}
    assert doc["seed"] == 0 and (scene_path.parent / doc["voxel_field"]).exists()


def test_train_writes_log_and_meta(checkpoint):
    ck = load_checkpoint(checkpoint)
    assert ck.meta["stages_completed"] == [1] and ck.meta["seed"] == 0
    lines = checkpoint.with_suffix(".csv").read_text().splitlines()
    assert len(lines) == 1 + 3


def test_resume_all(scene_path, checkpoint, tmp_path):
    plan = tiny_plan(tmp_path / "plan.json")
    out = tmp_path / "all.ckpt"
    assert main(["train", str(scene_path), str(plan), str(out), "--resume", str(checkpoint)]) == 0
    ck = load_checkpoint(out)
    assert ck.meta["stages_completed"] == [1, 2, 3]
    assert set(ck.meta["stage_meta"]) == {"2", "3"}


def test_render(scene_path, checkpoint, tmp_path):
    rc = main(["render", str(checkpoint), "--scene", str(scene_path), "--camera-index", "1",
               "--out-color", str(tmp_path / "c.png"), "--out-depth", str(tmp_path / "d.pfm"),
               "--out-opacity", str(tmp_path / "o.pfm"), "--samples", "16"])
    assert rc == 0
    assert read_png(tmp_path / "c.png").shape == (12, 12, 3)
    assert read_pfm(tmp_path / "d.pfm").shape == (12, 12)
    o = read_pfm(tmp_path / "o.pfm")
    assert np.all((o >= 0) & (o <= 1))


def test_render_pose_file(scene_path, checkpoint, tmp_path):
    pose = tmp_path / "pose.json"
    pose.write_text(json.dumps({"transform": np.eye(4).tolist(), "near": 0.5, "far": 3.0}))
    rc = main(["render", str(checkpoint), "--scene", str(scene_path), "--pose", str(pose),
               "--out-color", str(tmp_path / "c.png"), "--samples", "8"])
    assert rc == 0


def test_visibility(scene_path, checkpoint, tmp_path):
    rc = main(["visibility", str(checkpoint), "--scene", str(scene_path), "--split", "extrap",
               "--camera-index", "0", "--k", "2", "--tau", "0.4", "--primary", "16", "--secondary", "8",
               "--out", str(tmp_path / "v.pfm"), "--preview", str(tmp_path / "v.png"),
               "--mask", str(tmp_path / "m.png")])
    assert rc == 0
    v = read_pfm(tmp_path / "v.pfm")
    side = json.loads((tmp_path / "v.json").read_text())
    assert side["tau"] == 0.4 and side["k"] == 2 and len(side["camera_set_hash"]) == 16
    np.testing.assert_array_equal(read_mask_png(tmp_path / "m.png"), v < 0.4)


def test_eval(scene_path, checkpoint, tmp_path):
    rc = main(["eval", str(checkpoint), "--scene", str(scene_path), "--split", "interp",
               "--samples", "16", "--out", str(tmp_path / "e.json")])
    assert rc == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    assert rep["split"] == "interp" and rep["seed"] == 0
    for v in rep["views"]:
        assert sum(v["counts"].values()) == 144


class TestExitCodes:
    def test_unknown_plan_key(self, scene_path, tmp_path):
        (tmp_path / "p.json").write_text(json.dumps({"stage1_iter": 3}))
        assert main(["train", str(scene_path), str(tmp_path / "p.json"), str(tmp_path / "x.ckpt")]) == 2

    def test_missing_scene(self, tmp_path):
        plan = tiny_plan(tmp_path / "p.json")
        assert main(["train", str(tmp_path / "none.json"), str(plan), str(tmp_path / "x.ckpt")]) == 2

    def test_bad_tau(self, scene_path, checkpoint, tmp_path):
        rc = main(["visibility", str(checkpoint), "--scene", str(scene_path), "--camera-index", "0",
                   "--tau", "1.5", "--out", str(tmp_path / "v.pfm")])
        assert rc == 2

    def test_numeric_failure(self, scene_path, tmp_path):
        import shutil

        from visnerf.io import write_pfm

        bad = tmp_path / "bad"
        shutil.copytree(scene_path.parent, bad)
        for p in (bad / "depth").glob("train_*.pfm"):
            write_pfm(p, np.full((12, 12), np.nan, np.float32))
        plan = tiny_plan(tmp_path / "p.json")
        rc = main(["train", str(bad / "scene.json"), str(plan), str(tmp_path / "x.ckpt"), "--stage", "1"])
        assert rc == 3

    def test_provider_failure(self, scene_path, checkpoint, tmp_path):
        plan = tiny_plan(tmp_path / "p.json")
        cmd = f"subprocess:{sys.executable} -c 'import sys; sys.exit(1)'"
        rc = main(["train", str(scene_path), str(plan), str(tmp_path / "x.ckpt"), "--stage", "2",
                   "--resume", str(checkpoint), "--provider", cmd])
        assert rc == 4

    def test_thread_env(self, scene_path, checkpoint, tmp_path, monkeypatch):
        monkeypatch.setenv("VISNERF_THREADS", "1")
        rc = main(["eval", str(checkpoint), "--scene", str(scene_path), "--split", "train",
                   "--samples", "8", "--out", str(tmp_path / "e.json")])
        assert rc == 0
        monkeypatch.setenv("VISNERF_THREADS", "many")
        assert main(["eval", str(checkpoint), "--scene", str(scene_path), "--out", str(tmp_path / "e.json")]) == 2
