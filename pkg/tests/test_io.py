import json

import numpy as np
import pytest

from visnerf.errors import ConfigError
from visnerf.field import VoxelField
from visnerf.geometry import Camera, Intrinsics, Pose, look_at
from visnerf.io import (TrainingLog, load_checkpoint, load_scene, read_mask_png, read_pfm, read_png, read_voxel_field,
                        save_checkpoint, srgb_decode, srgb_encode, write_mask_png, write_pfm, write_png,
                        write_voxel_field)
from visnerf.losses import LossReport

from conftest import small_hash_field


class TestPfm:
    @pytest.mark.parametrize("shape", [(5, 7), (4, 6, 3)])
    def test_round_trip(self, tmp_path, rng, shape):
        a = rng.normal(size=shape).astype(np.float32)
        write_pfm(tmp_path / "a.pfm", a)
        b = read_pfm(tmp_path / "a.pfm")
        assert b.dtype == np.float32 and b.tobytes() == a.tobytes()

    def test_layout(self, tmp_path):
        a = np.array([[1, 2], [3, 4]], np.float32)
        write_pfm(tmp_path / "a.pfm", a)
        raw = (tmp_path / "a.pfm").read_bytes()
        assert raw.startswith(b"Pf\n2 2\n-1.0\n")
        body = np.frombuffer(raw[len(b"Pf\n2 2\n-1.0\n"):], "<f4")
        np.testing.assert_array_equal(body, [3, 4, 1, 2])  # bottom row first


class TestPng:
    def test_srgb_inverse(self, rng):
        x = rng.uniform(size=100)
        np.testing.assert_allclose(srgb_decode(srgb_encode(x)), x, atol=1e-12)

    def test_round_trip(self, tmp_path, rng):
        a = rng.uniform(size=(6, 5, 3))
        write_png(tmp_path / "a.png", a)
        b = read_png(tmp_path / "a.png")
        assert np.abs(srgb_encode(a) - srgb_encode(b)).max() <= 0.5 / 255 + 1e-12
        write_png(tmp_path / "b.png", b)
        assert read_png(tmp_path / "b.png").tobytes() == b.tobytes()

    def test_mask(self, tmp_path, rng):
        m = rng.random((5, 9)) < 0.5
        write_mask_png(tmp_path / "m.png", m)
        np.testing.assert_array_equal(read_mask_png(tmp_path / "m.png"), m)


class TestVoxel:
    def test_round_trip(self, tmp_path, rng):
        vf = VoxelField(rng.uniform(0, 9, (3, 4, 5)).astype(np.float32),
                        rng.uniform(size=(3, 4, 5, 3)).astype(np.float32), [[-1, -2, -3], [1, 2, 3]], "nearest")
        write_voxel_field(tmp_path / "v.vxf", vf)
        assert (tmp_path / "v.vxf").read_bytes()[:4] == b"VXF1"
        back = read_voxel_field(tmp_path / "v.vxf", "nearest")
        assert back == vf
        write_voxel_field(tmp_path / "w.vxf", back)
        assert (tmp_path / "w.vxf").read_bytes() == (tmp_path / "v.vxf").read_bytes()


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        f = small_hash_field(dtype="float32", seed=3)
        save_checkpoint(tmp_path / "c.ckpt", f, {"seed": 3, "stages_completed": [1]})
        raw = (tmp_path / "c.ckpt").read_bytes()
        assert raw[:4] == b"ENRF"
        ck = load_checkpoint(tmp_path / "c.ckpt")
        assert ck.meta["seed"] == 3
        assert ck.field.params.data.tobytes() == f.params.data.tobytes()
        assert ck.field.config == f.config
        pts = rng.uniform(-1, 1, (10, 3))
        d = np.tile([0, 0, 1.0], (10, 1))
        np.testing.assert_array_equal(ck.field.query(pts, d)[0], f.query(pts, d)[0])
        save_checkpoint(tmp_path / "d.ckpt", ck.field, ck.meta)
        assert (tmp_path / "d.ckpt").read_bytes() == raw

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "x.ckpt")


def write_tiny_scene(root, transform=None):
    intr = Intrinsics(4, 4, 2, 2, 4, 4)
    (root / "img.png").parent.mkdir(parents=True, exist_ok=True)
    write_png(root / "img.png", np.full((4, 4, 3), 0.5))
    write_pfm(root / "d.pfm", np.full((4, 4), 3.0, np.float32))
    pose = look_at([0, 0, -4], [0, 0, 0], [0, -1, 0])
    doc = {"intrinsics": intr.to_dict(), "near": 1.0, "far": 6.0,
           "frames": [{"split": "train", "image": "img.png", "depth": "d.pfm",
                       "transform": transform if transform is not None else pose.matrix.tolist()}]}
    (root / "scene.json").write_text(json.dumps(doc))
    return root / "scene.json"


class TestScene:
    def test_load(self, tmp_path):
        s = load_scene(write_tiny_scene(tmp_path))
        cams, imgs, deps = s.split("train")
        assert len(cams) == 1 and imgs[0].shape == (4, 4, 3) and deps[0][0, 0] == 3.0
        assert abs(np.linalg.det(cams[0].pose.rotation) - 1) < 1e-9

    def test_bad_pose(self, tmp_path):
        bad = np.eye(4)
        bad[0, 0] = 2
        with pytest.raises(ConfigError):
            load_scene(write_tiny_scene(tmp_path, bad.tolist()))

    def test_missing_file(self, tmp_path):
        path = write_tiny_scene(tmp_path)
        (tmp_path / "d.pfm").unlink()
        with pytest.raises(ConfigError):
            load_scene(path)

    def test_missing_split(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scene(write_tiny_scene(tmp_path)).split("extrap")


class TestLog:
    def test_csv(self, tmp_path):
        log = TrainingLog()
        r = LossReport(0)
        r.add("rgb", 0.25)
        log.append(1, r, 1e-2)
        log.write(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0].startswith("stage,iteration,lr")
        assert len(lines) == 2 and log.last(1)["total"] == 0.25
