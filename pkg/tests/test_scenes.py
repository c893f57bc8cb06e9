import numpy as np
import pytest

from visnerf.errors import ConfigError
from visnerf.geometry import image_rays
from visnerf.io import load_scene
from visnerf.render import render_image
from visnerf.scenes import SCENE_KINDS, first_hit, make_scene, make_voxel_scene, shadow_oracle, write_scene


def brute_first_hit(vf, o, d, t0, t1, n=20000):
    t = np.linspace(t0, t1, n)
    occ = vf.density(o + t[:, None] * d) > 0
    return t[np.argmax(occ)] if occ.any() else -1.0


class TestVoxelScenes:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_voxel_scene("cathedral")

    @pytest.mark.parametrize("kind", SCENE_KINDS)
    def test_binary_density(self, kind):
        vf = make_voxel_scene(kind, 16)
        assert set(np.unique(vf.sigma_grid)) <= {0.0, 100.0}
        assert vf.interpolation == "nearest"


class TestFirstHit:
    def test_against_dense_march(self, rng, box_scene):
        vf = box_scene.voxel_field
        cam = box_scene.cameras["extrap"][0]
        o, d = image_rays(cam)
        idx = rng.choice(len(o), 60, replace=False)
        hits = first_hit(vf, o[idx], d[idx], cam.near, cam.far)
        for h, i in zip(hits, idx):
            ref = brute_first_hit(vf, o[i], d[i], cam.near, cam.far)
            if ref < 0:
                assert h < 0
            else:
                assert abs(h - ref) < 5e-4

    def test_gt_depth_matches_hit(self, box_scene):
        vf = box_scene.voxel_field
        cam = box_scene.cameras["train"][0]
        o, d = image_rays(cam)
        hits = first_hit(vf, o, d, cam.near, cam.far).reshape(cam.height, cam.width)
        depth = render_image(vf, cam, 512).depth
        ok = hits > 0
        bin_w = (cam.far - cam.near) / 512
        # rays that clip a voxel corner spread their weight; the rest land within two bins
        assert np.mean(np.abs(depth[ok] - hits[ok]) < 2 * bin_w) >= 0.97


class TestSceneGeneration:
    def test_occluded_fraction(self, box_scene):
        frac = box_scene.meta["occluded_fraction_extrap"]
        assert 0.05 <= frac <= 0.40

    def test_occluder_hides_region(self, box_scene):
        vf = box_scene.voxel_field
        for cam in box_scene.cameras["extrap"]:
            visible, _, hit = shadow_oracle(vf, cam, box_scene.cameras["train"])
            assert (hit & ~visible).any()

    def test_training_views_fully_seen(self, box_scene):
        train = box_scene.cameras["train"]
        visible, count, hit = shadow_oracle(box_scene.voxel_field, train[0], train, k=1)
        assert visible[hit].all()

    def test_slab_two_cameras(self, tmp_path):
        path = write_scene(make_scene("slab", resolution=16, n_cameras=2, image_size=12), tmp_path, n_samples=64)
        scene = load_scene(path)
        assert len(scene.train_cameras) == 2
        for cam in scene.train_cameras:
            R = cam.pose.rotation
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert scene.voxel_field.interpolation == "nearest"
        assert scene.meta["trajectory"]["m"] == 8

    def test_deterministic_bytes(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            write_scene(make_scene("box-occluder", resolution=16, n_cameras=3, seed=5, image_size=12),
                        tmp_path / name, n_samples=64)
            outs.append({p.relative_to(tmp_path / name): p.read_bytes()
                         for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
        assert outs[0] == outs[1]
