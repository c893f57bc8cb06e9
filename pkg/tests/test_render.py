import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visnerf.errors import DomainError, UsageError
from visnerf.field import VoxelField
from visnerf.geometry import Ray
from visnerf.render import (RaySamples, composite, composite_backward, gradient_scale, render_image,
                            render_rays, stratified_samples, transmittance_to_point)

from conftest import simple_camera, slab_field, small_hash_field


def homogeneous(sigma=1.0, size=4.0):
    b = np.array([[-size] * 3, [size] * 3])
    return VoxelField(np.full((2, 2, 2), sigma), np.full((2, 2, 2, 3), 0.5), b, "nearest")


def empty_field():
    b = np.array([[-4.0] * 3, [4.0] * 3])
    return VoxelField(np.zeros((2, 2, 2)), np.zeros((2, 2, 2, 3)), b)


def samples_from(sigma, color, t0=0.0, t1=1.0):
    n = len(sigma)
    s = stratified_samples(Ray([0, 0, 0], [0, 0, 1], t0, t1), n)
    return RaySamples(s.positions, s.deltas, np.asarray(sigma, float), np.asarray(color, float))


class TestStratified:
    def test_bin_centers(self):
        s = stratified_samples(Ray([0, 0, 0], [0, 0, 1], 0, 1), 2)
        np.testing.assert_allclose(s.positions, [0.25, 0.75])

    def test_jitter_containment(self):
        ray = Ray([0, 0, 0], [0, 0, 1], 1.0, 3.0)
        for seed in range(1000):
            s = stratified_samples(ray, 5, np.random.default_rng(seed))
            idx = np.floor((s.positions - 1.0) / 0.4)
            np.testing.assert_array_equal(idx, np.arange(5))

    def test_deltas_sum(self, rng):
        ray = Ray([0, 0, 0], [0, 0, 1], 0.3, 7.1)
        for n in (1, 7, 64):
            s = stratified_samples(ray, n, rng)
            assert abs(s.deltas.sum() - 6.8) < 1e-9

    def test_invalid(self):
        with pytest.raises(DomainError):
            stratified_samples(Ray([0, 0, 0], [0, 0, 1], 0, 1), 0)
        with pytest.raises(DomainError):
            RaySamples([0.5, 0.5], [0.1, 0.1])


class TestComposite:
    def test_empty(self):
        r = composite(samples_from(np.zeros(4), np.ones((4, 3))))
        assert r.opacity == 0 and r.depth == 0
        np.testing.assert_array_equal(r.color, 0)

    def test_single_sample_half(self):
        r = composite(samples_from([np.log(2.0)], [[1, 0, 0]]))
        assert abs(r.weights[0] - 0.5) < 1e-12
        np.testing.assert_allclose(r.color, [0.5, 0, 0])
        assert abs(r.opacity - 0.5) < 1e-12

    def test_homogeneous_closed_form(self):
        r = composite(samples_from(np.ones(1024), np.full((1024, 3), 0.3)))
        assert abs(r.opacity - (1 - np.exp(-1))) < 1e-3

    def test_non_finite_names_index(self):
        with pytest.raises(DomainError, match="index 2"):
            composite(samples_from([0, 1, np.nan], np.zeros((3, 3))))

    def test_requires_field_values(self):
        s = stratified_samples(Ray([0, 0, 0], [0, 0, 1], 0, 1), 3)
        with pytest.raises(UsageError):
            composite(s)

    @given(st.lists(st.floats(0, 50), min_size=1, max_size=32))
    def test_invariants(self, sig):
        n = len(sig)
        r = composite(samples_from(sig, np.full((n, 3), 0.7)))
        assert abs(r.weights.sum() - r.opacity) < 1e-6
        assert abs(r.opacity - (1 - r.transmittance[-1] * np.exp(-sig[-1] / n))) < 1e-6
        assert r.transmittance[0] == 1.0
        assert np.all(np.diff(r.transmittance) <= 0)
        assert np.all((r.weights >= 0) & (r.weights <= 1)) and 0 <= r.opacity <= 1

    def test_monotone_in_sigma(self, rng):
        sig = rng.uniform(0, 5, 16)
        base = composite(samples_from(sig, np.zeros((16, 3))))
        for i in range(16):
            s2 = sig.copy()
            s2[i] += 1.0
            r = composite(samples_from(s2, np.zeros((16, 3))))
            assert np.all(r.transmittance[i + 1:] <= base.transmittance[i + 1:])

    def test_split_invariance(self, rng):
        sig = rng.uniform(0, 5, 8)
        col = rng.uniform(0, 1, (8, 3))
        a = composite(samples_from(sig, col))
        b = composite(samples_from(np.repeat(sig, 2), np.repeat(col, 2, axis=0)))
        np.testing.assert_allclose(a.color, b.color, atol=1e-6)
        assert abs(a.opacity - b.opacity) < 1e-6

    def test_piecewise_closed_form(self):
        n = 1024
        t = (np.arange(n) + 0.5) / n * 2.0
        sig = np.where(t < 1.0, 0.5, 2.0)
        r = composite(samples_from(sig, np.zeros((n, 3)), 0.0, 2.0))
        assert abs(r.opacity - (1 - np.exp(-2.5))) < 1e-3


class TestBackward:
    def test_zero_upstream(self, rng):
        s = samples_from(rng.uniform(0, 3, 5), rng.uniform(0, 1, (5, 3)))
        ds, dc = composite_backward(s, np.zeros(3), 0.0, 0.0)
        assert not ds.any() and not dc.any()

    def test_single_sample(self):
        sig, delta = 1.3, 1.0
        ds, _ = composite_backward(samples_from([sig], [[0, 0, 0]]), d_opacity=1.0)
        exact = delta * np.exp(-sig * delta)
        assert abs(ds[0] - exact) / exact < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        sig = rng.uniform(0, 4, 8)
        col = rng.uniform(0, 1, (8, 3))
        gc, gd, go = rng.normal(size=3), rng.normal(), rng.normal()

        def loss(sg, cl):
            r = composite(samples_from(sg, cl))
            return r.color @ gc + gd * r.depth + go * r.opacity

        ds, dc = composite_backward(samples_from(sig, col), gc, gd, go)
        h = 1e-6
        for i in range(8):
            e = np.zeros(8)
            e[i] = h
            fd = (loss(sig + e, col) - loss(sig - e, col)) / (2 * h)
            assert abs(fd - ds[i]) <= 1e-4 * max(1e-3, abs(fd))
            for c in range(3):
                E = np.zeros((8, 3))
                E[i, c] = h
                fd = (loss(sig, col + E) - loss(sig, col - E)) / (2 * h)
                assert abs(fd - dc[i, c]) <= 1e-4 * max(1e-3, abs(fd))


class TestRenderImage:
    def test_empty(self):
        out = render_image(empty_field(), simple_camera(6), 32)
        assert not out.image.any() and not out.opacity.any()

    def test_slab_depth(self):
        cam = simple_camera(8, near=1.0, far=5.0)
        out = render_image(slab_field(z0=2.9, z1=3.6), cam, 128)
        bin_w = 4.0 / 128
        # slab starts at z = 3.0 (first voxel center at 3.125 with 0.25 cells)
        ray_len = np.linalg.norm(np.stack(np.meshgrid(*(2 * [(np.arange(8) + 0.5 - 4) / 8])), -1), axis=-1)
        z = out.depth / np.sqrt(1 + ray_len**2)
        assert np.all(out.opacity > 0.999)
        assert np.all(np.abs(z - 3.0) < bin_w + 1e-9)

    def test_gradient_scaling_disabled_is_exact(self):
        f = small_hash_field()
        o = np.zeros((4, 3))
        d = np.tile([0, 0, 1.0], (4, 1))
        grads = []
        for sg in (None, 0.0):
            f.params.zero_grad()
            rr = render_rays(f, o, d, 0.5, 2.0, 16, need_grad=True, gradient_scaling=sg)
            rr.backward(d_color=np.ones((4, 3)))
            grads.append(f.params.grad.copy())
        f.params.zero_grad()
        rr = render_rays(f, o, d, 0.5, 2.0, 16, need_grad=True)
        rr.backward(d_color=np.ones((4, 3)))
        np.testing.assert_array_equal(grads[0], f.params.grad)
        np.testing.assert_array_equal(grads[1], f.params.grad)

    def test_gradient_scale_values(self):
        np.testing.assert_allclose(gradient_scale(np.array([0.5, 1.0, 2.0]), 1.0), [0.25, 1.0, 1.0])
        assert gradient_scale(np.array([0.1]), None) == 1.0

    def test_backward_requires_graph(self):
        rr = render_rays(empty_field(), np.zeros((1, 3)), [[0, 0, 1.0]], 1, 2, 4)
        with pytest.raises(UsageError):
            rr.backward(d_color=np.ones((1, 3)))


class TestTransmittance:
    def test_empty(self):
        assert transmittance_to_point(empty_field(), [0, 0, 0], [1, 1, 1]) == 1.0

    def test_homogeneous(self):
        T = transmittance_to_point(homogeneous(1.0), [0, 0, 0], [0, 0, 1], 512)
        assert abs(T - np.exp(-1)) < 1e-3

    def test_wall(self):
        T = transmittance_to_point(slab_field(), [0, 0, 0.5], [0, 0, 3.9], 512)
        assert T <= 1e-3

    def test_same_point(self):
        with pytest.raises(DomainError):
            transmittance_to_point(empty_field(), [0, 0, 0], [0, 0, 0])
