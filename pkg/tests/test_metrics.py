import json

import numpy as np
import pytest

from visnerf.errors import DomainError
from visnerf.metrics import PSNR_CAP, bucketed_metrics, luma, psnr, ssim, ssim_map
from visnerf.visibility import VisibilityMap


def ssim_reference(a, b):
    """Explicit per-window loop with the standard constants."""
    x, y = luma(a), luma(b)
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5**2))
    w = np.outer(g, g)
    w /= w.sum()
    H, W = x.shape
    out = np.empty((H - 10, W - 10))
    for i in range(H - 10):
        for j in range(W - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = np.sum(w * px), np.sum(w * py)
            vx = np.sum(w * (px - mx) ** 2)
            vy = np.sum(w * (py - my) ** 2)
            cxy = np.sum(w * (px - mx) * (py - my))
            c1, c2 = 0.01**2, 0.03**2
            out[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return out.mean()


class TestPsnr:
    def test_identical(self, rng):
        a = rng.uniform(size=(4, 4, 3))
        assert psnr(a, a) == PSNR_CAP == 99.0

    def test_uniform_diff(self, rng):
        a = rng.uniform(0, 0.9, size=(4, 4, 3))
        assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9

    def test_black_white(self):
        assert psnr(np.zeros((3, 3, 3)), np.ones((3, 3, 3))) == 0.0

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(2, 5, 5, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_errors(self):
        with pytest.raises(DomainError):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
        with pytest.raises(DomainError):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2), bool))


class TestSsim:
    def test_identical(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        assert abs(ssim(a, a) - 1.0) < 1e-9

    def test_anticorrelated(self):
        c = ((np.indices((16, 16)).sum(0) % 2) * 1.0)[..., None].repeat(3, -1)
        assert ssim(c, 1 - c) < 0

    def test_reference(self, rng):
        a, b = rng.uniform(size=(2, 32, 32, 3))
        assert abs(ssim(a, b) - ssim_reference(a, b)) < 1e-6

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(2, 20, 20, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9

    def test_too_small(self):
        with pytest.raises(DomainError):
            ssim_map(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


class TestBuckets:
    def test_all_visible(self, rng):
        a, b = rng.uniform(size=(2, 16, 16, 3))
        r = bucketed_metrics(a, b, np.zeros((16, 16), bool))
        assert "unobserved" not in r.buckets and r.flags
        assert r.counts["observed"] == 256

    def test_wrong_inside_mask(self, rng):
        gt = rng.uniform(size=(16, 16, 3))
        mask = np.zeros((16, 16), bool)
        mask[4:9, 3:12] = True
        out = gt.copy()
        out[mask] = 1 - out[mask]
        r = bucketed_metrics(out, gt, VisibilityMap.from_values(np.where(mask, 0.0, 1.0), 0.5))
        assert r.buckets["observed"]["psnr"] == PSNR_CAP
        assert r.buckets["unobserved"]["psnr"] < 30
        assert r.counts["observed"] + r.counts["unobserved"] == 256

    def test_mse_partition(self, rng):
        a, b = rng.uniform(size=(2, 20, 24, 3))
        mask = rng.random((20, 24)) < 0.3
        r = bucketed_metrics(a, b, mask)
        pooled = sum(e["mse"] * e["count"] for e in r.buckets.values()) / 480
        assert abs(pooled - np.mean((a - b) ** 2)) < 1e-9

    def test_json(self, rng):
        a, b = rng.uniform(size=(2, 12, 12, 3))
        d = json.loads(bucketed_metrics(a, b, np.eye(12, dtype=bool)).to_json())
        assert set(d["buckets"]) == {"observed", "unobserved"}
