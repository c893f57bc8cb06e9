"""Image quality metrics: PSNR, SSIM and their per-visibility-bucket variants."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.signal import convolve2d

from .errors import DomainError

__all__ = ["PSNR_CAP", "psnr", "ssim", "ssim_map", "luma", "MetricsReport", "bucketed_metrics"]

PSNR_CAP = 99.0
_WIN = 11
_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask=None) -> float:
    """``10 log10(1 / MSE)`` over the selected pixels (all channels); capped at 99 dB."""
    a, b = _pair(a, b)
    if mask is None:
        sel = np.ones(a.shape[:2], dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool)
        if sel.shape != a.shape[:2]:
            raise DomainError("mask shape does not match the image")
    if not sel.any():
        raise DomainError("psnr over an empty pixel selection")
    mse = float(np.mean((a[sel] - b[sel]) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def luma(img) -> np.ndarray:
    """Rec. 601 luma of a linear RGB image (2-D inputs pass through)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114])


def _gaussian_window() -> np.ndarray:
    x = np.arange(_WIN) - (_WIN - 1) / 2.0
    g = np.exp(-(x**2) / (2 * _SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM for every fully contained 11x11 window, shape ``(H-10, W-10)``."""
    a, b = _pair(a, b)
    x, y = luma(a), luma(b)
    if x.shape[0] < _WIN or x.shape[1] < _WIN:
        raise DomainError(f"ssim needs images of at least {_WIN}x{_WIN}")
    w = _gaussian_window()

    def filt(z):
        return convolve2d(z, w, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = _K1**2, _K2**2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


@dataclass
class MetricsReport:
    psnr: float
    ssim: float | None
    buckets: dict = dc_field(default_factory=dict)
    counts: dict = dc_field(default_factory=dict)
    flags: list = dc_field(default_factory=list)
    meta: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def bucketed_metrics(rendered, ground_truth, vis) -> MetricsReport:
    """PSNR/SSIM overall and separately over observed (mask False) and unobserved pixels.

    ``vis`` is a ``VisibilityMap`` or a boolean mask (True = unobserved). Bucket SSIM
    averages the local SSIM of windows centered on that bucket's pixels; empty buckets
    are omitted and flagged.
    """
    rendered, ground_truth = _pair(rendered, ground_truth)
    mask = np.asarray(getattr(vis, "mask", vis), dtype=bool)
    if mask.shape != rendered.shape[:2]:
        raise DomainError("visibility mask shape does not match the image")
    H, W = mask.shape
    smap = ssim_map(rendered, ground_truth) if min(H, W) >= _WIN else None
    half = _WIN // 2
    report = MetricsReport(psnr(rendered, ground_truth), float(smap.mean()) if smap is not None else None)
    for name, sel in (("observed", ~mask), ("unobserved", mask)):
        count = int(sel.sum())
        report.counts[name] = count
        if count == 0:
            report.flags.append(f"{name} bucket empty")
            continue
        entry = {"psnr": psnr(rendered, ground_truth, sel), "count": count,
                 "mse": float(np.mean((rendered[sel] - ground_truth[sel]) ** 2))}
        entry["ssim"] = None
        if smap is not None:
            centers = sel[half:H - half, half:W - half]
            if centers.any():
                entry["ssim"] = float(smap[centers].mean())
            else:
                report.flags.append(f"{name} bucket has no full SSIM window")
        report.buckets[name] = entry
    return report
