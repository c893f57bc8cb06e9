"""Visibility of virtual-view pixels with respect to a set of training cameras.

Each sample on a virtual ray gets one transmittance per training camera (0 when the
sample is outside that camera's frustum). Those are reduced to a single number, by
default the k-th largest (k = 2: seen by at least two views). The per-sample values are
then composited with the ray's color weights. Background (residual transmittance)
counts as unobserved.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import DomainError
from .geometry import Camera, camera_set_hash, image_rays, in_frustum_points
from .render import stratified_t, transmittance_batch

log = logging.getLogger(__name__)

__all__ = [
    "VisibilityOptions",
    "VisibilityMap",
    "TransmittanceCache",
    "aggregate_visibility",
    "camera_transmittances",
    "point_visibility",
    "composite_visibility",
    "render_visibility_map",
    "pseudo_disocclusion_mask",
]


@dataclass
class VisibilityOptions:
    """Settings for visibility computation.

    Parameters
    ----------
    k : int
        Order statistic used to combine per-camera transmittances.
    tau : float
        Pixels with visibility below ``tau`` are masked as unobserved.
    n_secondary : int
        Samples per march towards a training camera.
    include_frustum_test : bool
        Points outside a camera's frustum count as transmittance 0 for that camera.
    aggregation : {"kth", "min"}
        ``"min"`` requires visibility from every camera.
    exact : bool
        March every secondary ray instead of reading the lattice cache.
    surface_offset : float or None
        Secondary marches stop this far short of the sample so a surface does not shadow
        itself. ``None`` means 1.5 primary bins for image maps and 0 for single points.
    weight_cutoff : float
        Primary samples with smaller weight are skipped.
    lattice_resolution : int
        Nodes per axis of the transmittance cache.
    """

    k: int = 2
    tau: float = 0.5
    n_secondary: int = 256
    include_frustum_test: bool = True
    aggregation: str = "kth"
    exact: bool = False
    surface_offset: float | None = None
    weight_cutoff: float = 1e-6
    lattice_resolution: int = 32

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("k must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise DomainError("tau must lie in (0, 1)")
        if self.n_secondary < 1:
            raise DomainError("n_secondary must be >= 1")
        if self.aggregation not in ("kth", "min"):
            raise DomainError(f"unknown aggregation {self.aggregation!r}")
        if self.lattice_resolution < 2:
            raise DomainError("lattice_resolution must be >= 2")

    def replace(self, **kw) -> "VisibilityOptions":
        d = asdict(self)
        d.update(kw)
        return VisibilityOptions(**d)


@dataclass
class VisibilityMap:
    values: np.ndarray
    mask: np.ndarray
    tau: float
    opacity: np.ndarray | None = None
    meta: dict = dc_field(default_factory=dict)

    @classmethod
    def from_values(cls, values, tau: float, opacity=None, meta=None) -> "VisibilityMap":
        values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
        return cls(values, values < tau, float(tau), opacity, dict(meta or {}))

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean())


# ---------------------------------------------------------------------------
# Transmittance towards training cameras
# ---------------------------------------------------------------------------


class TransmittanceCache:
    """Per-camera transmittance sampled on a regular lattice over ``bounds``.

    Lookups inside the box are trilinear; the caller falls back to exact marches for
    points outside. The march to each node stops ``offset`` short of the node.
    """

    def __init__(self, field, cameras, bounds, resolution: int = 32, n_samples: int = 128,
                 offset: float = 0.0, _values=None):
        self.cameras = list(cameras)
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        self.resolution = int(resolution)
        self.n_samples = n_samples
        self.offset = float(offset)
        if _values is not None:
            self.values = _values
            return
        axes = [np.linspace(self.bounds[0, a], self.bounds[1, a], self.resolution) for a in range(3)]
        nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        self.values = np.empty((len(self.cameras), self.resolution ** 3))
        for ci, cam in enumerate(self.cameras):
            self.values[ci] = transmittance_batch(field, cam.center, nodes, n_samples, self.offset)
        self.values = self.values.reshape(len(self.cameras), *(self.resolution,) * 3)

    @classmethod
    def for_field(cls, field, cameras, opts: VisibilityOptions, offset: float = 0.0):
        """Build a cache over ``field.bbox``; the offset is widened to one lattice diagonal
        so interpolation across a surface does not pick up self-shadowing."""
        bounds = np.asarray(field.bbox, dtype=np.float64)
        spacing = (bounds[1] - bounds[0]) / (opts.lattice_resolution - 1)
        off = max(offset, float(np.linalg.norm(spacing)))
        return cls(field, cameras, bounds, opts.lattice_resolution, opts.n_secondary, off)

    def subset(self, indices) -> "TransmittanceCache":
        idx = list(indices)
        return TransmittanceCache(None, [self.cameras[i] for i in idx], self.bounds, self.resolution,
                                  self.n_samples, self.offset, _values=self.values[idx])

    def inside(self, points) -> np.ndarray:
        return np.all((points >= self.bounds[0]) & (points <= self.bounds[1]), axis=1)

    def lookup(self, points, cam_index: int) -> np.ndarray:
        g = (points - self.bounds[0]) / (self.bounds[1] - self.bounds[0]) * (self.resolution - 1)
        return map_coordinates(self.values[cam_index], g.T, order=1, mode="nearest")


def camera_transmittances(field, points, cameras, opts: VisibilityOptions, offset: float = 0.0,
                          cache: TransmittanceCache | None = None) -> np.ndarray:
    """``(M, C)`` transmittance from each camera center to each point (0 outside frustum)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(points), len(cameras)))
    inside_cache = cache.inside(points) if cache is not None else None
    for ci, cam in enumerate(cameras):
        sel = in_frustum_points(cam, points) if opts.include_frustum_test else np.ones(len(points), bool)
        if not sel.any():
            continue
        if cache is None:
            out[sel, ci] = transmittance_batch(field, cam.center, points[sel], opts.n_secondary, offset)
            continue
        fast = sel & inside_cache
        slow = sel & ~inside_cache
        if fast.any():
            out[fast, ci] = cache.lookup(points[fast], ci)
        if slow.any():
            out[slow, ci] = transmittance_batch(field, cam.center, points[slow], opts.n_secondary, offset)
    return np.clip(out, 0.0, 1.0)


def aggregate_visibility(trans: np.ndarray, opts: VisibilityOptions) -> np.ndarray:
    """Reduce ``(M, C)`` per-camera transmittances to ``(M,)``."""
    M, C = trans.shape
    if opts.aggregation == "min":
        return trans.min(axis=1) if C else np.zeros(M)
    if C < opts.k:
        return np.zeros(M)
    return np.partition(trans, C - opts.k, axis=1)[:, C - opts.k]


def point_visibility(field, point, train_cameras, opts: VisibilityOptions | None = None) -> float:
    opts = opts or VisibilityOptions()
    if len(train_cameras) < 1:
        raise DomainError("need at least one training camera")
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if not np.all(np.isfinite(p)):
        raise DomainError("point must be finite")
    trans = camera_transmittances(field, p, train_cameras, opts, opts.surface_offset or 0.0)
    return float(aggregate_visibility(trans, opts)[0])


# ---------------------------------------------------------------------------
# Image maps
# ---------------------------------------------------------------------------


def _primary_weights(field, o, d, near, far, n_primary):
    t, deltas = stratified_t(np.full(len(o), near), np.full(len(o), far), n_primary)
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    sigma = np.asarray(field.density(pts.reshape(-1, 3)), dtype=np.float64).reshape(t.shape)
    if not np.all(np.isfinite(sigma)):
        raise DomainError("non-finite density on a primary ray")
    tau = sigma * deltas
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))
    return pts, trans * -np.expm1(-tau)


def composite_visibility(field, points, weights, cameras, opts: VisibilityOptions, offset: float,
                         cache: TransmittanceCache | None = None) -> np.ndarray:
    """``sum_i w_i v_i`` per ray for samples ``points (R, N, 3)`` with weights ``(R, N)``."""
    keep = weights > opts.weight_cutoff
    if not keep.any():
        return np.zeros(weights.shape[0])
    trans = camera_transmittances(field, points[keep], cameras, opts, offset, cache)
    v = np.zeros_like(weights)
    v[keep] = aggregate_visibility(trans, opts)
    return np.sum(weights * v, axis=1)


def render_visibility_map(field, virtual_camera: Camera, train_cameras, opts: VisibilityOptions | None = None,
                          n_primary: int = 256, cache: TransmittanceCache | None = None,
                          chunk: int = 1024) -> VisibilityMap:
    """Volume-render per-sample visibility along every pixel ray of ``virtual_camera``.

    ``cache`` is used unless ``opts.exact``; when neither is given a cache is built here.
    """
    opts = opts or VisibilityOptions()
    cams = list(train_cameras)
    if not cams:
        raise DomainError("need at least one training camera")
    offset = opts.surface_offset
    if offset is None:
        offset = 1.5 * (virtual_camera.far - virtual_camera.near) / n_primary
    if opts.exact:
        cache = None
    elif cache is None:
        cache = TransmittanceCache.for_field(field, cams, opts, offset)
    H, W = virtual_camera.height, virtual_camera.width
    o, d = image_rays(virtual_camera)
    values = np.zeros(H * W)
    opacity = np.zeros(H * W)
    for s in range(0, H * W, chunk):
        pts, w = _primary_weights(field, o[s:s + chunk], d[s:s + chunk],
                                  virtual_camera.near, virtual_camera.far, n_primary)
        opacity[s:s + chunk] = w.sum(axis=1)
        values[s:s + chunk] = composite_visibility(field, pts, w, cams, opts, offset, cache)
    meta = {
        "tau": opts.tau, "k": opts.k, "aggregation": opts.aggregation,
        "camera_set_hash": camera_set_hash(cams), "n_primary": n_primary,
        "n_secondary": opts.n_secondary, "exact": cache is None, "surface_offset": offset,
    }
    return VisibilityMap.from_values(values.reshape(H, W), opts.tau, opacity.reshape(H, W), meta)


def pseudo_disocclusion_mask(field, target_index: int, train_cameras, opts: VisibilityOptions | None = None,
                             n_primary: int = 256, cache: TransmittanceCache | None = None) -> VisibilityMap:
    """Visibility of a training view's pixels in *all* other training views.

    ``cache``, if given, must cover the full ``train_cameras`` list in order.
    """
    cams = list(train_cameras)
    if len(cams) < 2:
        raise DomainError("pseudo-disocclusion needs at least two training cameras")
    if not 0 <= target_index < len(cams):
        raise DomainError(f"target_index {target_index} out of range")
    opts = (opts or VisibilityOptions()).replace(aggregation="min")
    others = [i for i in range(len(cams)) if i != target_index]
    sub = cache.subset(others) if cache is not None else None
    return render_visibility_map(field, cams[target_index], [cams[i] for i in others], opts, n_primary, sub)
