"""Volume rendering: stratified sampling, alpha compositing and its analytic gradient.

Sample ``i`` of a ray stands for the cell between the midpoints to its neighbours
(the first cell starts at ``t_near``, the last ends at ``t_far``), and ``delta_i`` is
that cell's length. For un-jittered stratified samples this is exactly the bin width,
so the deltas always tile ``[t_near, t_far]``.

Depth is the unnormalized expected termination distance ``sum_i w_i s_i``; rays that
are not saturated composite over a black, zero-depth background.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DomainError, UsageError
from .geometry import Camera, Ray, image_rays

__all__ = [
    "RaySamples",
    "RayRenderResult",
    "RenderedRays",
    "ImageRender",
    "stratified_samples",
    "stratified_t",
    "cell_deltas",
    "composite",
    "composite_arrays",
    "composite_backward",
    "composite_backward_arrays",
    "render_rays",
    "render_image",
    "transmittance_to_point",
    "transmittance_batch",
    "gradient_scale",
]


def stratified_t(near, far, n: int, rng: np.random.Generator | None = None):
    """Sample distances for a batch of rays; returns (t, deltas), both ``(R, n)``."""
    if n < 1:
        raise DomainError("need at least one sample per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    near, far = np.broadcast_arrays(near, far)
    R = near.shape[0]
    width = (far - near) / n
    offs = rng.random((R, n)) if rng is not None else np.full((R, n), 0.5)
    t = near[:, None] + (np.arange(n)[None, :] + offs) * width[:, None]
    return t, cell_deltas(t, near, far)


def cell_deltas(t, near, far) -> np.ndarray:
    edges = np.concatenate(
        [np.asarray(near, dtype=np.float64).reshape(-1, 1), 0.5 * (t[:, 1:] + t[:, :-1]),
         np.asarray(far, dtype=np.float64).reshape(-1, 1)], axis=1)
    return np.diff(edges, axis=1)


@dataclass
class RaySamples:
    positions: np.ndarray
    deltas: np.ndarray
    sigma: np.ndarray | None = None
    color: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1)
        self.deltas = np.asarray(self.deltas, dtype=np.float64).reshape(-1)
        if self.positions.size < 1:
            raise DomainError("RaySamples needs N >= 1")
        if np.any(np.diff(self.positions) <= 0) or np.any(self.deltas <= 0):
            raise DomainError("sample positions must ascend strictly with positive deltas")

    def __len__(self):
        return self.positions.size

    def with_field(self, field, ray: Ray) -> "RaySamples":
        pts = ray.at(self.positions)
        dirs = np.broadcast_to(ray.direction, pts.shape)
        sigma, rgb = field.query(pts, dirs)
        return RaySamples(self.positions, self.deltas, np.asarray(sigma, dtype=np.float64),
                          np.asarray(rgb, dtype=np.float64))


def stratified_samples(ray: Ray, n: int, jitter: np.random.Generator | None = None) -> RaySamples:
    t, d = stratified_t(ray.t_near, ray.t_far, n, jitter)
    return RaySamples(t[0], d[0])


@dataclass
class RayRenderResult:
    color: np.ndarray
    depth: float
    opacity: float
    weights: np.ndarray
    transmittance: np.ndarray

    @property
    def normalized_depth(self) -> float:
        return self.depth / self.opacity if self.opacity > 0 else 0.0


def composite_arrays(sigma, rgb, t, deltas):
    """Batched compositing. Shapes: sigma/t/deltas ``(R, N)``, rgb ``(R, N, 3)``.

    Returns (color, depth, opacity, weights, transmittance)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    bad = ~np.isfinite(sigma)
    if bad.any():
        r, i = np.argwhere(bad)[0]
        raise DomainError(f"non-finite density at sample index {i} (ray {r})")
    tau = sigma * deltas
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-np.concatenate([np.zeros_like(cum[:, :1]), cum[:, :-1]], axis=1))
    weights = trans * -np.expm1(-tau)
    color = np.einsum("rn,rnc->rc", weights, rgb)
    depth = np.sum(weights * t, axis=1)
    opacity = np.sum(weights, axis=1)
    return color, depth, opacity, weights, trans


def composite(samples: RaySamples) -> RayRenderResult:
    if samples.sigma is None or samples.color is None:
        raise UsageError("samples carry no field values; use RaySamples.with_field first")
    c, d, o, w, T = composite_arrays(samples.sigma[None], samples.color[None],
                                     samples.positions[None], samples.deltas[None])
    return RayRenderResult(c[0], float(d[0]), float(o[0]), w[0], T[0])


def composite_backward_arrays(sigma, rgb, t, deltas, weights, trans,
                              d_color=None, d_depth=None, d_opacity=None, d_weights=None):
    """Gradients of a loss w.r.t. per-sample densities and colors.

    With ``g_i = dL/dw_i`` (all upstream terms folded in) the exact gradient is
    ``dL/dsigma_k = delta_k * (g_k * T_{k+1} - sum_{i>k} g_i w_i)``.
    """
    R, N = weights.shape
    g = np.zeros((R, N))
    if d_color is not None:
        g += np.einsum("rnc,rc->rn", rgb, d_color)
    if d_depth is not None:
        g += t * np.asarray(d_depth).reshape(R, 1)
    if d_opacity is not None:
        g += np.asarray(d_opacity).reshape(R, 1)
    if d_weights is not None:
        g += d_weights
    gw = g * weights
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
    t_next = trans * np.exp(-sigma * deltas)
    d_sigma = deltas * (g * t_next - suffix)
    if d_color is not None:
        d_rgb = weights[:, :, None] * np.asarray(d_color)[:, None, :]
    else:
        d_rgb = np.zeros(rgb.shape)
    return d_sigma, d_rgb


def composite_backward(samples: RaySamples, d_color=None, d_depth=None, d_opacity=None,
                       d_weights=None):
    """Single-ray gradients; returns (d_sigma (N,), d_color (N, 3))."""
    res = composite(samples)
    ds, dc = composite_backward_arrays(
        samples.sigma[None], samples.color[None], samples.positions[None], samples.deltas[None],
        res.weights[None], res.transmittance[None],
        None if d_color is None else np.asarray(d_color, dtype=np.float64)[None],
        None if d_depth is None else np.array([d_depth], dtype=np.float64),
        None if d_opacity is None else np.array([d_opacity], dtype=np.float64),
        None if d_weights is None else np.asarray(d_weights, dtype=np.float64)[None],
    )
    return ds[0], dc[0]


def gradient_scale(t, s_g) -> np.ndarray | float:
    """Near-camera gradient attenuation ``min(1, (t / s_g)^2)``; ``s_g`` of 0/None disables it."""
    if not s_g:
        return 1.0
    return np.minimum(1.0, (np.asarray(t) / s_g) ** 2)


@dataclass
class RenderedRays:
    """Forward results for a batch of rays, with what ``backward`` needs."""

    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    t: np.ndarray
    deltas: np.ndarray
    near: np.ndarray
    far: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    field: object = None
    cache: object = None
    gradient_scaling: float | None = None

    def backward(self, d_color=None, d_depth=None, d_opacity=None, d_weights=None):
        """Push upstream gradients through compositing into the field's parameters."""
        if self.cache is None:
            raise UsageError("rays were rendered without need_grad=True")
        d_sigma, d_rgb = composite_backward_arrays(
            self.sigma, self.rgb, self.t, self.deltas, self.weights, self.transmittance,
            d_color, d_depth, d_opacity, d_weights)
        scale = gradient_scale(self.t, self.gradient_scaling)
        if not np.isscalar(scale):
            d_sigma = d_sigma * scale
            d_rgb = d_rgb * scale[..., None]
        self.field.backward(self.cache, d_sigma.reshape(-1), d_rgb.reshape(-1, 3))


def render_rays(field, origins, directions, near, far, n_samples: int,
                rng: np.random.Generator | None = None, need_grad: bool = False,
                gradient_scaling: float | None = None) -> RenderedRays:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    R = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (R,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,)).copy()
    t, deltas = stratified_t(near, far, n_samples, rng)
    pts = origins[:, None, :] + t[..., None] * directions[:, None, :]
    dirs = np.broadcast_to(directions[:, None, :], pts.shape)
    if need_grad:
        sigma, rgb, cache = field.forward(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    else:
        sigma, rgb = field.query(pts.reshape(-1, 3), dirs.reshape(-1, 3))
        cache = None
    sigma = np.asarray(sigma, dtype=np.float64).reshape(R, n_samples)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(R, n_samples, 3)
    color, depth, opacity, weights, trans = composite_arrays(sigma, rgb, t, deltas)
    return RenderedRays(color, depth, opacity, weights, trans, t, deltas, near, far, sigma, rgb,
                        field if need_grad else None, cache, gradient_scaling)


@dataclass
class ImageRender:
    image: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    rays: RenderedRays | None = dc_field(default=None, repr=False)

    @property
    def normalized_depth(self) -> np.ndarray:
        return np.where(self.opacity > 0, self.depth / np.maximum(self.opacity, 1e-12), 0.0)


def render_image(field, camera: Camera, n_samples: int = 192,
                 jitter: np.random.Generator | None = None,
                 gradient_scaling: float | None = None, keep_graph: bool = False,
                 chunk: int = 4096) -> ImageRender:
    """Render color, depth and opacity maps. ``keep_graph`` renders in one batch and keeps
    the cache so ``result.rays.backward(...)`` can be called."""
    H, W = camera.height, camera.width
    o, d = image_rays(camera)
    if keep_graph:
        rr = render_rays(field, o, d, camera.near, camera.far, n_samples, jitter, True, gradient_scaling)
        return ImageRender(rr.color.reshape(H, W, 3), rr.depth.reshape(H, W),
                           rr.opacity.reshape(H, W), rr)
    color = np.empty((H * W, 3))
    depth = np.empty(H * W)
    opac = np.empty(H * W)
    for s in range(0, H * W, chunk):
        rr = render_rays(field, o[s:s + chunk], d[s:s + chunk], camera.near, camera.far, n_samples, jitter)
        color[s:s + chunk], depth[s:s + chunk], opac[s:s + chunk] = rr.color, rr.depth, rr.opacity
    return ImageRender(color.reshape(H, W, 3), depth.reshape(H, W), opac.reshape(H, W))


def transmittance_batch(field, origins, targets, n_samples: int, offset=0.0,
                        chunk_points: int = 1 << 20) -> np.ndarray:
    """Transmittance from each origin to its target.

    The segment, shortened by ``offset`` at the target end, is split into ``n_samples``
    equal bins sampled at their centers, so the density at the target itself (within half
    a bin) never contributes.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    origins, targets = np.broadcast_arrays(origins, targets)
    M = targets.shape[0]
    seg = targets - origins
    length = np.linalg.norm(seg, axis=1)
    dirs = seg / np.maximum(length, 1e-300)[:, None]
    reach = np.maximum(length - np.broadcast_to(np.asarray(offset, dtype=np.float64), (M,)), 0.0)
    frac = (np.arange(n_samples) + 0.5) / n_samples
    out = np.empty(M)
    step = max(1, chunk_points // n_samples)
    for s in range(0, M, step):
        e = min(M, s + step)
        t = reach[s:e, None] * frac[None, :]
        pts = origins[s:e, None, :] + t[..., None] * dirs[s:e, None, :]
        sig = np.asarray(field.density(pts.reshape(-1, 3)), dtype=np.float64).reshape(e - s, n_samples)
        out[s:e] = np.exp(-sig.sum(axis=1) * reach[s:e] / n_samples)
    return out


def transmittance_to_point(field, frm, to, n_samples: int = 512) -> float:
    frm = np.asarray(frm, dtype=np.float64)
    to = np.asarray(to, dtype=np.float64)
    if np.allclose(frm, to, rtol=0, atol=1e-12):
        raise DomainError("transmittance_to_point needs distinct endpoints")
    return float(transmittance_batch(field, frm[None], to[None], n_samples)[0])
