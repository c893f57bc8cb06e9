"""Radiance fields: a ground-truth voxel grid and a learnable hash-grid field.

Both expose the same batched interface used by the renderer::

    sigma, rgb = field.query(points, directions)   # (M,), (M, 3)
    sigma = field.density(points)                  # (M,)

The hash-grid field additionally supports ``forward``/``backward`` with an explicit
cache handle so gradients can be accumulated into its :class:`ParamVector`.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.special import expit

from . import _kernels
from .errors import DomainError, UsageError
from .geometry import contract_points

__all__ = [
    "FieldSample",
    "VoxelField",
    "HashGridConfig",
    "HashGridField",
    "ParamVector",
    "FieldCache",
    "Adam",
    "adam_step",
    "log_linear_lr",
    "sample_field",
    "hash_encode",
    "hash_encode_reference",
    "sh_encode",
]


@dataclass(frozen=True)
class FieldSample:
    sigma: float
    color: np.ndarray


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise DomainError("field query with non-finite input")


# ---------------------------------------------------------------------------
# Voxel field
# ---------------------------------------------------------------------------


class VoxelField:
    """Density/color stored at voxel centers of an axis-aligned box.

    ``interpolation='trilinear'`` blends the 8 surrounding voxel centers (values are
    clamped to the outermost centers inside the box); ``'nearest'`` returns the value of
    the voxel containing the point, giving piecewise-constant binary scenes with exact
    geometry. Queries outside the box return zero density and black.
    """

    def __init__(self, sigma, color, bounds, interpolation: str = "trilinear"):
        sigma = np.ascontiguousarray(sigma, dtype=np.float64)
        color = np.ascontiguousarray(color, dtype=np.float64)
        if sigma.ndim != 3 or color.shape != sigma.shape + (3,):
            raise DomainError("sigma must be (nx, ny, nz) and color (nx, ny, nz, 3)")
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise DomainError("voxel densities must be finite and >= 0")
        if np.any(color < 0) or np.any(color > 1):
            raise DomainError("voxel colors must lie in [0, 1]")
        bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        if np.any(bounds[1] <= bounds[0]):
            raise DomainError("degenerate voxel bounds")
        if interpolation not in ("trilinear", "nearest"):
            raise DomainError(f"unknown interpolation {interpolation!r}")
        self.sigma_grid = sigma
        self.color_grid = color
        self.bounds = bounds
        self.interpolation = interpolation

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.sigma_grid.shape)

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / np.array(self.resolution)

    @property
    def bbox(self) -> np.ndarray:
        return self.bounds

    def voxel_center(self, i, j, k) -> np.ndarray:
        return self.bounds[0] + (np.array([i, j, k]) + 0.5) * self.cell_size

    def _inside(self, p):
        return np.all((p >= self.bounds[0]) & (p <= self.bounds[1]), axis=-1)

    def _lookup(self, p, with_color: bool):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        res = np.array(self.resolution)
        g = (p - self.bounds[0]) / self.cell_size
        inside = self._inside(p)
        if self.interpolation == "nearest":
            ijk = np.clip(np.floor(g).astype(np.int64), 0, res - 1)
            sig = self.sigma_grid[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
            col = self.color_grid[ijk[:, 0], ijk[:, 1], ijk[:, 2]] if with_color else None
        else:
            g = g - 0.5
            i0 = np.clip(np.floor(g).astype(np.int64), 0, np.maximum(res - 2, 0))
            f = np.clip(g - i0, 0.0, 1.0)
            f = np.where(res > 1, f, 0.0)
            i1 = np.minimum(i0 + 1, res - 1)
            sig = np.zeros(len(p))
            col = np.zeros((len(p), 3)) if with_color else None
            for c in range(8):
                o = np.array([(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1])
                idx = np.where(o, i1, i0)
                w = np.prod(np.where(o, f, 1.0 - f), axis=1)
                sig += w * self.sigma_grid[idx[:, 0], idx[:, 1], idx[:, 2]]
                if with_color:
                    col += w[:, None] * self.color_grid[idx[:, 0], idx[:, 1], idx[:, 2]]
        sig = np.where(inside, sig, 0.0)
        if with_color:
            col = np.where(inside[:, None], col, 0.0)
        return sig, col

    def density(self, points) -> np.ndarray:
        return self._lookup(points, with_color=False)[0]

    def query(self, points, directions=None):
        points = np.asarray(points, dtype=np.float64)
        _check_finite(points, directions)
        return self._lookup(points, with_color=True)

    def occupancy(self) -> np.ndarray:
        return self.sigma_grid > 0

    def __eq__(self, other):
        return (
            isinstance(other, VoxelField)
            and np.array_equal(self.sigma_grid, other.sigma_grid)
            and np.array_equal(self.color_grid, other.color_grid)
            and np.array_equal(self.bounds, other.bounds)
        )


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------


class ParamVector:
    """All learnable parameters in one flat array, with named views and a matching gradient."""

    def __init__(self, shapes: "OrderedDict[str, tuple]", dtype=np.float32):
        self.segments: OrderedDict[str, tuple[int, tuple]] = OrderedDict()
        offset = 0
        for name, shape in shapes.items():
            self.segments[name] = (offset, tuple(shape))
            offset += int(np.prod(shape))
        self.data = np.zeros(offset, dtype=dtype)
        self.grad = np.zeros(offset, dtype=dtype)

    def __len__(self):
        return self.data.size

    def _slice(self, name):
        off, shape = self.segments[name]
        return slice(off, off + int(np.prod(shape))), shape

    def view(self, name) -> np.ndarray:
        sl, shape = self._slice(name)
        return self.data[sl].reshape(shape)

    def grad_view(self, name) -> np.ndarray:
        sl, shape = self._slice(name)
        return self.grad[sl].reshape(shape)

    def zero_grad(self):
        self.grad[:] = 0

    def copy(self) -> "ParamVector":
        out = ParamVector.__new__(ParamVector)
        out.segments = OrderedDict(self.segments)
        out.data = self.data.copy()
        out.grad = self.grad.copy()
        return out


def adam_step(params: ParamVector, m: np.ndarray, v: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-15,
              step_index: int = 1) -> list[str]:
    """One bias-corrected Adam update in place, then zero the gradients.

    Segments whose gradient contains non-finite values are left untouched (moments too)
    and their names are returned.
    """
    skipped = []
    bc1 = 1.0 - beta1**step_index
    bc2 = 1.0 - beta2**step_index
    for name in params.segments:
        sl, _ = params._slice(name)
        g = params.grad[sl]
        if not np.all(np.isfinite(g)):
            skipped.append(name)
            continue
        m[sl] = beta1 * m[sl] + (1.0 - beta1) * g
        v[sl] = beta2 * v[sl] + (1.0 - beta2) * g * g
        mhat = m[sl] / bc1
        vhat = v[sl] / bc2
        params.data[sl] -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(params.data.dtype)
    params.zero_grad()
    return skipped


class Adam:
    def __init__(self, params: ParamVector, beta1=0.9, beta2=0.99, eps=1e-15):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(params.data)
        self.v = np.zeros_like(params.data)
        self.step_index = 0

    def step(self, lr: float) -> list[str]:
        self.step_index += 1
        return adam_step(self.params, self.m, self.v, lr, self.beta1, self.beta2, self.eps, self.step_index)


def log_linear_lr(iteration: int, total: int, lr_start: float = 1e-2, lr_end: float = 3e-4) -> float:
    """Learning rate interpolated linearly in log space, held at ``lr_end`` after ``total``."""
    if total <= 0:
        return lr_end
    a = min(max(iteration / total, 0.0), 1.0)
    return float(math.exp((1.0 - a) * math.log(lr_start) + a * math.log(lr_end)))


# ---------------------------------------------------------------------------
# Hash-grid field
# ---------------------------------------------------------------------------

_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
          -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_encode(d: np.ndarray, degree: int) -> np.ndarray:
    """Real spherical harmonics of unit directions up to ``degree`` ((degree+1)**2 values)."""
    if not 0 <= degree <= 3:
        raise DomainError("sh degree must be in [0, 3]")
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = [np.full_like(x, _SH_C0)]
    if degree >= 1:
        out += [-_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            _SH_C2[0] * x * y,
            _SH_C2[1] * y * z,
            _SH_C2[2] * (2.0 * zz - xx - yy),
            _SH_C2[3] * x * z,
            _SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            _SH_C3[0] * y * (3 * xx - yy),
            _SH_C3[1] * x * y * z,
            _SH_C3[2] * y * (4 * zz - xx - yy),
            _SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            _SH_C3[4] * x * (4 * zz - xx - yy),
            _SH_C3[5] * z * (xx - yy),
            _SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=1)


@dataclass
class HashGridConfig:
    levels: int = 8
    base_resolution: int = 16
    per_level_scale: float = 1.5
    log2_table_size: int = 15
    features_per_level: int = 2
    hidden_width: int = 64
    geo_features: int = 16
    sh_degree: int = 3
    dtype: str = "float32"
    # Points are mapped to (x - scene_center) / scene_radius before contraction.
    scene_center: list = dc_field(default_factory=lambda: [0.0, 0.0, 0.0])
    scene_radius: float = 1.0
    contract: bool = True
    init_scale: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.base_resolution < 2 or self.per_level_scale <= 1:
            raise DomainError("invalid hash-grid level configuration")
        if self.features_per_level < 1 or self.geo_features < 1 or self.scene_radius <= 0:
            raise DomainError("invalid hash-grid configuration")

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def resolutions(self) -> np.ndarray:
        return np.array(
            [int(math.floor(self.base_resolution * self.per_level_scale**l)) for l in range(self.levels)],
            dtype=np.int64,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FieldCache:
    """Activations of one ``HashGridField.forward`` call, consumed by ``backward``."""

    idx: np.ndarray
    wts: np.ndarray
    enc: np.ndarray
    h1: np.ndarray
    geo: np.ndarray
    x3: np.ndarray
    h3: np.ndarray
    h4: np.ndarray
    rgb: np.ndarray
    consumed: bool = False


class HashGridField:
    """Instant-NGP style field: hash encoding, a density MLP and a view-dependent color MLP.

    density = softplus(geo[0]), rgb = sigmoid(color_mlp([geo, SH(d)])).
    """

    def __init__(self, config: HashGridConfig | None = None, params: ParamVector | None = None):
        self.config = config or HashGridConfig()
        c = self.config
        self.dtype = np.dtype(c.dtype)
        self.resolutions = c.resolutions
        self.dense = self.resolutions**3 <= c.table_size
        enc_dim = c.levels * c.features_per_level
        sh_dim = (c.sh_degree + 1) ** 2
        H = c.hidden_width
        shapes = OrderedDict(
            hash=(c.levels, c.table_size, c.features_per_level),
            w1=(enc_dim, H), b1=(H,),
            w2=(H, c.geo_features), b2=(c.geo_features,),
            w3=(c.geo_features + sh_dim, H), b3=(H,),
            w4=(H, H), b4=(H,),
            w5=(H, 3), b5=(3,),
        )
        if params is None:
            params = ParamVector(shapes, dtype=self.dtype)
            self._init_params(params)
        elif params.segments != ParamVector(shapes, dtype=self.dtype).segments:
            raise DomainError("parameter layout does not match the field configuration")
        self.params = params

    def _init_params(self, params: ParamVector):
        rng = np.random.default_rng(self.config.seed)
        s = self.config.init_scale
        params.view("hash")[...] = rng.uniform(-s, s, size=params.view("hash").shape)
        for w in ("w1", "w2", "w3", "w4", "w5"):
            fan_in = params.view(w).shape[0]
            bound = math.sqrt(6.0 / fan_in)
            params.view(w)[...] = rng.uniform(-bound, bound, size=params.view(w).shape)

    # -- coordinate mapping ------------------------------------------------
    @property
    def bbox(self) -> np.ndarray:
        c = np.asarray(self.config.scene_center, dtype=np.float64)
        r = self.config.scene_radius
        return np.stack([c - r, c + r])

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """World points -> encoding domain [0, 1]^3."""
        c = self.config
        x = (np.asarray(points, dtype=np.float64) - np.asarray(c.scene_center)) / c.scene_radius
        if c.contract:
            u = contract_points(x) / 4.0 + 0.5
        else:
            u = x / 2.0 + 0.5
        return np.clip(u, 0.0, 1.0)

    # -- encoding ----------------------------------------------------------
    def _encode(self, u: np.ndarray):
        u = np.ascontiguousarray(u, dtype=np.float64)
        M = u.shape[0]
        c = self.config
        tables = self.params.view("hash")
        out = np.empty((M, c.levels * c.features_per_level), dtype=self.dtype)
        idx = np.empty((M, c.levels, 8), dtype=np.int64)
        wts = np.empty((M, c.levels, 8), dtype=self.dtype)
        _kernels.hash_encode_forward(u, tables, self.resolutions, self.dense, out, idx, wts)
        return out, idx, wts

    # -- forward / backward ------------------------------------------------
    def forward(self, points, directions, need_color: bool = True):
        """Returns (sigma, rgb, cache). ``rgb`` is None when ``need_color`` is False."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _check_finite(points, directions)
        P = self.params
        enc, idx, wts = self._encode(self.normalize(points))
        h1 = np.maximum(enc @ P.view("w1") + P.view("b1"), 0)
        geo = h1 @ P.view("w2") + P.view("b2")
        sigma = np.logaddexp(0, geo[:, 0])
        if not need_color:
            return sigma, None, None
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        sh = sh_encode(d, self.config.sh_degree).astype(self.dtype)
        x3 = np.concatenate([geo, sh], axis=1)
        h3 = np.maximum(x3 @ P.view("w3") + P.view("b3"), 0)
        h4 = np.maximum(h3 @ P.view("w4") + P.view("b4"), 0)
        logits = h4 @ P.view("w5") + P.view("b5")
        rgb = expit(logits)
        cache = FieldCache(idx, wts, enc, h1, geo, x3, h3, h4, rgb)
        return sigma, rgb, cache

    def backward(self, cache: FieldCache | None, d_sigma, d_rgb) -> None:
        """Accumulate parameter gradients (``+=``) for upstream d(loss)/d(sigma, rgb)."""
        if cache is None:
            raise UsageError("backward needs the cache returned by forward")
        P = self.params
        dt = self.dtype
        d_sigma = np.asarray(d_sigma, dtype=dt).reshape(-1)
        d_rgb = np.asarray(d_rgb, dtype=dt).reshape(-1, 3)
        g = P.grad_view
        d_logit = d_rgb * cache.rgb * (1 - cache.rgb)
        g("w5")[...] += cache.h4.T @ d_logit
        g("b5")[...] += d_logit.sum(0)
        d_h4 = (d_logit @ P.view("w5").T) * (cache.h4 > 0)
        g("w4")[...] += cache.h3.T @ d_h4
        g("b4")[...] += d_h4.sum(0)
        d_h3 = (d_h4 @ P.view("w4").T) * (cache.h3 > 0)
        g("w3")[...] += cache.x3.T @ d_h3
        g("b3")[...] += d_h3.sum(0)
        d_geo = d_h3 @ P.view("w3")[: self.config.geo_features].T
        d_geo[:, 0] += d_sigma * expit(cache.geo[:, 0])
        g("w2")[...] += cache.h1.T @ d_geo
        g("b2")[...] += d_geo.sum(0)
        d_h1 = (d_geo @ P.view("w2").T) * (cache.h1 > 0)
        g("w1")[...] += cache.enc.T @ d_h1
        g("b1")[...] += d_h1.sum(0)
        d_enc = np.ascontiguousarray(d_h1 @ P.view("w1").T)
        _kernels.hash_encode_backward(cache.idx, cache.wts, d_enc, g("hash"))

    def query(self, points, directions):
        sigma, rgb, _ = self.forward(points, directions)
        return sigma.astype(np.float64), rgb.astype(np.float64)

    def density(self, points) -> np.ndarray:
        return self.forward(points, None, need_color=False)[0].astype(np.float64)

    def copy(self) -> "HashGridField":
        return HashGridField(HashGridConfig(**self.config.to_dict()), self.params.copy())


# ---------------------------------------------------------------------------
# Single-query helpers
# ---------------------------------------------------------------------------


def sample_field(field, point, direction) -> FieldSample:
    point = np.asarray(point, dtype=np.float64).reshape(1, 3)
    direction = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    _check_finite(point, direction)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise DomainError("direction must be unit length")
    sigma, rgb = field.query(point, direction)
    return FieldSample(float(sigma[0]), np.asarray(rgb[0], dtype=np.float64))


def hash_encode(field: HashGridField, points) -> np.ndarray:
    """Encode points already in the normalized domain; coordinates outside [0, 1] are clamped."""
    u = np.asarray(points, dtype=np.float64)
    single = u.ndim == 1
    out, _, _ = field._encode(np.clip(u.reshape(-1, 3), 0.0, 1.0))
    return out[0] if single else out


def hash_encode_reference(field: HashGridField, points) -> np.ndarray:
    """Plain-numpy version of ``hash_encode`` (slow; used as a cross-check)."""
    u = np.clip(np.asarray(points, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    c = field.config
    tables = field.params.view("hash").astype(np.float64)
    feats = []
    for lvl, r in enumerate(field.resolutions):
        pos = u * (r - 1)
        i0 = np.minimum(np.floor(pos).astype(np.int64), r - 2)
        fr = pos - i0
        acc = np.zeros((len(u), c.features_per_level))
        for corner in range(8):
            o = np.array([corner & 1, (corner >> 1) & 1, (corner >> 2) & 1])
            ci = i0 + o
            if field.dense[lvl]:
                h = ci[:, 0] + ci[:, 1] * r + ci[:, 2] * r * r
            else:
                h = ci[:, 0] ^ (ci[:, 1] * _kernels.PRIME_Y) ^ (ci[:, 2] * _kernels.PRIME_Z)
                h &= c.table_size - 1
            w = np.prod(np.where(o, fr, 1.0 - fr), axis=1)
            acc += w[:, None] * tables[lvl, h]
        feats.append(acc)
    return np.concatenate(feats, axis=1)
