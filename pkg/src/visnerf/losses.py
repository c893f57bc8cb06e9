"""Training objectives. Every loss returns ``(value, gradient)`` with the gradient taken
w.r.t. its first (rendered) argument."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError

log = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "LossReport",
    "rgb_loss",
    "depth_loss",
    "inpaint_rgb_loss",
    "noise_weight",
    "distortion_loss",
    "distortion_loss_reference",
    "hash_decay_loss",
]


@dataclass
class LossWeights:
    w_rgb: float = 1.0
    w_depth: float = 0.05
    w_inpaint: float = 1.0
    w_distortion: float = 1e-3
    w_hash_decay: float = 1e-4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise DomainError(f"loss weight {k} must be finite and >= 0")


@dataclass
class LossReport:
    iteration: int
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.weights.get(k, 1.0) * v for k, v in self.terms.items()))

    def add(self, name: str, value: float, weight: float = 1.0):
        self.terms[name] = self.terms.get(name, 0.0) + float(value)
        self.weights[name] = float(weight)


def _select(rendered, target, mask):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise DomainError(f"shape mismatch {rendered.shape} vs {target.shape}")
    return rendered, target


def _pixel_mask(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise DomainError(f"mask shape {mask.shape} does not match pixels {shape}")
    return mask


def rgb_loss(rendered, target, mask=None):
    """Mean over selected pixels of the squared color error ``||C - C_target||^2``.

    ``mask`` marks the pixels that participate (True = used).
    """
    rendered, target = _select(rendered, target, mask)
    sel = _pixel_mask(rendered.shape[:-1], mask)
    count = int(sel.sum())
    grad = np.zeros_like(rendered)
    if count == 0:
        log.debug("rgb_loss called with an empty pixel selection")
        return 0.0, grad
    diff = (rendered - target) * sel[..., None]
    grad = 2.0 * diff / count
    return float(np.sum(diff**2) / count), grad


def depth_loss(rendered_depth, target_depth, mask=None, mode: str = "l2"):
    """Mean squared (``mode='l2'``) or absolute (``'l1'``) depth error over selected pixels."""
    rendered, target = _select(rendered_depth, target_depth, mask)
    sel = _pixel_mask(rendered.shape, mask)
    count = int(sel.sum())
    if count == 0:
        log.debug("depth_loss called with an empty pixel selection")
        return 0.0, np.zeros_like(rendered)
    diff = (rendered - target) * sel
    if mode == "l2":
        return float(np.sum(diff**2) / count), 2.0 * diff / count
    if mode == "l1":
        return float(np.sum(np.abs(diff)) / count), np.sign(diff) / count
    raise DomainError(f"unknown depth loss mode {mode!r}")


def noise_weight(t_noise: float, spec="uniform") -> float:
    """Noise-level weighting ``w(t)``.

    ``spec`` is ``"uniform"`` (w = 1), ``{"kind": "gaussian", "scale": s}``
    (w = exp(-t^2 / (2 s^2))) or ``{"kind": "table", "t": [...], "w": [...]}``
    (piecewise linear), or any callable.
    """
    if callable(spec):
        return float(spec(t_noise))
    if spec in (None, "uniform"):
        return 1.0
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        return 1.0
    if kind == "gaussian":
        s = float(spec.get("scale", 0.5))
        return float(np.exp(-(t_noise**2) / (2.0 * s * s)))
    if kind == "table":
        return float(np.interp(t_noise, spec["t"], spec["w"]))
    raise DomainError(f"unknown noise weighting {kind!r}")


def inpaint_rgb_loss(rendered, provided, mask, t_noise: float, w_fn="uniform"):
    """``w(t)`` times the mean over masked pixels of ``|C_provided - C|`` (L1 over channels)."""
    if not 0.0 <= t_noise <= 1.0:
        raise DomainError("t_noise must lie in [0, 1]")
    rendered, provided = _select(rendered, provided, mask)
    sel = _pixel_mask(rendered.shape[:-1], mask)
    count = int(sel.sum())
    if count == 0:
        return 0.0, np.zeros_like(rendered)
    w = noise_weight(t_noise, w_fn)
    diff = (rendered - provided) * sel[..., None]
    return float(w * np.sum(np.abs(diff)) / count), w * np.sign(diff) / count


def distortion_loss(weights, midpoints, deltas):
    """``sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 delta_i`` per ray, in O(N).

    Inputs are ``(N,)`` for one ray or ``(R, N)`` for a batch (values returned per ray);
    midpoints must be ascending along each ray.
    """
    w = np.asarray(weights, dtype=np.float64)
    m = np.asarray(midpoints, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    single = w.ndim == 1
    w, m, d = np.atleast_2d(w), np.atleast_2d(m), np.atleast_2d(d)
    wm = w * m
    W_before = np.cumsum(w, axis=1) - w
    S_before = np.cumsum(wm, axis=1) - wm
    W_after = w.sum(axis=1, keepdims=True) - W_before - w
    S_after = wm.sum(axis=1, keepdims=True) - S_before - wm
    # sum_j w_j |m_i - m_j| for every i
    spread = (m * W_before - S_before) + (S_after - m * W_after)
    value = np.sum(w * spread, axis=1) + np.sum(w * w * d, axis=1) / 3.0
    grad = 2.0 * spread + 2.0 * w * d / 3.0
    if single:
        return float(value[0]), grad[0]
    return value, grad


def distortion_loss_reference(weights, midpoints, deltas) -> float:
    w = np.asarray(weights, dtype=np.float64)
    m = np.asarray(midpoints, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    return float(np.sum(w[:, None] * w[None, :] * np.abs(m[:, None] - m[None, :])) + np.sum(w * w * d) / 3.0)


def hash_decay_loss(field):
    """Mean squared hash-table entry; returns (value, gradient shaped like the tables)."""
    tables = field.params.view("hash").astype(np.float64)
    P = tables.size
    return float(np.sum(tables**2) / P), 2.0 * tables / P
