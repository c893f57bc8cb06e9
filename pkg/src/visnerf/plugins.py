"""Content providers for the inpainting, enhancement and depth-completion steps.

A provider only has to implement ``inpaint(request) -> InpaintResponse`` or
``complete(request) -> depth``. Callers go through :func:`inpaint`, :func:`enhance` and
:func:`complete_depth`, which validate requests and responses and, for mask-erasing
requests, copy the unmasked pixels back so no provider can alter observed content.
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.ndimage import gaussian_filter

from .errors import DomainError, NumericError, ProviderError
from .geometry import Camera, camera_set_hash
from .render import render_image

log = logging.getLogger(__name__)

__all__ = [
    "InpaintRequest",
    "InpaintResponse",
    "DepthCompleteRequest",
    "inpaint",
    "enhance",
    "complete_depth",
    "OracleProvider",
    "ConstantProvider",
    "UnsharpProvider",
    "SubprocessProvider",
    "GuidedHarmonicDepth",
    "OracleDepth",
    "guided_harmonic_fill",
    "harmonic_system",
    "make_provider",
    "make_depth_provider",
    "collect_enhancer_corruption_data",
]

ERASE = "erase-masked"
KEEP = "keep-all"


@dataclass
class InpaintRequest:
    rendered_image: np.ndarray
    visibility_mask: np.ndarray
    t_noise: float
    camera: Camera | None = None
    guidance_mode: str = ERASE
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.rendered_image = np.asarray(self.rendered_image, dtype=np.float64)
        self.visibility_mask = np.asarray(self.visibility_mask, dtype=bool)
        if self.rendered_image.ndim != 3 or self.rendered_image.shape[2] != 3:
            raise DomainError("rendered_image must be (H, W, 3)")
        if self.visibility_mask.shape != self.rendered_image.shape[:2]:
            raise DomainError("mask shape does not match the image")
        if not 0.0 <= self.t_noise <= 1.0:
            raise DomainError("t_noise must lie in [0, 1]")
        if self.guidance_mode not in (ERASE, KEEP):
            raise DomainError(f"unknown guidance mode {self.guidance_mode!r}")

    def guidance(self) -> np.ndarray:
        """The image a provider is allowed to see: masked pixels zeroed when erasing."""
        if self.guidance_mode == KEEP:
            return self.rendered_image.copy()
        return np.where(self.visibility_mask[..., None], 0.0, self.rendered_image)


@dataclass
class InpaintResponse:
    image: np.ndarray


@dataclass
class DepthCompleteRequest:
    guidance_image: np.ndarray
    masked_depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.guidance_image = np.asarray(self.guidance_image, dtype=np.float64)
        self.masked_depth = np.asarray(self.masked_depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.masked_depth.shape != self.mask.shape or self.guidance_image.shape[:2] != self.mask.shape:
            raise DomainError("depth, mask and guidance shapes must agree")
        known = self.masked_depth[~self.mask]
        if not np.all(np.isfinite(known)) or np.any(known <= 0):
            raise DomainError("known depths must be finite and > 0")


# ---------------------------------------------------------------------------
# Interface wrappers
# ---------------------------------------------------------------------------


def _call(provider, req: InpaintRequest) -> InpaintResponse:
    try:
        resp = provider.inpaint(req)
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"{type(provider).__name__} failed: {exc}") from exc
    img = np.asarray(getattr(resp, "image", resp), dtype=np.float64)
    if img.shape != req.rendered_image.shape:
        raise ProviderError(f"provider returned shape {img.shape}, expected {req.rendered_image.shape}")
    if not np.all(np.isfinite(img)):
        raise ProviderError("provider returned non-finite pixels")
    return InpaintResponse(np.clip(img, 0.0, 1.0))


def inpaint(provider, req: InpaintRequest) -> InpaintResponse:
    """Fill masked pixels; unmasked pixels are returned bit-identical to the request."""
    if req.guidance_mode != ERASE:
        req = InpaintRequest(req.rendered_image, req.visibility_mask, req.t_noise, req.camera, ERASE, req.meta)
    if not req.visibility_mask.any():
        return InpaintResponse(req.rendered_image.copy())
    resp = _call(provider, req)
    out = np.where(req.visibility_mask[..., None], resp.image, req.rendered_image)
    return InpaintResponse(out)


def enhance(provider, req: InpaintRequest) -> InpaintResponse:
    """Let the provider rework the whole image, with the full render as guidance."""
    if req.guidance_mode != KEEP:
        req = InpaintRequest(req.rendered_image, req.visibility_mask, req.t_noise, req.camera, KEEP, req.meta)
    return _call(provider, req)


def complete_depth(provider, req: DepthCompleteRequest) -> np.ndarray:
    if req.mask.all():
        raise DomainError("depth completion needs at least one known pixel")
    if not req.mask.any():
        return req.masked_depth.copy()
    try:
        out = np.asarray(provider.complete(req), dtype=np.float64)
    except (DomainError, NumericError, ProviderError):
        raise
    except Exception as exc:
        raise ProviderError(f"{type(provider).__name__} failed: {exc}") from exc
    if out.shape != req.mask.shape:
        raise ProviderError("depth provider returned the wrong shape")
    return np.where(req.mask, out, req.masked_depth)


# ---------------------------------------------------------------------------
# Reference providers
# ---------------------------------------------------------------------------


class OracleProvider:
    """Ground truth from a reference field rendered at the request's camera.

    As an inpainter it returns the ground-truth render; as an enhancer it blends the
    request toward ground truth by ``alpha`` (0 = identity, 1 = ground truth).
    """

    def __init__(self, field, n_samples: int = 512, alpha: float = 1.0):
        if not 0.0 <= alpha <= 1.0:
            raise DomainError("alpha must lie in [0, 1]")
        self.field = field
        self.n_samples = n_samples
        self.alpha = alpha
        self._cache: dict[str, tuple] = {}

    def ground_truth(self, camera: Camera):
        key = camera_set_hash([camera])
        if key not in self._cache:
            r = render_image(self.field, camera, n_samples=self.n_samples)
            self._cache[key] = (r.image, r.depth)
        return self._cache[key]

    def inpaint(self, req: InpaintRequest) -> InpaintResponse:
        if req.camera is None:
            raise ProviderError("oracle provider needs the request camera")
        gt = self.ground_truth(req.camera)[0]
        if req.guidance_mode == ERASE:
            return InpaintResponse(gt.copy())
        return InpaintResponse((1.0 - self.alpha) * req.rendered_image + self.alpha * gt)


class ConstantProvider:
    def __init__(self, fill=0.5):
        self.fill = np.broadcast_to(np.asarray(fill, dtype=np.float64), (3,))

    def inpaint(self, req: InpaintRequest) -> InpaintResponse:
        out = req.guidance()
        out[req.visibility_mask] = self.fill
        return InpaintResponse(out)


class UnsharpProvider:
    """``img + amount * (img - blur(img))``; only meaningful as an enhancer."""

    def __init__(self, amount: float = 0.5, radius: float = 1.0):
        self.amount = amount
        self.radius = radius

    def inpaint(self, req: InpaintRequest) -> InpaintResponse:
        img = req.guidance()
        if self.amount == 0:
            return InpaintResponse(img)
        blur = gaussian_filter(img, sigma=(self.radius, self.radius, 0), mode="nearest")
        return InpaintResponse(img + self.amount * (img - blur))


class SubprocessProvider:
    """Exchange requests with an external program through a spool directory.

    For each call a fresh directory receives ``input.png`` (guidance image), ``mask.png``
    (255 = fill) and ``request.json``; the command is run with that directory appended
    as its last argument and must write ``output.png``.
    """

    def __init__(self, command: str, spool_dir=None, timeout: float = 600.0,
                 denoising_steps: int = 10, guidance_scale: float = 1.0):
        self.command = shlex.split(command)
        if not self.command:
            raise ProviderError("empty provider command")
        self.spool_dir = Path(spool_dir) if spool_dir else None
        self.timeout = timeout
        self.denoising_steps = denoising_steps
        self.guidance_scale = guidance_scale
        self.calls = 0

    def inpaint(self, req: InpaintRequest) -> InpaintResponse:
        from .io import read_png, write_mask_png, write_png

        self.calls += 1
        if self.spool_dir is not None:
            self.spool_dir.mkdir(parents=True, exist_ok=True)
        work = Path(tempfile.mkdtemp(prefix=f"req{self.calls:05d}_", dir=self.spool_dir))
        write_png(work / "input.png", req.guidance())
        write_mask_png(work / "mask.png", req.visibility_mask)
        meta = {
            "t_noise": req.t_noise,
            "guidance_mode": req.guidance_mode,
            "camera": req.camera.to_dict() if req.camera is not None else None,
            "denoising_steps": self.denoising_steps,
            "guidance_scale": self.guidance_scale,
            **req.meta,
        }
        (work / "request.json").write_text(json.dumps(meta, indent=2))
        try:
            proc = subprocess.run(self.command + [str(work)], capture_output=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ProviderError(f"provider command failed: {exc}") from exc
        if proc.returncode != 0:
            raise ProviderError(f"provider exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[-500:]}")
        out = work / "output.png"
        if not out.exists():
            raise ProviderError(f"provider wrote no {out.name}")
        return InpaintResponse(read_png(out))


# ---------------------------------------------------------------------------
# Depth completion
# ---------------------------------------------------------------------------


MIN_AFFINITY = 1e-6


def harmonic_system(guidance, depth, mask, beta: float = 50.0, min_affinity: float = MIN_AFFINITY):
    """Sparse system ``A x = b`` for the unknown pixels of the guided-harmonic fill.

    Edge weights on the 4-connected grid are ``exp(-beta * ||I_p - I_q||)``, floored at
    ``min_affinity``; known pixels act as Dirichlet boundary values. Returns
    ``(A, b, unknown_flat_indices)``.

    Without the floor, a region fenced off by strong guidance edges couples to its
    boundary through weights as small as ``exp(-100)``, and its block of ``A`` is singular
    to working precision.
    """
    if not 0.0 <= min_affinity <= 1.0:
        raise DomainError("min_affinity must lie in [0, 1]")
    guidance = np.asarray(guidance, dtype=np.float64)
    if guidance.ndim == 2:
        guidance = guidance[..., None]
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    n = H * W
    unknown = np.flatnonzero(mask)
    pos = -np.ones(n, dtype=np.int64)
    pos[unknown] = np.arange(unknown.size)
    flat_d = np.where(mask, 0.0, depth).reshape(-1)
    flat_m = mask.reshape(-1)
    pix = np.arange(n).reshape(H, W)
    pairs = [(pix[:, :-1].ravel(), pix[:, 1:].ravel()), (pix[:-1, :].ravel(), pix[1:, :].ravel())]
    p = np.concatenate([a for a, _ in pairs])
    q = np.concatenate([b for _, b in pairs])
    g = guidance.reshape(n, -1)
    a = np.maximum(np.exp(-beta * np.linalg.norm(g[p] - g[q], axis=1)), min_affinity)
    diag = np.zeros(unknown.size)
    b = np.zeros(unknown.size)
    rows, cols, vals = [], [], []
    for s, t in ((p, q), (q, p)):
        us = flat_m[s]
        np.add.at(diag, pos[s[us]], a[us])
        both = us & flat_m[t]
        rows.append(pos[s[both]])
        cols.append(pos[t[both]])
        vals.append(-a[both])
        bound = us & ~flat_m[t]
        np.add.at(b, pos[s[bound]], a[bound] * flat_d[t[bound]])
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(unknown.size, unknown.size))
    A = A + sp.diags(diag)
    return A.tocsr(), b, unknown


def _boundary_range(depth, mask):
    """Min and max of the known pixels 4-adjacent to an unknown pixel."""
    near = np.zeros_like(mask)
    near[1:] |= mask[:-1]
    near[:-1] |= mask[1:]
    near[:, 1:] |= mask[:, :-1]
    near[:, :-1] |= mask[:, 1:]
    vals = depth[near & ~mask]
    return vals.min(), vals.max()


def guided_harmonic_fill(guidance, depth, mask, beta: float = 50.0, tol: float = 1e-6,
                         max_iter: int | None = None, method: str = "cg",
                         min_affinity: float = MIN_AFFINITY) -> np.ndarray:
    """Fill ``depth`` where ``mask`` is True by minimizing the edge-aware smoothness energy.

    ``method='cg'`` runs conjugate gradients on the diagonally scaled system and stops
    at ``||r|| <= tol * ||b||`` (scaled residual); ``'direct'`` uses a sparse LU solve.
    """
    mask = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth, dtype=np.float64)
    if mask.all():
        raise DomainError("depth completion needs at least one known pixel")
    out = depth.copy()
    if not mask.any():
        return out
    A, b, unknown = harmonic_system(guidance, depth, mask, beta, min_affinity)
    if method == "direct":
        x = spla.spsolve(A.tocsc(), b)
    elif method == "cg":
        # Symmetric diagonal scaling keeps the stopping rule meaningful when some pixels
        # are nearly decoupled by strong guidance edges.
        s = 1.0 / np.sqrt(A.diagonal())
        As = sp.diags(s) @ A @ sp.diags(s)
        bs = s * b
        max_iter = max_iter or 10 * unknown.size + 100
        y, info = spla.cg(As, bs, rtol=tol, atol=0.0, maxiter=max_iter)
        if info != 0:
            resid = float(np.linalg.norm(As @ y - bs))
            raise NumericError(f"conjugate gradients did not converge in {max_iter} iterations "
                               f"(residual {resid:.3e}, |b| {np.linalg.norm(bs):.3e})")
        # The exact minimizer lies within the boundary range; clamp CG round-off to it.
        x = np.clip(s * y, *_boundary_range(depth, mask))
    else:
        raise DomainError(f"unknown solver {method!r}")
    out.reshape(-1)[unknown] = x
    return out


class GuidedHarmonicDepth:
    def __init__(self, beta: float = 50.0, tol: float = 1e-6, max_iter: int | None = None,
                 min_affinity: float = MIN_AFFINITY):
        self.beta, self.tol, self.max_iter, self.min_affinity = beta, tol, max_iter, min_affinity

    def complete(self, req: DepthCompleteRequest) -> np.ndarray:
        return guided_harmonic_fill(req.guidance_image, req.masked_depth, req.mask,
                                    self.beta, self.tol, self.max_iter, min_affinity=self.min_affinity)


class OracleDepth:
    """Ground-truth depth rendered from a reference field (needs ``camera`` set per call)."""

    def __init__(self, oracle: OracleProvider):
        self.oracle = oracle
        self.camera: Camera | None = None

    def complete(self, req: DepthCompleteRequest) -> np.ndarray:
        if self.camera is None:
            raise ProviderError("oracle depth provider has no camera bound")
        return self.oracle.ground_truth(self.camera)[1]


# ---------------------------------------------------------------------------
# Construction from plan bindings
# ---------------------------------------------------------------------------


def make_provider(spec, reference_field=None):
    """Build an image provider from a binding such as ``{"kind": "oracle", "alpha": 1}``,
    ``"constant"`` or ``"subprocess:<cmd>"``."""
    if isinstance(spec, str):
        if spec.startswith("subprocess:"):
            spec = {"kind": "subprocess", "command": spec.split(":", 1)[1]}
        else:
            spec = {"kind": spec}
    spec = dict(spec)
    kind = spec.pop("kind", "oracle")
    if kind == "oracle":
        if reference_field is None:
            raise ProviderError("oracle provider needs a ground-truth field (scene has none)")
        return OracleProvider(reference_field, **spec)
    if kind == "constant":
        return ConstantProvider(**spec)
    if kind == "unsharp":
        return UnsharpProvider(**spec)
    if kind == "subprocess":
        return SubprocessProvider(**spec)
    raise ProviderError(f"unknown provider kind {kind!r}")


def make_depth_provider(spec, reference_field=None):
    if isinstance(spec, str):
        spec = {"kind": spec}
    spec = dict(spec)
    kind = spec.pop("kind", "guided-harmonic")
    if kind == "guided-harmonic":
        return GuidedHarmonicDepth(**spec)
    if kind == "oracle":
        if reference_field is None:
            raise ProviderError("oracle depth needs a ground-truth field")
        return OracleDepth(OracleProvider(reference_field, **spec))
    raise ProviderError(f"unknown depth provider kind {kind!r}")


def collect_enhancer_corruption_data(field, data, inpaint_provider, plan, checkpoints, out_dir=None):
    """Corrupted-render / clean-image / mask triples for training an enhancer.

    Fine-tunes a copy of ``field`` on the training views while replacing the
    ground-truth supervision inside each view's pseudo-disocclusion mask with provider
    output, and snapshots every training view at the iterations in ``checkpoints``.
    See :func:`visnerf.pipeline.corruption_loop`.
    """
    from .pipeline import corruption_loop

    return corruption_loop(field, data, inpaint_provider, plan, checkpoints, out_dir)
