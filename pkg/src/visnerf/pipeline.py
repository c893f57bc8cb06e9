"""Three-stage training: fit the input views, inpaint unobserved content seen from a
virtual trajectory, then enhance it.

Every stage draws its randomness from ``numpy.random.default_rng([seed, stage])``, so
runs are reproducible stage by stage and after resuming from a checkpoint.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field as dc_field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ProviderError
from .field import Adam, HashGridConfig, HashGridField, log_linear_lr
from .geometry import Camera, Intrinsics, Pose, circle_trajectory, image_rays
from .io import TrainingLog, write_mask_png, write_png
from .losses import (LossReport, LossWeights, depth_loss, distortion_loss, hash_decay_loss,
                     inpaint_rgb_loss, rgb_loss)
from .plugins import (KEEP, DepthCompleteRequest, InpaintRequest, OracleDepth, complete_depth,
                      enhance, inpaint)
from .render import render_image, render_rays
from .visibility import (TransmittanceCache, VisibilityMap, VisibilityOptions, composite_visibility,
                         pseudo_disocclusion_mask, render_visibility_map)

log = logging.getLogger(__name__)

__all__ = [
    "StagePlan",
    "TrainingData",
    "VirtualViewState",
    "StageResult",
    "make_field",
    "run_stage1",
    "run_stage2",
    "run_stage3",
    "run_pipeline",
    "render_resolution",
    "virtual_cameras",
    "original_view_loss",
    "mean_mask_area",
    "corruption_loop",
]


# Once stage 1 has converged, the squared original-view residual and its gradient are
# tiny next to the constant-magnitude L1 virtual gradient, so the original views need a
# large weight to keep the shared decoder from drifting.
ORIGINAL_VIEW_WEIGHT = 1000.0


def _default_weights():
    return {
        "stage1": asdict(LossWeights(w_inpaint=0.0)),
        "stage2": asdict(LossWeights(w_rgb=ORIGINAL_VIEW_WEIGHT)),
        "stage3": asdict(LossWeights(w_rgb=ORIGINAL_VIEW_WEIGHT)),
    }


@dataclass
class StagePlan:
    """Configuration of all three stages; loaded from / saved to JSON.

    Notes
    -----
    ``stage2_lr``/``stage3_lr`` of ``None`` mean a constant ``lr_end``.
    ``virtual_short_side`` of ``None`` renders virtual views at the training resolution.
    ``trajectory`` of ``None`` takes the virtual trajectory from the scene file.
    """

    seed: int = 0
    stage1_iters: int = 5000
    stage2_iters: int = 500
    stage3_iters: int = 500
    lr_start: float = 1e-2
    lr_end: float = 3e-4
    stage2_lr: float | None = None
    stage3_lr: float | None = None
    rays_per_batch: int = 512
    samples_per_ray: int = 64
    eval_samples: int = 192
    gradient_scaling: float | None = 1.0
    weights: dict = dc_field(default_factory=_default_weights)
    virtual_depth_mode: str = "l1"
    trajectory: dict | None = None
    visibility: dict = dc_field(default_factory=lambda: {"k": 2, "tau": 0.5, "n_secondary": 64,
                                                          "lattice_resolution": 24})
    visibility_refresh: int = 100
    providers: dict = dc_field(default_factory=lambda: {
        "inpaint": {"kind": "oracle"},
        "enhance": {"kind": "oracle", "alpha": 1.0},
        "depth": {"kind": "guided-harmonic", "beta": 50.0},
    })
    noise_weight: object = "uniform"
    t_noise_range: tuple = (0.02, 0.98)
    supervision_region: str = "masked"
    regression_factor: float = 1.5
    field: dict = dc_field(default_factory=dict)
    virtual_short_side: int | None = None
    denoising_steps: int = 10
    guidance_scale: float = 1.0

    def __post_init__(self):
        for k in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if int(getattr(self, k)) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if not (self.lr_start >= self.lr_end > 0):
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.rays_per_batch < 1 or self.samples_per_ray < 1:
            raise ConfigError("rays_per_batch and samples_per_ray must be >= 1")
        if not self.regression_factor > 0:
            raise ConfigError("regression_factor must be > 0")
        if self.supervision_region not in ("masked", "full"):
            raise ConfigError("supervision_region must be 'masked' or 'full'")
        lo, hi = self.t_noise_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("t_noise_range must lie within [0, 1]")
        self.t_noise_range = (float(lo), float(hi))
        merged = _default_weights()
        for st, w in self.weights.items():
            if st not in merged:
                raise ConfigError(f"unknown weight group {st!r}")
            merged[st].update(w)
        try:
            for st in merged:
                LossWeights(**merged[st])
            self.visibility_options()
            HashGridConfig(**self.field)
        except (TypeError, DomainError) as exc:
            raise ConfigError(str(exc)) from exc
        self.weights = merged

    def loss_weights(self, stage: int) -> LossWeights:
        return LossWeights(**self.weights[f"stage{stage}"])

    def visibility_options(self) -> VisibilityOptions:
        opts = {k: v for k, v in self.visibility.items() if k != "n_primary"}
        return VisibilityOptions(**opts)

    def stage_lr(self, stage: int) -> float:
        lr = self.stage2_lr if stage == 2 else self.stage3_lr
        return float(lr if lr is not None else self.lr_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_noise_range"] = list(self.t_noise_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "StagePlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read plan {path}: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class TrainingData:
    """Posed training images and depth maps, flattened into rays."""

    cameras: list
    images: list
    depths: list
    origins: np.ndarray = dc_field(init=False, repr=False)
    directions: np.ndarray = dc_field(init=False, repr=False)
    colors: np.ndarray = dc_field(init=False, repr=False)
    ray_depths: np.ndarray = dc_field(init=False, repr=False)
    near: np.ndarray = dc_field(init=False, repr=False)
    far: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        if not self.cameras:
            raise ConfigError("need at least one training view")
        if not (len(self.cameras) == len(self.images) == len(self.depths)):
            raise ConfigError("cameras, images and depths must have equal counts")
        o, d, c, z, n, f = [], [], [], [], [], []
        for i, (cam, img, dep) in enumerate(zip(self.cameras, self.images, self.depths)):
            H, W = cam.height, cam.width
            if img is None or np.shape(img) != (H, W, 3):
                raise ConfigError(f"view {i}: image shape {np.shape(img)} does not match camera {H}x{W}")
            if dep is None or np.shape(dep) != (H, W):
                raise ConfigError(f"view {i}: depth shape {np.shape(dep)} does not match camera {H}x{W}")
            ro, rd = image_rays(cam)
            o.append(ro)
            d.append(rd)
            c.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
            z.append(np.asarray(dep, dtype=np.float64).reshape(-1))
            n.append(np.full(H * W, cam.near))
            f.append(np.full(H * W, cam.far))
        self.origins, self.directions = np.concatenate(o), np.concatenate(d)
        self.colors, self.ray_depths = np.concatenate(c), np.concatenate(z)
        self.near, self.far = np.concatenate(n), np.concatenate(f)

    @classmethod
    def from_scene(cls, scene, split: str = "train") -> "TrainingData":
        cams, imgs, deps = scene.split(split)
        return cls(list(cams), list(imgs), list(deps))

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]


@dataclass
class VirtualViewState:
    camera: Camera
    render: np.ndarray | None = None
    visibility: VisibilityMap | None = None
    provided: np.ndarray | None = None
    depth: np.ndarray | None = None
    visits: int = 0


@dataclass
class StageResult:
    field: HashGridField
    log: TrainingLog
    meta: dict = dc_field(default_factory=dict)


def make_field(plan: StagePlan, scene_meta: dict | None = None) -> HashGridField:
    """Hash-grid field seeded from the plan; the unit ball of the contraction is fitted
    to the scene's ``field_bounds`` when present."""
    cfg = dict(plan.field)
    cfg.setdefault("seed", plan.seed)
    fb = (scene_meta or {}).get("field_bounds")
    if fb:
        cfg.setdefault("scene_center", list(fb["center"]))
        cfg.setdefault("scene_radius", float(fb["radius"]))
    return HashGridField(HashGridConfig(**cfg))


def render_resolution(camera: Camera, short_side: int = 512) -> Intrinsics:
    """Intrinsics rescaled so the shorter image side equals ``short_side``."""
    if short_side < 1:
        raise DomainError("short_side must be >= 1")
    K = camera.intrinsics
    W, H = K.width, K.height
    if min(W, H) == short_side:
        return K
    s = short_side / min(W, H)
    if W <= H:
        nw, nh = short_side, int(math.floor(H * s + 0.5))
    else:
        nw, nh = int(math.floor(W * s + 0.5)), short_side
    sx, sy = nw / W, nh / H
    return Intrinsics(K.fx * sx, K.fy * sy, K.cx * sx, K.cy * sy, nw, nh)


def virtual_cameras(plan: StagePlan, scene_meta: dict, reference: Camera) -> list[Camera]:
    traj = plan.trajectory or scene_meta.get("trajectory")
    if not traj:
        raise ConfigError("no virtual trajectory in plan or scene")
    try:
        poses = circle_trajectory(Pose.from_matrix(traj["center"]), float(traj["radius"]), int(traj["m"]),
                                  traj["look_at"])
    except (KeyError, DomainError) as exc:
        raise ConfigError(f"bad trajectory: {exc}") from exc
    intr = reference.intrinsics
    if plan.virtual_short_side:
        intr = render_resolution(reference, plan.virtual_short_side)
    return [Camera(intr, p, reference.near, reference.far) for p in poses]


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------


def _original_view_step(field, data: TrainingData, rng, plan: StagePlan, w: LossWeights,
                        report: LossReport, n_rays: int):
    """Photometric, depth and distortion losses on a random batch of input rays."""
    idx = rng.choice(data.n_rays, size=min(n_rays, data.n_rays), replace=False)
    near, far = data.near[idx], data.far[idx]
    rr = render_rays(field, data.origins[idx], data.directions[idx], near, far, plan.samples_per_ray,
                     rng, need_grad=True, gradient_scaling=plan.gradient_scaling)
    l_rgb, g_rgb = rgb_loss(rr.color, data.colors[idx])
    l_dep, g_dep = depth_loss(rr.depth, data.ray_depths[idx], mode="l2")
    span = (far - near)[:, None]
    d_weights = None
    if w.w_distortion > 0:
        per_ray, g_w = distortion_loss(rr.weights, (rr.t - near[:, None]) / span, rr.deltas / span)
        report.add("distortion", float(per_ray.mean()), w.w_distortion)
        d_weights = w.w_distortion * g_w / len(idx)
    rr.backward(d_color=w.w_rgb * g_rgb, d_depth=w.w_depth * g_dep, d_weights=d_weights)
    report.add("rgb", l_rgb, w.w_rgb)
    report.add("depth", l_dep, w.w_depth)


def _hash_decay_step(field, w: LossWeights, report: LossReport):
    if w.w_hash_decay <= 0:
        return
    val, grad = hash_decay_loss(field)
    field.params.grad_view("hash")[...] += (w.w_hash_decay * grad).astype(field.params.grad.dtype)
    report.add("hash_decay", val, w.w_hash_decay)


def _finish_step(adam: Adam, lr: float, report: LossReport, stage: int, tlog: TrainingLog, skipped: int = 0):
    total = report.total
    if not np.isfinite(total):
        raise NumericError(f"stage {stage} iteration {report.iteration}: non-finite loss {total}")
    bad = adam.step(lr)
    if bad:
        log.warning("stage %d iteration %d: skipped update of %s (non-finite gradient)", stage,
                    report.iteration, ", ".join(bad))
    tlog.append(stage, report, lr, skipped)


def run_stage1(field: HashGridField, data: TrainingData, plan: StagePlan,
               tlog: TrainingLog | None = None) -> StageResult:
    """Fit the input views with photometric, depth, distortion and hash-decay losses."""
    tlog = tlog if tlog is not None else TrainingLog()
    rng = np.random.default_rng([plan.seed, 1])
    w = plan.loss_weights(1)
    adam = Adam(field.params)
    for it in range(plan.stage1_iters):
        report = LossReport(it)
        try:
            _original_view_step(field, data, rng, plan, w, report, plan.rays_per_batch)
        except DomainError as exc:
            raise NumericError(f"stage 1 iteration {it}: {exc}") from exc
        _hash_decay_step(field, w, report)
        _finish_step(adam, log_linear_lr(it, plan.stage1_iters, plan.lr_start, plan.lr_end), report, 1, tlog)
    meta = {"original_view_loss": original_view_loss(field, data, plan.eval_samples)}
    return StageResult(field, tlog, meta)


def _surface_offset(cam: Camera, n: int) -> float:
    return 1.5 * (cam.far - cam.near) / n


def _virtual_step(field, state: VirtualViewState, data: TrainingData, plan: StagePlan, rng,
                  w: LossWeights, report: LossReport, provider, depth_provider, mode: str,
                  opts: VisibilityOptions, cache) -> bool:
    """Render a virtual view, ask the provider for content and add the masked losses.

    Returns False when the provider failed and the view was skipped.
    """
    cam = state.camera
    n = plan.samples_per_ray
    r = render_image(field, cam, n_samples=n, jitter=rng, keep_graph=True,
                     gradient_scaling=plan.gradient_scaling)
    rays = r.rays
    pts = rays_points(cam, rays.t)
    values = composite_visibility(field, pts, rays.weights, data.cameras, opts,
                                  _surface_offset(cam, n), cache)
    vis = VisibilityMap.from_values(values.reshape(cam.height, cam.width), opts.tau, r.opacity)
    t_noise = float(rng.uniform(*plan.t_noise_range))
    req = InpaintRequest(r.image, vis.mask, t_noise, cam, mode,
                         {"denoising_steps": plan.denoising_steps, "guidance_scale": plan.guidance_scale})
    state.render, state.visibility, state.visits = r.image, vis, state.visits + 1
    try:
        resp = enhance(provider, req) if mode == KEEP else inpaint(provider, req)
    except ProviderError as exc:
        log.warning("provider failed on a virtual view, skipping it: %s", exc)
        return False
    state.provided = resp.image
    region = vis.mask if plan.supervision_region == "masked" else np.ones_like(vis.mask)
    if not region.any():
        report.add("inpaint_rgb", 0.0, w.w_inpaint)
        report.add("inpaint_depth", 0.0, w.w_depth)
        return True
    l_rgb, g_rgb = inpaint_rgb_loss(r.image, resp.image, region, t_noise, plan.noise_weight)
    d_depth = None
    l_dep = 0.0
    unknown = vis.mask | ~(r.depth > 0)
    if not unknown.all():
        if isinstance(depth_provider, OracleDepth):
            depth_provider.camera = cam
        try:
            completed = complete_depth(depth_provider, DepthCompleteRequest(resp.image, r.depth, unknown))
        except (ProviderError, NumericError) as exc:
            log.warning("depth completion failed, dropping the depth term: %s", exc)
            completed = None
        if completed is not None:
            state.depth = completed
            l_dep, g_dep = depth_loss(r.depth, completed, region, mode=plan.virtual_depth_mode)
            d_depth = w.w_depth * g_dep.reshape(-1)
    rays.backward(d_color=w.w_inpaint * g_rgb.reshape(-1, 3), d_depth=d_depth)
    report.add("inpaint_rgb", l_rgb, w.w_inpaint)
    report.add("inpaint_depth", l_dep, w.w_depth)
    return True


def rays_points(cam: Camera, t: np.ndarray) -> np.ndarray:
    o, d = image_rays(cam)
    return o[:, None, :] + t[..., None] * d[:, None, :]


def _build_cache(field, data: TrainingData, opts: VisibilityOptions, cam: Camera, n: int):
    if opts.exact:
        return None
    return TransmittanceCache.for_field(field, data.cameras, opts, _surface_offset(cam, n))


def _run_virtual_stage(stage: int, field, data: TrainingData, plan: StagePlan, provider, depth_provider,
                       cameras: list[Camera], tlog: TrainingLog | None, mode: str) -> StageResult:
    tlog = tlog if tlog is not None else TrainingLog()
    iters = plan.stage2_iters if stage == 2 else plan.stage3_iters
    if iters > 0 and not cameras:
        raise ConfigError(f"stage {stage} needs at least one virtual view")
    rng = np.random.default_rng([plan.seed, stage])
    w = plan.loss_weights(stage)
    opts = plan.visibility_options()
    n_primary = plan.visibility.get("n_primary", plan.samples_per_ray)
    lr = plan.stage_lr(stage)
    adam = Adam(field.params)
    states = [VirtualViewState(c) for c in cameras]
    meta = {"mask_area_before": mean_mask_area(field, data, cameras, opts, n_primary) if iters else None,
            "original_view_loss_before": original_view_loss(field, data, plan.eval_samples) if iters else None}
    skipped_total = 0
    cache = None
    for it in range(iters):
        if it % max(plan.visibility_refresh, 1) == 0:
            cache = _build_cache(field, data, opts, cameras[0], plan.samples_per_ray)
        report = LossReport(it)
        state = states[int(rng.integers(len(states)))]
        try:
            ok = _virtual_step(field, state, data, plan, rng, w, report, provider, depth_provider, mode,
                               opts, cache)
            _original_view_step(field, data, rng, plan, w, report, plan.rays_per_batch)
        except DomainError as exc:
            raise NumericError(f"stage {stage} iteration {it}: {exc}") from exc
        skipped_total += 0 if ok else 1
        _hash_decay_step(field, w, report)
        _finish_step(adam, lr, report, stage, tlog, 0 if ok else 1)
    meta["skipped_views"] = skipped_total
    meta["iterations"] = iters
    meta["original_view_loss"] = original_view_loss(field, data, plan.eval_samples)
    if iters:
        meta["mask_area_after"] = mean_mask_area(field, data, cameras, opts, n_primary)
        before = meta["original_view_loss_before"]
        meta["regression"] = meta["original_view_loss"] / before if before > 0 else float("inf")
        meta["regressed"] = bool(meta["regression"] > plan.regression_factor)
        if meta["regressed"]:
            log.warning("stage %d raised the original-view loss %.2fx (limit %.2fx)", stage,
                        meta["regression"], plan.regression_factor)
    if iters and skipped_total == iters:
        raise ProviderError(f"stage {stage}: the provider failed on every virtual view")
    return StageResult(field, tlog, meta)


def run_stage2(field, data: TrainingData, plan: StagePlan, inpaint_provider, depth_provider,
               cameras: list[Camera], tlog: TrainingLog | None = None) -> StageResult:
    """Inpaint unobserved regions of virtual views while keeping the input views fitted."""
    return _run_virtual_stage(2, field, data, plan, inpaint_provider, depth_provider, cameras, tlog, "erase-masked")


def run_stage3(field, data: TrainingData, plan: StagePlan, enhance_provider, depth_provider,
               cameras: list[Camera], tlog: TrainingLog | None = None) -> StageResult:
    """Same loop as stage 2, with the enhancer seeing (and rewriting) the whole render."""
    return _run_virtual_stage(3, field, data, plan, enhance_provider, depth_provider, cameras, tlog, KEEP)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def original_view_loss(field, data: TrainingData, n_samples: int = 192) -> float:
    """Mean photometric loss over every pixel of every input view (no jitter)."""
    total, count = 0.0, 0
    for cam, img in zip(data.cameras, data.images):
        r = render_image(field, cam, n_samples=n_samples)
        loss, _ = rgb_loss(r.image, img)
        total += loss * cam.height * cam.width
        count += cam.height * cam.width
    return total / count


def mean_mask_area(field, data: TrainingData, cameras, opts: VisibilityOptions, n_primary: int) -> float:
    if not cameras:
        return 0.0
    cache = _build_cache(field, data, opts, cameras[0], n_primary)
    areas = [render_visibility_map(field, c, data.cameras, opts, n_primary, cache).mask_fraction for c in cameras]
    return float(np.mean(areas))


# ---------------------------------------------------------------------------
# Whole pipeline
# ---------------------------------------------------------------------------


def run_pipeline(scene, plan: StagePlan, stages=(1, 2, 3), field: HashGridField | None = None,
                 providers: dict | None = None, tlog: TrainingLog | None = None) -> StageResult:
    """Run the requested stages on a loaded :class:`~visnerf.io.Scene`."""
    from .plugins import make_depth_provider, make_provider

    data = TrainingData.from_scene(scene)
    field = field if field is not None else make_field(plan, scene.meta)
    tlog = tlog if tlog is not None else TrainingLog()
    providers = dict(providers or {})
    meta: dict = {"stages": {}}
    cams = []
    if any(s in stages for s in (2, 3)):
        cams = virtual_cameras(plan, scene.meta, data.cameras[0])
        if "depth" not in providers:
            providers["depth"] = make_depth_provider(plan.providers.get("depth", "guided-harmonic"),
                                                     scene.voxel_field)
    if 1 in stages:
        meta["stages"][1] = run_stage1(field, data, plan, tlog).meta
    if 2 in stages:
        if "inpaint" not in providers:
            providers["inpaint"] = make_provider(plan.providers.get("inpaint", "oracle"), scene.voxel_field)
        meta["stages"][2] = run_stage2(field, data, plan, providers["inpaint"], providers["depth"], cams, tlog).meta
    if 3 in stages:
        if "enhance" not in providers:
            providers["enhance"] = make_provider(plan.providers.get("enhance", "oracle"), scene.voxel_field)
        meta["stages"][3] = run_stage3(field, data, plan, providers["enhance"], providers["depth"], cams, tlog).meta
    return StageResult(field, tlog, meta)


# ---------------------------------------------------------------------------
# Enhancer training data
# ---------------------------------------------------------------------------


def corruption_loop(field, data: TrainingData, provider, plan: StagePlan, checkpoints, out_dir=None) -> list[dict]:
    """Fine-tune a copy of ``field`` on the input views with supervision inside each
    view's pseudo-disocclusion mask taken from ``provider`` instead of the image, and
    snapshot renders of every input view at the iterations in ``checkpoints``.

    Returns a list of ``{"iteration", "view", "render", "target", "mask"}`` records;
    with ``out_dir`` they are also written as PNGs plus ``index.json``.
    """
    checkpoints = sorted({int(c) for c in checkpoints})
    if not checkpoints:
        return []
    if len(data.cameras) < 2:
        raise ConfigError("corruption data needs at least two input views")
    f = field.copy()
    opts = plan.visibility_options()
    n_primary = plan.visibility.get("n_primary", plan.samples_per_ray)
    masks = [pseudo_disocclusion_mask(f, j, data.cameras, opts, n_primary) for j in range(len(data.cameras))]
    rng = np.random.default_rng([plan.seed, 4])
    w = plan.loss_weights(2)
    adam = Adam(f.params)
    records: list[dict] = []

    def snapshot(it):
        for j, cam in enumerate(data.cameras):
            r = render_image(f, cam, n_samples=plan.eval_samples)
            records.append({"iteration": it, "view": j, "render": r.image, "target": data.images[j],
                            "mask": masks[j].mask.copy()})

    if checkpoints[0] == 0:
        snapshot(0)
    for it in range(1, checkpoints[-1] + 1):
        j = int(rng.integers(len(data.cameras)))
        cam = data.cameras[j]
        report = LossReport(it)
        r = render_image(f, cam, n_samples=plan.samples_per_ray, jitter=rng, keep_graph=True)
        mask = masks[j].mask
        t_noise = float(rng.uniform(*plan.t_noise_range))
        try:
            provided = inpaint(provider, InpaintRequest(r.image, mask, t_noise, cam)).image
        except ProviderError as exc:
            log.warning("provider failed on view %d: %s", j, exc)
            provided = r.image
        l_obs, g_obs = rgb_loss(r.image, data.images[j], ~mask)
        l_inp, g_inp = inpaint_rgb_loss(r.image, provided, mask, t_noise, plan.noise_weight)
        l_dep, g_dep = depth_loss(r.depth, data.depths[j], ~mask)
        r.rays.backward(d_color=(w.w_rgb * g_obs + w.w_inpaint * g_inp).reshape(-1, 3),
                        d_depth=w.w_depth * g_dep.reshape(-1))
        report.add("rgb", l_obs, w.w_rgb)
        report.add("inpaint_rgb", l_inp, w.w_inpaint)
        report.add("depth", l_dep, w.w_depth)
        _hash_decay_step(f, w, report)
        if not np.isfinite(report.total):
            raise NumericError(f"corruption loop iteration {it}: non-finite loss")
        adam.step(plan.stage_lr(2))
        if it in checkpoints:
            snapshot(it)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        index = []
        for rec in records:
            stem = f"it{rec['iteration']:05d}_view{rec['view']:02d}"
            write_png(out / f"{stem}_render.png", rec["render"])
            write_png(out / f"{stem}_target.png", rec["target"])
            write_mask_png(out / f"{stem}_mask.png", rec["mask"])
            index.append({"iteration": rec["iteration"], "view": rec["view"], "render": f"{stem}_render.png",
                          "target": f"{stem}_target.png", "mask": f"{stem}_mask.png"})
        (out / "index.json").write_text(json.dumps({"seed": plan.seed, "triples": index}, indent=2))
    return records
