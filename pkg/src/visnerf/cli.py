"""Command-line entry point: ``visnerf {make-scene,train,render,visibility,eval}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 provider failure.
``VISNERF_THREADS`` caps the BLAS / OpenMP thread pools (use 1 for bit-reproducible runs).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ProviderError

log = logging.getLogger("visnerf")

THREADS_ENV = "VISNERF_THREADS"


def _limit_threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    try:
        n = int(n)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _camera_from_pose_file(path, scene):
    from .geometry import Camera, Intrinsics, Pose

    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read pose file {path}: {exc}") from exc
    ref = scene.train_cameras[0] if scene is not None else None
    try:
        pose = Pose.from_matrix(doc["transform"])
        intr = Intrinsics.from_dict(doc["intrinsics"]) if "intrinsics" in doc else ref.intrinsics
        near = float(doc.get("near", ref.near if ref else 0))
        far = float(doc.get("far", ref.far if ref else 0))
        return Camera(intr, pose, near, far)
    except (KeyError, AttributeError, DomainError) as exc:
        raise ConfigError(f"bad pose file {path}: {exc}") from exc


def _load_scene(path):
    from .io import load_scene

    return load_scene(path) if path else None


def _pick_camera(args, scene):
    if args.pose:
        return _camera_from_pose_file(args.pose, scene)
    if scene is None:
        raise ConfigError("need --scene to select a camera by index")
    cams = scene.split(args.split)[0]
    if not 0 <= args.camera_index < len(cams):
        raise ConfigError(f"camera index {args.camera_index} out of range for split {args.split}")
    return cams[args.camera_index]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_make_scene(args) -> int:
    from .scenes import make_scene, write_scene

    scene = make_scene(args.kind, resolution=args.resolution, n_cameras=args.cameras, seed=args.seed,
                       image_size=args.image_size)
    path = write_scene(scene, args.out_dir, n_samples=args.samples)
    frac = scene.meta.get("occluded_fraction_extrap")
    print(f"wrote {path}" + (f" (occluded fraction on extrapolated views: {frac:.3f})" if frac is not None else ""))
    return 0


def _provider_bindings(plan, flag):
    if not flag:
        return plan.providers
    b = dict(plan.providers)
    if flag == "oracle":
        b["inpaint"] = {"kind": "oracle"}
        enh = dict(plan.providers.get("enhance", {}))
        b["enhance"] = {"kind": "oracle", "alpha": enh.get("alpha", 1.0)} if enh.get("kind") == "oracle" else {"kind": "oracle"}
    elif flag == "constant":
        b["inpaint"] = {"kind": "constant"}
        b["enhance"] = {"kind": "constant"}
    elif flag.startswith("subprocess:"):
        cmd = flag.split(":", 1)[1]
        b["inpaint"] = b["enhance"] = {"kind": "subprocess", "command": cmd,
                                       "denoising_steps": plan.denoising_steps,
                                       "guidance_scale": plan.guidance_scale}
    else:
        raise ConfigError(f"unknown provider {flag!r}")
    return b


def cmd_train(args) -> int:
    from .io import load_checkpoint, save_checkpoint
    from .pipeline import StagePlan, make_field, run_pipeline
    from .plugins import make_depth_provider, make_provider

    scene = _load_scene(args.scene)
    plan = StagePlan.load(args.plan)
    requested = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    done: list[int] = []
    if args.resume:
        ck = load_checkpoint(args.resume)
        field = ck.field
        done = list(ck.meta.get("stages_completed", []))
    else:
        field = make_field(plan, scene.meta)
    stages = tuple(s for s in requested if s not in done) if args.stage == "all" else requested
    bindings = _provider_bindings(plan, args.provider)
    providers = {}
    if 2 in stages:
        providers["inpaint"] = make_provider(bindings["inpaint"], scene.voxel_field)
    if 3 in stages:
        providers["enhance"] = make_provider(bindings["enhance"], scene.voxel_field)
    if 2 in stages or 3 in stages:
        providers["depth"] = make_depth_provider(bindings.get("depth", "guided-harmonic"), scene.voxel_field)
    result = run_pipeline(scene, plan, stages, field, providers)
    meta = {
        "seed": plan.seed,
        "plan": plan.to_dict(),
        "stages_completed": sorted(set(done) | set(stages)),
        "scene": str(Path(args.scene).resolve()),
        "stage_meta": {str(k): v for k, v in result.meta["stages"].items()},
    }
    save_checkpoint(args.out, result.field, meta)
    log_path = args.log or str(Path(args.out).with_suffix(".csv"))
    result.log.write(log_path)
    print(f"wrote {args.out} and {log_path}")
    return 0


def cmd_render(args) -> int:
    from .io import load_checkpoint, write_pfm, write_png
    from .render import render_image

    field = load_checkpoint(args.checkpoint).field
    scene = _load_scene(args.scene)
    cam = _pick_camera(args, scene)
    r = render_image(field, cam, n_samples=args.samples)
    write_png(args.out_color, r.image)
    if args.out_depth:
        write_pfm(args.out_depth, r.depth)
    if args.out_opacity:
        write_pfm(args.out_opacity, r.opacity)
    print(f"wrote {args.out_color}")
    return 0


def cmd_visibility(args) -> int:
    from .io import load_checkpoint, write_json, write_mask_png, write_pfm, write_png
    from .visibility import VisibilityOptions, render_visibility_map

    field = load_checkpoint(args.checkpoint).field
    scene = _load_scene(args.scene)
    if scene is None:
        raise ConfigError("visibility needs --scene for the training cameras")
    cam = _pick_camera(args, scene)
    try:
        opts = VisibilityOptions(k=args.k, tau=args.tau, n_secondary=args.secondary, exact=args.exact)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    vm = render_visibility_map(field, cam, scene.train_cameras, opts, n_primary=args.primary)
    write_pfm(args.out, vm.values.astype(np.float32))
    sidecar = dict(vm.meta, mask_fraction=vm.mask_fraction, seed=scene.meta.get("seed"))
    write_json(Path(args.out).with_suffix(".json"), sidecar)
    if args.preview:
        write_png(args.preview, np.repeat(vm.values[..., None], 3, axis=2))
    if args.mask:
        write_mask_png(args.mask, vm.mask)
    print(f"wrote {args.out} (masked fraction {vm.mask_fraction:.3f})")
    return 0


def evaluate_split(field, scene, split: str, n_samples: int = 192, opts=None, visibility_field=None):
    """Per-view bucketed metrics for one split; visibility is measured against the
    training cameras on ``visibility_field`` (the scene's ground truth when available)."""
    from .metrics import bucketed_metrics
    from .render import render_image
    from .visibility import VisibilityOptions, render_visibility_map

    opts = opts or VisibilityOptions()
    vis_field = visibility_field if visibility_field is not None else (scene.voxel_field or field)
    cams, imgs, _ = scene.split(split)
    views = []
    for cam, img in zip(cams, imgs):
        r = render_image(field, cam, n_samples=n_samples)
        vm = render_visibility_map(vis_field, cam, scene.train_cameras, opts, n_primary=n_samples)
        views.append(bucketed_metrics(r.image, img, vm).to_dict())
    summary = {"psnr": float(np.mean([v["psnr"] for v in views]))}
    ssims = [v["ssim"] for v in views if v["ssim"] is not None]
    summary["ssim"] = float(np.mean(ssims)) if ssims else None
    for b in ("observed", "unobserved"):
        entries = [v["buckets"][b] for v in views if b in v["buckets"]]
        if entries:
            # pooled over pixels so the bucket PSNR is not dominated by tiny buckets
            mse = sum(e["mse"] * e["count"] for e in entries) / sum(e["count"] for e in entries)
            summary[f"{b}_psnr"] = float(min(99.0, -10 * np.log10(max(mse, 1e-300))))
            summary[f"{b}_count"] = int(sum(e["count"] for e in entries))
    return {"split": split, "views": views, "summary": summary}


def cmd_eval(args) -> int:
    from .io import load_checkpoint, write_json

    ck = load_checkpoint(args.checkpoint)
    scene = _load_scene(args.scene)
    report = evaluate_split(ck.field, scene, args.split, args.samples)
    report["seed"] = ck.meta.get("seed")
    report["stages_completed"] = ck.meta.get("stages_completed")
    write_json(args.out, report)
    s = report["summary"]
    print(f"{args.split}: PSNR {s['psnr']:.2f} dB, SSIM {s['ssim'] if s['ssim'] is None else round(s['ssim'], 4)}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .scenes import SCENE_KINDS

    p = argparse.ArgumentParser(prog="visnerf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-scene", help="generate a synthetic voxel scene with ground-truth views")
    s.add_argument("--kind", choices=SCENE_KINDS, required=True)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--cameras", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--samples", type=int, default=512, help="samples per ray for ground-truth renders")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("train", help="run pipeline stages and write a checkpoint")
    s.add_argument("scene")
    s.add_argument("plan")
    s.add_argument("out")
    s.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    s.add_argument("--provider", help="oracle | constant | subprocess:<cmd>")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--log", help="CSV log path (default: <out>.csv)")
    s.set_defaults(func=cmd_train)

    def camera_args(s):
        s.add_argument("--scene")
        g = s.add_mutually_exclusive_group(required=True)
        g.add_argument("--camera-index", type=int)
        g.add_argument("--pose", help="JSON with a 4x4 'transform' (and optional intrinsics/near/far)")
        s.add_argument("--split", default="train")

    s = sub.add_parser("render", help="render color, depth and opacity from a checkpoint")
    s.add_argument("checkpoint")
    camera_args(s)
    s.add_argument("--out-color", required=True)
    s.add_argument("--out-depth")
    s.add_argument("--out-opacity")
    s.add_argument("--samples", type=int, default=192)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("visibility", help="visibility map of a virtual view")
    s.add_argument("checkpoint")
    camera_args(s)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--primary", type=int, default=256)
    s.add_argument("--secondary", type=int, default=128)
    s.add_argument("--exact", action="store_true", help="march every secondary ray (no lattice cache)")
    s.add_argument("--out", required=True, help="PFM output (a JSON sidecar is written next to it)")
    s.add_argument("--preview", help="PNG preview of the visibility values")
    s.add_argument("--mask", help="PNG of the unobserved-pixel mask")
    s.set_defaults(func=cmd_visibility)

    s = sub.add_parser("eval", help="PSNR/SSIM on a split, bucketed by visibility")
    s.add_argument("checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--split", choices=["train", "interp", "extrap"], default="extrap")
    s.add_argument("--samples", type=int, default=192)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except ProviderError as exc:
        print(f"provider failure: {exc}", file=sys.stderr)
        return 4
    except DomainError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
