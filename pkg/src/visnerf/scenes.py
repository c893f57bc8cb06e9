"""Synthetic voxel scenes with ground-truth renders, plus a grid-traversal shadow oracle.

Scenes live in the box ``[-1.5, 1.5]^3``. Training cameras sit in a small cluster around
``(0, 0, -4)`` looking down +z; interpolation cameras sit inside that cluster and
extrapolation cameras on a wider circle around it. World "up" is -y, so the central
training camera has the identity rotation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numba as nb
import numpy as np

from .errors import ConfigError
from .field import VoxelField
from .geometry import Camera, Intrinsics, Pose, circle_trajectory, image_rays, in_frustum_points, look_at
from .render import render_image

log = logging.getLogger(__name__)

__all__ = [
    "SCENE_KINDS",
    "SyntheticScene",
    "make_voxel_scene",
    "make_scene",
    "write_scene",
    "shadow_oracle",
    "first_hit",
]

SCENE_KINDS = ("slab", "box-occluder", "two-room")
BOUNDS = np.array([[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]])
DENSITY = 100.0
CLUSTER_CENTER = np.array([0.0, 0.0, -4.0])
LOOK_TARGET = np.array([0.0, 0.0, 0.5])
WORLD_UP = np.array([0.0, -1.0, 0.0])
NEAR, FAR = 2.0, 6.5


def _centers(res: int) -> np.ndarray:
    return BOUNDS[0, 0] + (np.arange(res) + 0.5) * (BOUNDS[1, 0] - BOUNDS[0, 0]) / res


def _checker(x, y, period=0.375):
    return (np.floor(x / period) + np.floor(y / period)).astype(np.int64) % 2


def make_voxel_scene(kind: str, resolution: int = 32) -> VoxelField:
    """Binary-density scene of the given kind (nearest-voxel interpolation)."""
    if kind not in SCENE_KINDS:
        raise ConfigError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    if resolution < 8:
        raise ConfigError("scene resolution must be >= 8")
    c = _centers(resolution)
    X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
    sigma = np.zeros(X.shape)
    color = np.zeros(X.shape + (3,))

    # back wall: checkerboard with a soft horizontal gradient
    wall = Z > 1.0
    ch = _checker(X, Y)[..., None]
    shade = (0.75 + 0.25 * (X + 1.5) / 3.0)[..., None]
    wall_rgb = np.where(ch == 1, [0.85, 0.25, 0.2], [0.2, 0.4, 0.85]) * shade
    sigma[wall] = DENSITY
    color[wall] = wall_rgb[wall]

    if kind == "box-occluder":
        box = (np.abs(X) < 0.4) & (np.abs(Y) < 0.4) & (Z > -0.8) & (Z < 0.0)
        sigma[box] = DENSITY
        box_rgb = np.stack([np.full_like(X, 0.95), 0.6 + 0.3 * (Y + 0.4) / 0.8, np.full_like(X, 0.15)], axis=-1)
        color[box] = np.clip(box_rgb[box], 0, 1)
    elif kind == "two-room":
        partition = (np.abs(Z + 0.1) < 0.1) & ~((np.abs(X) < 0.45) & (np.abs(Y) < 0.6))
        sigma[partition] = DENSITY
        stripes = (np.floor((X + Y) / 0.25).astype(np.int64) % 2)[..., None]
        part_rgb = np.where(stripes == 1, [0.3, 0.8, 0.35], [0.9, 0.9, 0.85])
        color[partition] = part_rgb[partition]
    return VoxelField(sigma, np.clip(color, 0.0, 1.0), BOUNDS, interpolation="nearest")


def _intrinsics(size: int) -> Intrinsics:
    f = size * 5.0 / 2.6
    return Intrinsics(f, f, size / 2.0, size / 2.0, size, size)


def _camera(eye, intr, target=LOOK_TARGET) -> Camera:
    return Camera(intr, look_at(eye, target, WORLD_UP), NEAR, FAR)


@dataclass
class SyntheticScene:
    kind: str
    voxel_field: VoxelField
    cameras: dict
    seed: int
    trajectory: dict
    meta: dict = dc_field(default_factory=dict)


def make_scene(kind: str, resolution: int = 32, n_cameras: int = 6, seed: int = 0,
               image_size: int = 32, n_interp: int = 2, n_extrap: int = 4) -> SyntheticScene:
    """Voxel scene plus train / interp / extrap camera sets.

    Training cameras lie on a jittered ring of radius ~0.25 around the cluster center
    (a single camera sits at the center); interpolation cameras on a ring of radius 0.12;
    extrapolation cameras on a ring of radius 1.3, offset from the virtual trajectory.
    """
    if n_cameras < 1:
        raise ConfigError("need at least one training camera")
    rng = np.random.default_rng(seed)
    vf = make_voxel_scene(kind, resolution)
    intr = _intrinsics(image_size)
    train = []
    if n_cameras == 1:
        train.append(_camera(CLUSTER_CENTER, intr))
    else:
        for i in range(n_cameras):
            th = 2 * np.pi * i / n_cameras + rng.uniform(-0.2, 0.2)
            r = 0.25 * rng.uniform(0.85, 1.15)
            train.append(_camera(CLUSTER_CENTER + r * np.array([np.cos(th), np.sin(th), 0.0]), intr))
    interp = []
    for i in range(n_interp):
        th = 2 * np.pi * (i + 0.5) / max(n_interp, 1) + rng.uniform(-0.2, 0.2)
        interp.append(_camera(CLUSTER_CENTER + 0.12 * np.array([np.cos(th), np.sin(th), 0.0]), intr))
    extrap = []
    for i in range(n_extrap):
        th = 2 * np.pi * (i + 0.5) / max(n_extrap, 1)
        extrap.append(_camera(CLUSTER_CENTER + 1.3 * np.array([np.cos(th), np.sin(th), 0.0]), intr))
    center = _camera(CLUSTER_CENTER, intr).pose
    trajectory = {"center": center.matrix.tolist(), "radius": 1.5, "m": 8, "look_at": LOOK_TARGET.tolist()}
    scene = SyntheticScene(kind, vf, {"train": train, "interp": interp, "extrap": extrap}, seed, trajectory)
    if extrap and len(train) >= 2:
        fr = [_occluded_fraction(vf, cam, train) for cam in extrap]
        scene.meta["occluded_fraction_extrap"] = float(np.mean(fr))
        scene.meta["occluded_fraction_per_view"] = [float(f) for f in fr]
    return scene


def virtual_trajectory(traj: dict, intrinsics: Intrinsics, near: float, far: float) -> list[Camera]:
    poses = circle_trajectory(Pose.from_matrix(traj["center"]), traj["radius"], traj["m"], traj["look_at"])
    return [Camera(intrinsics, p, near, far) for p in poses]


def _occluded_fraction(vf, cam, train, k: int = 2) -> float:
    vis, _, hit = shadow_oracle(vf, cam, train, k=k)
    return float(np.mean(hit & ~vis))


def write_scene(scene: SyntheticScene, out_dir, n_samples: int = 512) -> Path:
    """Render ground truth for every camera and write images, depths, the voxel field and
    ``scene.json`` into ``out_dir``. Returns the scene file path."""
    from .io import save_scene, write_pfm, write_png, write_voxel_field

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    write_voxel_field(out / "scene.vxf", scene.voxel_field)
    frames = []
    intr = None
    for split, cams in scene.cameras.items():
        for i, cam in enumerate(cams):
            intr = cam.intrinsics
            r = render_image(scene.voxel_field, cam, n_samples=n_samples)
            img = f"images/{split}_{i:03d}.png"
            dep = f"depth/{split}_{i:03d}.pfm"
            write_png(out / img, r.image)
            write_pfm(out / dep, r.depth)
            frames.append({"split": split, "image": img, "depth": dep, "transform": cam.pose.matrix.tolist()})
    doc = {
        "version": 1,
        "kind": scene.kind,
        "seed": scene.seed,
        "intrinsics": intr.to_dict(),
        "near": NEAR,
        "far": FAR,
        "frames": frames,
        "voxel_field": "scene.vxf",
        "voxel_interpolation": scene.voxel_field.interpolation,
        "field_bounds": {"center": [0.0, 0.0, 0.0], "radius": float(np.sqrt(3) * 1.5)},
        "trajectory": scene.trajectory,
        "render_samples": n_samples,
        **scene.meta,
    }
    save_scene(out / "scene.json", doc)
    return out / "scene.json"


# ---------------------------------------------------------------------------
# Shadow oracle: exact voxel traversal on the occupancy grid
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _traverse(occ, bmin, cell, o, d, t0, t1):
    """Distance at which the ray first enters an occupied voxel within [t0, t1], or -1."""
    nx, ny, nz = occ.shape
    dims = (nx, ny, nz)
    tmin = t0
    tmax = t1
    for a in range(3):
        lo = bmin[a]
        hi = bmin[a] + cell[a] * dims[a]
        if abs(d[a]) < 1e-15:
            if o[a] < lo or o[a] > hi:
                return -1.0
        else:
            ta = (lo - o[a]) / d[a]
            tb = (hi - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            tmin = max(tmin, ta)
            tmax = min(tmax, tb)
    if tmin > tmax:
        return -1.0
    idx = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    tnext = np.empty(3)
    tdelta = np.empty(3)
    for a in range(3):
        p = o[a] + tmin * d[a]
        i = int(np.floor((p - bmin[a]) / cell[a]))
        idx[a] = min(max(i, 0), dims[a] - 1)
        if d[a] > 0:
            step[a] = 1
            tnext[a] = (bmin[a] + (idx[a] + 1) * cell[a] - o[a]) / d[a]
            tdelta[a] = cell[a] / d[a]
        elif d[a] < 0:
            step[a] = -1
            tnext[a] = (bmin[a] + idx[a] * cell[a] - o[a]) / d[a]
            tdelta[a] = -cell[a] / d[a]
        else:
            step[a] = 0
            tnext[a] = np.inf
            tdelta[a] = np.inf
    t = tmin
    while True:
        if occ[idx[0], idx[1], idx[2]]:
            return t
        a = 0
        if tnext[1] < tnext[a]:
            a = 1
        if tnext[2] < tnext[a]:
            a = 2
        t = tnext[a]
        if t > tmax:
            return -1.0
        idx[a] += step[a]
        if idx[a] < 0 or idx[a] >= dims[a]:
            return -1.0
        tnext[a] += tdelta[a]


def first_hit(vf: VoxelField, origins, directions, t0, t1) -> np.ndarray:
    """Entry distance into the first occupied voxel for each ray (-1 on a miss)."""
    occ = vf.occupancy()
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    t0 = np.broadcast_to(np.asarray(t0, dtype=np.float64), (len(origins),))
    t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64), (len(origins),))
    out = np.empty(len(origins))
    for i in range(len(origins)):
        out[i] = _traverse(occ, vf.bounds[0], vf.cell_size, origins[i], directions[i], t0[i], t1[i])
    return out


def shadow_oracle(vf: VoxelField, virtual_camera: Camera, train_cameras, k: int = 2,
                  aggregation: str = "kth"):
    """Exact binary visibility of each pixel's first surface on a binary voxel scene.

    Returns ``(visible, count, hit)``: ``count`` is how many training cameras have the
    surface point in frustum and unblocked; ``visible`` is ``count >= k`` (or "all
    cameras" for ``aggregation='min'``); ``hit`` marks pixels whose ray meets a surface.
    """
    H, W = virtual_camera.height, virtual_camera.width
    o, d = image_rays(virtual_camera)
    t_hit = first_hit(vf, o, d, virtual_camera.near, virtual_camera.far)
    hit = t_hit >= 0
    nudge = 1e-4 * float(vf.cell_size.min())
    surf = o + np.where(hit, t_hit, 0.0)[:, None] * d
    start = o + np.where(hit, t_hit - nudge, 0.0)[:, None] * d
    count = np.zeros(H * W, dtype=np.int64)
    for cam in train_cameras:
        seen = in_frustum_points(cam, surf) & hit
        to_cam = cam.center[None, :] - start
        dist = np.linalg.norm(to_cam, axis=1)
        dirs = to_cam / np.maximum(dist, 1e-300)[:, None]
        for i in np.flatnonzero(seen):
            if first_hit(vf, start[i], dirs[i], 0.0, dist[i])[0] >= 0:
                seen[i] = False
        count += seen
    need = len(train_cameras) if aggregation == "min" else k
    visible = hit & (count >= need)
    return visible.reshape(H, W), count.reshape(H, W), hit.reshape(H, W)
