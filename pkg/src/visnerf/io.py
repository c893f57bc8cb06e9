"""File formats: PFM, 8-bit sRGB PNG, voxel fields (VXF1), checkpoints (ENRF),
scene descriptions (JSON) and CSV training logs."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DomainError
from .field import HashGridConfig, HashGridField, VoxelField
from .geometry import Camera, Intrinsics, Pose, camera_set_hash

__all__ = [
    "write_pfm", "read_pfm",
    "srgb_encode", "srgb_decode", "write_png", "read_png", "write_mask_png", "read_mask_png",
    "write_voxel_field", "read_voxel_field", "voxel_field_to_bytes", "voxel_field_from_bytes",
    "save_checkpoint", "load_checkpoint", "Checkpoint",
    "Scene", "load_scene", "save_scene",
    "TrainingLog", "camera_set_hash", "write_json",
]

# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, data) -> None:
    """Little-endian PFM; ``(H, W)`` arrays become ``Pf``, ``(H, W, 3)`` become ``PF``."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 2:
        header = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF"
    else:
        raise DomainError(f"PFM needs (H, W) or (H, W, 3) data, got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise DomainError(f"{path}: not a PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if header == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * ch)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# PNG (8-bit sRGB)
# ---------------------------------------------------------------------------


def srgb_encode(linear) -> np.ndarray:
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded) -> np.ndarray:
    x = np.asarray(encoded, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def write_png(path, linear_rgb) -> None:
    """Linear RGB in [0, 1] -> 8-bit sRGB PNG."""
    q = np.round(srgb_encode(linear_rgb) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB" if q.ndim == 3 else "L").save(path)


def read_png(path) -> np.ndarray:
    """8-bit sRGB PNG -> linear RGB float64 in [0, 1]."""
    q = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return srgb_decode(q / 255.0)


def write_mask_png(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) >= 128


# ---------------------------------------------------------------------------
# Voxel fields
# ---------------------------------------------------------------------------

_VXF_HEADER = struct.Struct("<4s3I6d")


def voxel_field_to_bytes(vf: VoxelField) -> bytes:
    nx, ny, nz = vf.resolution
    head = _VXF_HEADER.pack(b"VXF1", nx, ny, nz, *vf.bounds[0], *vf.bounds[1])
    return (head + vf.sigma_grid.astype("<f4").tobytes()
            + vf.color_grid.astype("<f4").tobytes())


def voxel_field_from_bytes(buf: bytes, interpolation: str = "trilinear") -> VoxelField:
    magic, nx, ny, nz, *b = _VXF_HEADER.unpack_from(buf, 0)
    if magic != b"VXF1":
        raise DomainError("not a VXF1 voxel field")
    n = nx * ny * nz
    off = _VXF_HEADER.size
    sigma = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(nx, ny, nz)
    color = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off + 4 * n).reshape(nx, ny, nz, 3)
    bounds = np.array(b, dtype=np.float64).reshape(2, 3)
    return VoxelField(sigma.astype(np.float64), color.astype(np.float64), bounds, interpolation)


def write_voxel_field(path, vf: VoxelField) -> None:
    Path(path).write_bytes(voxel_field_to_bytes(vf))


def read_voxel_field(path, interpolation: str = "trilinear") -> VoxelField:
    return voxel_field_from_bytes(Path(path).read_bytes(), interpolation)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    field: HashGridField
    meta: dict = dc_field(default_factory=dict)


def save_checkpoint(path, field: HashGridField, meta: dict | None = None) -> None:
    """``ENRF`` | u32 version | u64 json length | json | u64 count | float32 parameters."""
    blob = {
        "field": field.config.to_dict(),
        "segments": [[k, off, list(shape)] for k, (off, shape) in field.params.segments.items()],
        "meta": meta or {},
    }
    js = json.dumps(blob, sort_keys=True).encode()
    data = field.params.data.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(b"ENRF" + struct.pack("<IQ", CHECKPOINT_VERSION, len(js)) + js)
        fh.write(struct.pack("<Q", data.size) + data.tobytes())


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != b"ENRF":
        raise ConfigError(f"{path}: not a checkpoint")
    version, n = struct.unpack_from("<IQ", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    blob = json.loads(buf[off:off + n])
    off += n
    (count,) = struct.unpack_from("<Q", buf, off)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off + 8)
    config = HashGridConfig(**blob["field"])
    field = HashGridField(config)
    if len(field.params) != count:
        raise ConfigError(f"{path}: parameter count {count} does not match its configuration")
    field.params.data[:] = data
    return Checkpoint(field, blob.get("meta", {}))


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    """Posed images with depth maps, grouped by split (train / interp / extrap)."""

    cameras: dict
    images: dict
    depths: dict
    voxel_field: VoxelField | None = None
    meta: dict = dc_field(default_factory=dict)
    root: Path | None = None

    def split(self, name: str):
        if name not in self.cameras:
            raise ConfigError(f"scene has no split {name!r}")
        return self.cameras[name], self.images[name], self.depths[name]

    @property
    def train_cameras(self) -> list[Camera]:
        return self.cameras["train"]


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        intr = Intrinsics.from_dict(doc["intrinsics"])
        near, far = float(doc["near"]), float(doc["far"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot read scene file {path}: {exc}") from exc
    root = path.parent
    cams, imgs, deps = {}, {}, {}
    for fr in doc["frames"]:
        split = fr.get("split", "train")
        try:
            pose = Pose.from_matrix(fr["transform"])
        except DomainError as exc:
            raise ConfigError(f"bad pose in {path}: {exc}") from exc
        for key in ("image", "depth"):
            if fr.get(key) and not (root / fr[key]).exists():
                raise ConfigError(f"{path}: missing {key} file {fr[key]}")
        cams.setdefault(split, []).append(Camera(intr, pose, near, far))
        imgs.setdefault(split, []).append(read_png(root / fr["image"]) if fr.get("image") else None)
        deps.setdefault(split, []).append(read_pfm(root / fr["depth"]).astype(np.float64) if fr.get("depth") else None)
    vf = None
    if doc.get("voxel_field"):
        vf = read_voxel_field(root / doc["voxel_field"], doc.get("voxel_interpolation", "trilinear"))
    meta = {k: v for k, v in doc.items() if k not in ("frames",)}
    return Scene(cams, imgs, deps, vf, meta, root)


def save_scene(path, doc: dict) -> None:
    write_json(path, doc)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")



# ---------------------------------------------------------------------------
# Training log
# ---------------------------------------------------------------------------


class TrainingLog:
    """Collects ``LossReport`` rows and writes them as CSV."""

    columns = ["stage", "iteration", "lr", "rgb", "depth", "distortion", "hash_decay",
               "inpaint_rgb", "inpaint_depth", "total", "skipped"]

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, stage: int, report, lr: float, skipped: int = 0):
        row = {c: 0.0 for c in self.columns}
        row.update(report.terms)
        row.update(stage=stage, iteration=report.iteration, lr=lr, total=report.total, skipped=skipped)
        self.rows.append(row)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def last(self, stage: int) -> dict | None:
        rows = [r for r in self.rows if r["stage"] == stage]
        return rows[-1] if rows else None
