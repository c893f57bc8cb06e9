import numpy as np
import pytest

from visnerf.field import HashGridConfig, HashGridField, VoxelField
from visnerf.geometry import Camera, Intrinsics, Pose
from visnerf.scenes import make_scene


def simple_camera(size=8, f=None, pose=None, near=1.0, far=5.0):
    f = f if f is not None else float(size)
    intr = Intrinsics(f, f, size / 2.0, size / 2.0, size, size)
    return Camera(intr, pose or Pose.identity(), near, far)


def slab_field(z0=2.9, z1=3.5, sigma=200.0, res=16, color=(0.8, 0.3, 0.1)):
    """Opaque slab filling x, y in [-2, 2] between depths z0 and z1."""
    bounds = np.array([[-2.0, -2.0, 0.0], [2.0, 2.0, 4.0]])
    zc = bounds[0, 2] + (np.arange(res) + 0.5) * 4.0 / res
    sl = (zc >= z0) & (zc <= z1)
    sig = np.zeros((res, res, res))
    sig[:, :, sl] = sigma
    col = np.zeros((res, res, res, 3))
    col[:, :, sl] = color
    return VoxelField(sig, col, bounds, "nearest")


def small_hash_field(dtype="float64", seed=0, **kw):
    cfg = dict(levels=3, base_resolution=4, per_level_scale=2.0, log2_table_size=6, hidden_width=8,
               geo_features=4, sh_degree=2, dtype=dtype, seed=seed, init_scale=0.5)
    cfg.update(kw)
    return HashGridField(HashGridConfig(**cfg))


@pytest.fixture(scope="session")
def box_scene():
    return make_scene("box-occluder")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
