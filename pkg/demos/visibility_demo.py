"""Visibility maps on the box-occluder scene, without any training.

Renders each extrapolation camera from the ground-truth voxel field, computes its
k=2 visibility map against the six training cameras and writes color, visibility and
mask PNGs. A second pass repeats the maps with k=1 for comparison.

    python demos/visibility_demo.py --out-dir /tmp/vis_demo
"""

import argparse
from pathlib import Path

import numpy as np

from visnerf.io import write_mask_png, write_png
from visnerf.render import render_image
from visnerf.scenes import make_scene
from visnerf.visibility import VisibilityOptions, render_visibility_map


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="vis_demo")
    ap.add_argument("--image-size", type=int, default=64)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    scene = make_scene("box-occluder", image_size=args.image_size)
    train = scene.cameras["train"]
    for i, cam in enumerate(scene.cameras["extrap"]):
        color = render_image(scene.voxel_field, cam, n_samples=256).image
        write_png(out / f"extrap{i}_color.png", color)
        for k in (1, 2):
            vm = render_visibility_map(scene.voxel_field, cam, train, VisibilityOptions(k=k), n_primary=128)
            write_png(out / f"extrap{i}_vis_k{k}.png", np.repeat(vm.values[..., None], 3, -1))
            write_mask_png(out / f"extrap{i}_mask_k{k}.png", vm.mask)
            print(f"extrap {i} k={k}: {vm.mask.mean():.1%} of pixels unobserved")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
