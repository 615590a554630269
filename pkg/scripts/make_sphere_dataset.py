"""Write a synthetic room dataset: points on a metric sphere, a circle of
cameras, scene JSON (metric and normalised) and a CSV of rays.

    python scripts/make_sphere_dataset.py --out data/sphere
"""
import argparse
import json
import math
from pathlib import Path

import numpy as np

from sphoxel import fileio


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--points", type=int, default=20_000)
    ap.add_argument("--radius", type=float, default=5.0)
    ap.add_argument("--cameras", type=int, default=200)
    ap.add_argument("--camera-radius", type=float, default=0.5)
    ap.add_argument("--far-margin", type=float, default=2.0)
    ap.add_argument("--rays", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    v = rng.normal(size=(args.points, 3))
    pts = args.radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    a = np.linspace(0, 2 * math.pi, args.cameras, endpoint=False)
    cams = args.camera_radius * np.stack([np.cos(a), np.sin(a), np.zeros_like(a)], axis=1)
    scale = args.far_margin * args.radius  # valid while the points enclose the cameras

    out = args.out
    fileio.write_ply_ascii(out / "points.ply", pts)
    fileio.write_cameras_csv(out / "cameras.csv", cams)
    sphere = {"type": "hollow_sphere", "radius": args.radius}
    fileio.write_json(out / "scene.json", {"far": 2 * args.radius, "primitives": [sphere]})
    fileio.write_json(out / "scene_normalised.json", {"primitives": [{**sphere, "radius": args.radius / scale}]})
    fileio.write_json(out / "config.json", {"far_margin": args.far_margin})
    d = rng.normal(size=(args.rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rows = ["ox,oy,oz,dx,dy,dz"] + [f"0,0,0,{x!r},{y!r},{z!r}" for x, y, z in d.tolist()]
    fileio.atomic_write(out / "rays.csv", ("\n".join(rows) + "\n").encode())
    print(f"wrote {out} (scale {scale:g}: normalised surface radius {args.radius / scale:g})")


if __name__ == "__main__":
    main()
