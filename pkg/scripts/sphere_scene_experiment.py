"""Build and refine a sphere-room tree, printing size, sampling-range and
efficiency figures per refinement floor.

    python scripts/sphere_scene_experiment.py --floors 1e-2 3e-3 1e-3 3e-4
"""
import argparse
import math
import time

import numpy as np

from sphoxel.binoctree import BuildConfig, build_initial, normalize_scene, traverse
from sphoxel.evaluation import tree_stats
from sphoxel.geom import Ray
from sphoxel.sampling import interval_length, refine_until_stable, select_coarse
from sphoxel.sdf import hollow_sphere


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=20_000)
    ap.add_argument("--radius", type=float, default=5.0)
    ap.add_argument("--far-margin", type=float, default=2.0)
    ap.add_argument("--alpha-min", type=float, default=1e-3)
    ap.add_argument("--floors", type=float, nargs="+", default=[1e-2, 3e-3, 1e-3])
    ap.add_argument("--rays", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    v = rng.normal(size=(args.points, 3))
    pts = args.radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    a = np.linspace(0, 2 * math.pi, 16, endpoint=False)
    cams = 0.5 * np.stack([np.cos(a), np.sin(a), np.zeros_like(a)], axis=1)
    d = rng.normal(size=(args.rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.zeros_like(d)
    rays = [Ray(x, y) for x, y in zip(o, d)]

    for floor in args.floors:
        t0 = time.perf_counter()
        p, near, far, scale = normalize_scene(pts, cams, args.far_margin)
        tree = build_initial(p, BuildConfig(alpha_min=args.alpha_min), near, far)
        select_coarse(tree, 3)
        t1 = time.perf_counter()
        rounds = refine_until_stable(tree, hollow_sphere(args.radius / scale), floor)
        t2 = time.perf_counter()
        coarse = np.array([interval_length(r, tree, "coarse", h) for r, h in zip(rays, traverse(tree, o, d, "coarse"))])
        fine = np.array([interval_length(r, tree, "fine", h) for r, h in zip(rays, traverse(tree, o, d, "fine"))])
        st = tree_stats(tree)
        ok = coarse > 0
        print(
            f"floor {floor:g}: nodes {st.node_count} leaves {st.leaf_count} coarse {st.coarse_count} fine {st.fine_count} "
            f"rounds {rounds} | median fine/coarse {np.median(fine[ok] / coarse[ok]):.3f} | "
            f"cartesian/leaves {st.cartesian_equivalent / st.leaf_count:.1f} | build {t1 - t0:.2f} s refine {t2 - t1:.2f} s"
        )


if __name__ == "__main__":
    main()
