"""``sphoxel`` command-line front end.

Exit codes: 0 on success, 1 on usage errors, 2 on data errors. Machine
readable results go to stdout as JSON; logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .binoctree import build_initial, normalize_scene, traverse
from .errors import SphoxelError
from .evaluation import depth_report, render_depth_equirect, tree_stats
from .sampling import SampleCounts, compose_batch, refine_until_stable, select_coarse
from .sdf import load_scene, scene_far_bound

log = logging.getLogger("sphoxel")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str, n: int, what: str) -> np.ndarray:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} must be {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n or not np.all(np.isfinite(vals)):
        raise UsageError(f"{what} must be {n} comma-separated finite numbers, got {text!r}")
    return np.asarray(vals)


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise UsageError("--size dimensions must be positive")
    return w, h


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_scene_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SphoxelError(f"cannot read scene {path}: {exc}") from exc


def cmd_build(args) -> int:
    cfg = fileio.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cloud = fileio.load_point_cloud(args.points)
    cams = fileio.load_cameras(args.cameras)
    pts, near_r, far_r, scale = normalize_scene(cloud.points, cams, cfg.far_margin)
    tree = build_initial(pts, cfg.build_config(), near_r, far_r)
    tree.scale_coeff = scale
    coarse = select_coarse(tree, cfg.prune_threshold)
    fileio.save_tree(tree, args.out)
    log.info("built %d nodes (%d coarse) from %d points", len(tree), len(coarse), len(cloud))
    _emit({"nodes": len(tree), "coarse": len(coarse), "points": len(cloud),
           "skipped_rows": cloud.skipped, "near_r": near_r, "far_r": far_r, "scale_coeff": scale})
    return EXIT_OK


def cmd_stats(args) -> int:
    _emit(tree_stats(fileio.load_tree(args.tree)).to_dict())
    return EXIT_OK


def cmd_trace(args) -> int:
    v = _floats(args.ray, 6, "--ray")
    if not np.linalg.norm(v[3:]) > 0:
        raise UsageError("--ray direction must be non-zero")
    tree = fileio.load_tree(args.tree)
    d = v[3:] / np.linalg.norm(v[3:])
    hits = traverse(tree, v[None, :3], d[None], args.filter)[0]
    _emit({"filter": args.filter, "intervals": [{"id": i, "t_entry": a, "t_exit": b} for i, a, b in hits]})
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = fileio.load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    try:
        counts = SampleCounts.parse(args.counts, cfg.importance_steps)
        counts.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tree = fileio.load_tree(args.tree)
    field = load_scene(args.scene)
    rays = fileio.load_rays(args.rays)
    rng = np.random.default_rng(seed)
    batches = compose_batch(rays, tree, field, counts, cfg.sharpness, rng)
    fileio.write_json(args.out, {"seed": seed, "counts": args.counts, "rays": [b.to_dict() for b in batches]})
    _emit({"rays": len(batches), "samples": int(sum(len(b.t) for b in batches))})
    return EXIT_OK


def cmd_refine(args) -> int:
    if args.rounds == "auto":
        rounds = None
    else:
        try:
            rounds = int(args.rounds)
        except ValueError:
            raise UsageError(f"--rounds must be 'auto' or an integer, got {args.rounds!r}") from None
        if rounds < 1:
            raise UsageError("--rounds must be >= 1")
    if not args.min_angle > 0:
        raise UsageError("--min-angle must be positive")
    tree = fileio.load_tree(args.tree)
    field = load_scene(args.scene)
    before = len(tree)
    done = refine_until_stable(tree, field, args.min_angle, rounds)
    fileio.save_tree(tree, args.out or args.tree)
    _emit({"rounds": done, "nodes_before": before, "nodes_after": len(tree), "fine": int(tree.in_fine.sum())})
    return EXIT_OK


def cmd_render(args) -> int:
    w, h = _size(args.size)
    center = _floats(args.center, 3, "--center")
    raw = _read_scene_json(args.scene)
    field = load_scene(args.scene)
    far = scene_far_bound(raw)
    tol = args.trace_tol if args.trace_tol is not None else 1e-5 * far
    img = render_depth_equirect(field, center, w, h, trace_tol=tol, far=far)
    fileio.write_pfm(args.out, img)
    _emit({"width": w, "height": h, "valid_pixels": int(img.mask.sum())})
    return EXIT_OK


def cmd_eval(args) -> int:
    _emit(depth_report(fileio.read_pfm(args.pred), fileio.read_pfm(args.gt)))
    return EXIT_OK


def cmd_export(args) -> int:
    tree = fileio.load_tree(args.tree)
    flt = None if args.filter == "all" else args.filter
    fileio.export_wireframe(tree, flt, args.out)
    _emit({"cells": int(tree.member_mask(flt).sum())})
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sphoxel", description="Spherical binoctree tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--seed", type=int, default=None)
        s.set_defaults(func=fn)
        return s

    s = add("build", cmd_build, "build the initial tree and coarse set from a point cloud")
    s.add_argument("--points", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)

    s = add("stats", cmd_stats, "print tree statistics")
    s.add_argument("--tree", required=True)

    s = add("trace", cmd_trace, "list sphoxels hit by one ray")
    s.add_argument("--tree", required=True)
    s.add_argument("--ray", required=True, help="ox,oy,oz,dx,dy,dz")
    s.add_argument("--filter", choices=["leaf", "coarse", "fine"], default="leaf")

    s = add("sample", cmd_sample, "compose ray samples for a CSV of rays")
    s.add_argument("--tree", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--counts", default="32,32,32,32", help="sphere,coarse,fine,importance")
    s.add_argument("--rays", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)

    s = add("refine", cmd_refine, "refine the fine set against a scene")
    s.add_argument("--tree", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--min-angle", type=float, default=1e-3)
    s.add_argument("--rounds", default="auto")
    s.add_argument("--out", default=None, help="defaults to rewriting --tree")

    s = add("render", cmd_render, "render an equirectangular depth image")
    s.add_argument("--scene", required=True)
    s.add_argument("--center", default="0,0,0")
    s.add_argument("--size", default="256x128")
    s.add_argument("--trace-tol", type=float, default=None)
    s.add_argument("--out", required=True)

    s = add("eval", cmd_eval, "inverse-depth error between two PFM images")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)

    s = add("export", cmd_export, "write an OBJ wireframe")
    s.add_argument("--tree", required=True)
    s.add_argument("--filter", choices=["leaf", "coarse", "fine", "all"], default="fine")
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"sphoxel {args.command}: {exc}\n")
        return EXIT_USAGE
    except SphoxelError as exc:
        sys.stderr.write(f"sphoxel {args.command}: error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
