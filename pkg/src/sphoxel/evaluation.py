"""Depth rendering by sphere tracing, inverse-depth error metrics and tree statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .binoctree import Binoctree
from .errors import NoValidOverlap, SphoxelError
from .geom import cell_volume_array
from .sdf import SdfField

MAX_TRACE_STEPS = 512


@dataclass
class DepthImage:
    depth: np.ndarray  # (height, width) radial distance, 0 where invalid
    mask: np.ndarray  # (height, width) bool

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @classmethod
    def from_depth(cls, depth) -> "DepthImage":
        d = np.asarray(depth, dtype=np.float64)
        mask = np.isfinite(d) & (d > 0)
        return cls(np.where(mask, d, 0.0), mask)


def equirect_directions(width: int, height: int) -> np.ndarray:
    """Unit view directions per pixel centre, shape ``(height, width, 3)``.

    Row ``y`` maps to colatitude ``pi * (y + 0.5) / height`` and column ``x``
    to azimuth ``2 * pi * (x + 0.5) / width``.
    """
    theta = math.pi * (np.arange(height) + 0.5) / height
    phi = 2.0 * math.pi * (np.arange(width) + 0.5) / width
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    st = np.sin(th)
    return np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=-1)


def sphere_trace(field: SdfField, origins, dirs, trace_tol: float, far: float, max_steps=MAX_TRACE_STEPS):
    """March ``t += max(|d|, trace_tol)`` from 0; returns ``(t, hit)``.

    Stepping by ``|d|`` rather than ``d`` lets rays start inside solid
    matter or inside a hollow room whose sign convention is flipped.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(v)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        d = np.abs(field.eval(o[active] + t[active, None] * v[active]))
        done = d < trace_tol
        hit[active[done]] = True
        active = active[~done]
        t[active] += np.maximum(d[~done], trace_tol)
        active = active[t[active] <= far]
    return t, hit


def render_depth_equirect(
    field: SdfField, center=(0.0, 0.0, 0.0), width: int = 256, height: int = 128, trace_tol=None, far: float = 1.0
) -> DepthImage:
    """Equirectangular radial-depth image seen from ``center``; misses are invalid."""
    if width < 1 or height < 1:
        raise SphoxelError("image size must be positive")
    if trace_tol is None:
        trace_tol = 1e-5 * far
    dirs = equirect_directions(width, height).reshape(-1, 3)
    c = np.broadcast_to(np.asarray(center, dtype=np.float64), dirs.shape)
    t, hit = sphere_trace(field, c, dirs, trace_tol, far)
    depth = np.where(hit, t, 0.0).reshape(height, width)
    return DepthImage(depth, hit.reshape(height, width))


def inv_depth_errors(pred: DepthImage, gt: DepthImage) -> np.ndarray:
    if pred.depth.shape != gt.depth.shape:
        raise SphoxelError(f"image shapes differ: {pred.depth.shape} vs {gt.depth.shape}")
    joint = pred.mask & gt.mask
    if not joint.any():
        raise NoValidOverlap("no pixel is valid in both images")
    return 1.0 / pred.depth[joint] - 1.0 / gt.depth[joint]


def inv_depth_metrics(pred: DepthImage, gt: DepthImage) -> tuple[float, float]:
    """``(rmse, mae)`` of inverse depth over pixels valid in both images."""
    m = depth_report(pred, gt)
    return m["rmse"], m["mae"]


def depth_report(pred: DepthImage, gt: DepthImage) -> dict:
    """MSE, RMSE and MAE of inverse depth, each labelled."""
    e = inv_depth_errors(pred, gt)
    mse = float(np.mean(e * e))
    return {"mse": mse, "rmse": math.sqrt(mse), "mae": float(np.mean(np.abs(e)))}


@dataclass
class TreeStats:
    node_count: int
    leaf_count: int
    coarse_count: int
    fine_count: int
    min_leaf_solid_angle: float
    min_leaf_volume: float
    cartesian_equivalent: int
    max_depth: int

    def to_dict(self) -> dict:
        return asdict(self)


def _cartesian_count(far_r: float, min_volume: float) -> int:
    ratio = (4.0 * math.pi / 3.0) * far_r**3 / min_volume
    # absorb last-ulp noise so a ball-filling leaf counts as exactly 1
    return int(math.ceil(ratio * (1.0 - 1e-12)))


def cartesian_equivalent_count(tree: Binoctree) -> int:
    """Cubes with the smallest leaf's volume needed to fill the far-radius ball."""
    vol = cell_volume_array(tree.bounds[tree.is_leaf])
    if vol.size == 0:
        raise SphoxelError("tree has no leaves")
    return _cartesian_count(tree.far_r, float(vol.min()))


def tree_stats(tree: Binoctree) -> TreeStats:
    leaf = tree.is_leaf
    b = tree.bounds[leaf]
    vol = cell_volume_array(b)
    sa = tree.solid_angles()[leaf]
    return TreeStats(
        node_count=len(tree),
        leaf_count=int(leaf.sum()),
        coarse_count=int(tree.in_coarse.sum()),
        fine_count=int(tree.in_fine.sum()),
        min_leaf_solid_angle=float(sa.min()),
        min_leaf_volume=float(vol.min()),
        cartesian_equivalent=_cartesian_count(tree.far_r, float(vol.min())),
        max_depth=int(tree.depth.max()),
    )
