"""Sphoxel prism approximation and ray/sphoxel intersection.

A sphoxel is replaced by the convex frustum spanned by its eight corner
vertices. Corner ``i`` is ``(r, theta, phi)`` with ``r = (r_min, r_max)[i >> 2]``,
``theta = (theta_min, theta_max)[(i >> 1) & 1]``, ``phi = (phi_min, phi_max)[i & 1]``.
On a pole the two corners sharing ``r`` collapse onto the axis, turning the
frustum into a triangle-based one (6 vertices, 8 faces). The fixed 12-triangle
table below handles both shapes: triangles touching a collapsed edge come out
degenerate and are rejected by the determinant test.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .geom import (
    Ray,
    SphoxelBounds,
    _cos_theta,
    _mt_accept,
    _sin_theta,
    dot,
    moller_trumbore,
)

# Each quad is split along the diagonal joining its lowest and highest corner
# index, so two cells sharing a face tessellate it identically. Winding is
# counter-clockwise seen from outside.
FACE_TRIANGLES = np.array(
    [
        [0, 3, 2], [0, 1, 3],  # r_min
        [4, 6, 7], [4, 7, 5],  # r_max
        [0, 5, 1], [0, 4, 5],  # theta_min
        [2, 3, 7], [2, 7, 6],  # theta_max
        [0, 6, 4], [0, 2, 6],  # phi_min
        [1, 5, 7], [1, 7, 3],  # phi_max
    ],
    dtype=np.int64,
)

# Spans above this are cut into segments before the frustum approximation.
MAX_SEGMENT_SPAN = 0.5 * math.pi
_CHUNK = 16384


@dataclass
class SphoxelPrism:
    vertices: np.ndarray  # (6 or 8, 3)
    faces: np.ndarray  # (8 or 12, 3) indices into vertices

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def edges(self) -> list[tuple[int, int]]:
        """Distinct undirected triangle edges, sorted."""
        es = set()
        for a, b, c in self.faces:
            for i, j in ((a, b), (b, c), (c, a)):
                es.add((min(i, j), max(i, j)))
        return sorted(es)


class SphoxelMetrics(NamedTuple):
    center: np.ndarray
    radius: float


class Interval(NamedTuple):
    t_entry: float
    t_exit: float


def _as_bounds_array(bounds) -> np.ndarray:
    if isinstance(bounds, SphoxelBounds):
        return bounds.as_array()
    return np.asarray(bounds, dtype=np.float64)


def corner_vertices(bounds) -> np.ndarray:
    """``(..., 6)`` bounds to ``(..., 8, 3)`` Cartesian corners."""
    b = np.asarray(bounds, dtype=np.float64)
    r = b[..., [0, 0, 0, 0, 1, 1, 1, 1]]
    th = b[..., [2, 2, 3, 3, 2, 2, 3, 3]]
    ph = b[..., [4, 5, 4, 5, 4, 5, 4, 5]]
    st = _sin_theta(th)
    return np.stack([r * st * np.cos(ph), r * st * np.sin(ph), r * _cos_theta(th)], axis=-1)


def _distinct_mask(bounds) -> np.ndarray:
    """``(..., 8)`` mask keeping one representative of each collapsed corner pair."""
    b = np.asarray(bounds, dtype=np.float64)
    keep = np.ones(b.shape[:-1] + (8,), dtype=bool)
    top = b[..., 2] == 0.0
    bot = b[..., 3] == math.pi
    keep[..., 1] &= ~top
    keep[..., 5] &= ~top
    keep[..., 3] &= ~bot
    keep[..., 7] &= ~bot
    return keep


def prism_of(bounds) -> SphoxelPrism:
    b = _as_bounds_array(bounds)
    verts = corner_vertices(b)
    keep = _distinct_mask(b)
    remap = np.cumsum(keep) - 1
    # collapsed corners point at their kept twin (index - 1)
    for i in range(8):
        if not keep[i]:
            remap[i] = remap[i - 1]
    faces = remap[FACE_TRIANGLES]
    nondegen = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return SphoxelPrism(verts[keep], faces[nondegen])


def metrics_array(bounds) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`metrics_of`: ``(centers (..., 3), radii (...))``."""
    b = np.asarray(bounds, dtype=np.float64)
    verts = corner_vertices(b)
    keep = _distinct_mask(b)
    w = keep.astype(np.float64)
    center = (verts * w[..., None]).sum(axis=-2) / w.sum(axis=-1)[..., None]
    dist = np.linalg.norm(verts - center[..., None, :], axis=-1)
    return center, dist.max(axis=-1)


def metrics_of(bounds) -> SphoxelMetrics:
    """Center (mean of the distinct prism vertices) and circumscribing radius."""
    c, r = metrics_array(_as_bounds_array(bounds))
    return SphoxelMetrics(c, float(r))


def cell_bounding_balls(bounds) -> tuple[np.ndarray, np.ndarray]:
    """Balls containing the *exact* spherical cell.

    Every descendant prism is the convex hull of points of the exact cell, so a
    ray missing this ball misses the node's prism and all prisms below it.
    """
    b = np.asarray(bounds, dtype=np.float64)
    a, rb = b[..., 0], b[..., 1]
    tc = 0.5 * (b[..., 2] + b[..., 3])
    pc = 0.5 * (b[..., 4] + b[..., 5])
    u0 = np.stack([np.sin(tc) * np.cos(pc), np.sin(tc) * np.sin(pc), np.cos(tc)], axis=-1)
    # Angular distance from the patch centre is maximal at a corner when both
    # spans are <= pi; otherwise fall back to the full sphere.
    corners = corner_vertices(np.concatenate([np.zeros_like(b[..., :1]), np.ones_like(b[..., :1]), b[..., 2:]], axis=-1))[..., 4:, :]
    cosg = np.einsum("...ki,...i->...k", corners, u0).min(axis=-1)
    wide = ((b[..., 5] - b[..., 4]) > math.pi) | ((b[..., 3] - b[..., 2]) > math.pi)
    cosg = np.where(wide, -1.0, np.clip(cosg, -1.0, 1.0))

    def reach(s):
        fa = a * a + s * s - 2.0 * a * s * cosg
        fb = rb * rb + s * s - 2.0 * rb * s * cosg
        return np.sqrt(np.maximum(np.maximum(fa, fb), 0.0))

    pos = np.maximum(cosg, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = np.where(pos > 0.0, (a + rb) / (2.0 * pos), 0.0)
    best_s = np.zeros_like(a)
    best_r = reach(best_s)
    for cand in (a * pos, rb * pos, np.clip(cross, 0.0, rb)):
        rr = reach(cand)
        better = rr < best_r
        best_s = np.where(better, cand, best_s)
        best_r = np.minimum(rr, best_r)
    # relative slack keeps the test conservative under rounding
    return u0 * best_s[..., None], best_r * (1.0 + 1e-9) + 1e-12


def ray_hits_ball(origins, dirs, centers, radii) -> np.ndarray:
    """Forward half-line vs ball overlap (origin inside counts)."""
    oc = centers - origins
    tca = np.maximum(dot(oc, dirs), 0.0)
    closest = oc - tca[..., None] * dirs
    return dot(closest, closest) <= radii * radii


def _segment(bounds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cut cells whose theta or phi span exceeds a quarter turn into equal segments."""
    nt = np.maximum(np.ceil((bounds[:, 3] - bounds[:, 2]) / MAX_SEGMENT_SPAN - 1e-9), 1).astype(np.int64)
    nph = np.maximum(np.ceil((bounds[:, 5] - bounds[:, 4]) / MAX_SEGMENT_SPAN - 1e-9), 1).astype(np.int64)
    if np.all((nt == 1) & (nph == 1)):
        return bounds, np.arange(len(bounds))
    segs, owner = [], []
    for i, (b, kt, kp) in enumerate(zip(bounds, nt, nph)):
        if kt == 1 and kp == 1:
            segs.append(b)
            owner.append(i)
            continue
        te = np.linspace(b[2], b[3], kt + 1)
        pe = np.linspace(b[4], b[5], kp + 1)
        te[-1], pe[-1] = b[3], b[5]
        for j in range(kt):
            for k in range(kp):
                segs.append([b[0], b[1], te[j], te[j + 1], pe[k], pe[k + 1]])
                owner.append(i)
    return np.asarray(segs, dtype=np.float64), np.asarray(owner, dtype=np.int64)


def intersect_pairs(origins, dirs, bounds, balls=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray/sphoxel test over aligned arrays of pairs.

    Returns ``(hit, t_entry, t_exit)``; entries of non-hits are NaN.
    ``balls`` optionally supplies precomputed :func:`cell_bounding_balls`
    for the early rejection.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 6)
    n = len(bounds)
    hit = np.zeros(n, dtype=bool)
    t0 = np.full(n, np.nan)
    t1 = np.full(n, np.nan)
    if n == 0:
        return hit, t0, t1
    c, rad = cell_bounding_balls(bounds) if balls is None else balls
    cand = np.flatnonzero(ray_hits_ball(origins, dirs, c, rad))
    for s in range(0, len(cand), _CHUNK):
        idx = cand[s : s + _CHUNK]
        h, a, b = _prism_kernel(origins[idx], dirs[idx], bounds[idx])
        hit[idx], t0[idx], t1[idx] = h, a, b
    return hit, t0, t1


def _prism_kernel(origins, dirs, bounds):
    segs, owner = _segment(bounds)
    o = origins[owner][:, None, :]
    d = dirs[owner][:, None, :]
    tri = corner_vertices(segs)[:, FACE_TRIANGLES]  # (S, 12, 3, 3)
    t, u, v, det = moller_trumbore(o, d, tri[:, :, 0], tri[:, :, 1], tri[:, :, 2])
    ok = _mt_accept(u, v, det)
    fwd = ok & (t >= 0.0)
    bwd = ok & (t < 0.0)
    n = len(bounds)
    inside = np.zeros(n, dtype=bool)
    np.logical_or.at(inside, owner, fwd.any(axis=1) & bwd.any(axis=1))
    fmin = np.full(n, np.inf)
    fmax = np.full(n, -np.inf)
    np.minimum.at(fmin, owner, np.where(fwd, t, np.inf).min(axis=1))
    np.maximum.at(fmax, owner, np.where(fwd, t, -np.inf).max(axis=1))
    entry = np.where(inside, 0.0, fmin)
    hit = np.isfinite(fmax) & (fmax > entry)
    return hit, np.where(hit, entry, np.nan), np.where(hit, fmax, np.nan)


def ray_sphoxel_intersect(ray: Ray, bounds) -> Optional[Interval]:
    """Entry/exit distances of ``ray`` through the sphoxel's prism, or ``None``.

    Two or more face hits give ``(min, max)``; a ray starting inside the prism
    enters at 0.
    """
    h, a, b = intersect_pairs(ray.origin, ray.direction, _as_bounds_array(bounds))
    if not h[0]:
        return None
    return Interval(float(a[0]), float(b[0]))


def point_in_prism(points, bounds, eps=1e-12) -> np.ndarray:
    """Half-space membership against the outward face planes of the (convex) prism."""
    prism = prism_of(bounds)
    tri = prism.triangles()
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    side = np.einsum("fi,pfi->pf", n, p[:, None, :] - tri[None, :, 0])
    return np.all(side <= eps, axis=1)


def batch_intersect(rays, tree, membership_filter="leaf"):
    """Per-ray sorted ``(node_id, t_entry, t_exit)`` lists over a whole batch.

    Semantically a map of :func:`sphoxel.binoctree.bfs_intersect`; the
    traversal advances all rays level by level in one vectorised sweep.
    """
    from .binoctree import traverse

    rays = list(rays)
    if not rays:
        return []
    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])
    return traverse(tree, origins, dirs, membership_filter)
