"""Spherical binoctree.

Nodes live in flat numpy arrays indexed by node id. Children of a node are
allocated contiguously, so ``child_start``/``child_count`` fully describe the
topology. Child ``k`` of a node with 8 children is ``(radial, polar, azimuth)
= (k >> 2, (k >> 1) & 1, k & 1)``; with 4 children the radial bit is absent.

Containment is half-open, ``[min, max)``, in every coordinate except at the
outer boundaries: ``r == far_r`` and ``theta == pi`` belong to the last cell.
``phi`` is canonical in ``[0, 2*pi)`` and never reaches the closing edge.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import (
    DegenerateScene,
    EmptyCameraSet,
    InvalidConfig,
    NotALeaf,
    SphoxelError,
)
from .geom import (
    TWO_PI,
    Ray,
    SphoxelBounds,
    cart_to_sph_array,
    solid_angle_array,
)
from .intersect import cell_bounding_balls, intersect_pairs, ray_hits_ball

FLAG_POLAR = 1
FLAG_COARSE = 2
FLAG_FINE = 4

FILTERS = (None, "leaf", "coarse", "fine")

# Normalised near-sphere floor for zero-baseline capture.
NEAR_FLOOR = 1e-3

FORMAT_VERSION = 1
_MAGIC = b"SPHX"
_HEADER = struct.Struct("<4sIddddIIQQ")
NODE_DTYPE = np.dtype(
    [
        ("id", "<i8"),
        ("parent", "<i8"),
        ("n_children", "u1"),
        ("children", "<i8", (8,)),
        ("bounds", "<f8", (6,)),
        ("depth", "<u2"),
        ("point_count", "<i8"),
        ("flags", "u1"),
    ]
)


@dataclass
class BuildConfig:
    alpha_min: float = 1e-3
    elongation_ratio: float = 1.0
    root_theta_divs: int = 2
    root_phi_divs: int = 4
    max_depth: int = 24

    def validate(self):
        if not (self.alpha_min > 0 and math.isfinite(self.alpha_min)):
            raise InvalidConfig(f"alpha_min must be positive, got {self.alpha_min}")
        if not (self.elongation_ratio > 0 and math.isfinite(self.elongation_ratio)):
            raise InvalidConfig(f"elongation_ratio must be positive, got {self.elongation_ratio}")
        if self.root_theta_divs < 1 or self.root_phi_divs < 1:
            raise InvalidConfig("root tiling needs at least one cell per axis")
        if self.max_depth < 0:
            raise InvalidConfig("max_depth must be non-negative")
        return self


@dataclass
class BinoctreeNode:
    id: int
    bounds: SphoxelBounds
    parent: Optional[int]
    children: list[int]
    depth: int
    point_count: int
    in_coarse: bool
    in_fine: bool

    @property
    def is_leaf(self) -> bool:
        return not self.children


class Binoctree:
    """Array-backed node store for one spherical shell ``[near_r, far_r]``."""

    def __init__(
        self,
        near_r: float,
        far_r: float,
        scale_coeff: float = 1.0,
        elongation_ratio: float = 1.0,
        root_theta_divs: int = 2,
        root_phi_divs: int = 4,
        _empty: bool = False,
    ):
        if not (0.0 <= near_r < far_r):
            raise InvalidConfig(f"need 0 <= near_r < far_r, got {near_r}, {far_r}")
        self.near_r = float(near_r)
        self.far_r = float(far_r)
        self.scale_coeff = float(scale_coeff)
        self.elongation_ratio = float(elongation_ratio)
        self.root_theta_divs = int(root_theta_divs)
        self.root_phi_divs = int(root_phi_divs)
        self._n = 0
        self._alloc(64)
        self._ball_c = np.zeros((0, 3))
        self._ball_r = np.zeros(0)
        self.points = np.zeros((0, 3))  # spherical (r, theta, phi)
        self.point_leaf = np.zeros(0, dtype=np.int64)
        if _empty:
            return
        te = np.linspace(0.0, math.pi, self.root_theta_divs + 1)
        pe = np.linspace(0.0, TWO_PI, self.root_phi_divs + 1)
        te[-1], pe[-1] = math.pi, TWO_PI
        roots = [
            [self.near_r, self.far_r, te[i], te[i + 1], pe[j], pe[j + 1]]
            for i in range(self.root_theta_divs)
            for j in range(self.root_phi_divs)
        ]
        ids = self._append(np.array(roots), parent=-1, depth=0)
        self._roots = ids

    # -- storage ---------------------------------------------------------
    def _alloc(self, cap):
        old = self._n
        def grow(a, shape, dtype, fill=0):
            new = np.full(shape, fill, dtype=dtype)
            if a is not None:
                new[:old] = a[:old]
            return new
        self._bounds = grow(getattr(self, "_bounds", None), (cap, 6), np.float64)
        self._parent = grow(getattr(self, "_parent", None), cap, np.int64, -1)
        self._child_start = grow(getattr(self, "_child_start", None), cap, np.int64, -1)
        self._child_count = grow(getattr(self, "_child_count", None), cap, np.int64)
        self._depth = grow(getattr(self, "_depth", None), cap, np.int64)
        self._point_count = grow(getattr(self, "_point_count", None), cap, np.int64)
        self._flags = grow(getattr(self, "_flags", None), cap, np.uint8)

    def _append(self, bounds, parent, depth) -> np.ndarray:
        k = len(bounds)
        if self._n + k > len(self._bounds):
            self._alloc(max(2 * len(self._bounds), self._n + k))
        ids = np.arange(self._n, self._n + k)
        self._bounds[ids] = bounds
        self._parent[ids] = parent
        self._depth[ids] = depth
        self._child_start[ids] = -1
        self._child_count[ids] = 0
        self._point_count[ids] = 0
        polar = (bounds[:, 2] == 0.0) | (bounds[:, 3] == math.pi)
        self._flags[ids] = np.where(polar, FLAG_POLAR, 0).astype(np.uint8)
        self._n += k
        return ids

    def __len__(self):
        return self._n

    @property
    def bounds(self) -> np.ndarray:
        return self._bounds[: self._n]

    @property
    def parent(self) -> np.ndarray:
        return self._parent[: self._n]

    @property
    def child_start(self) -> np.ndarray:
        return self._child_start[: self._n]

    @property
    def child_count(self) -> np.ndarray:
        return self._child_count[: self._n]

    @property
    def depth(self) -> np.ndarray:
        return self._depth[: self._n]

    @property
    def point_count(self) -> np.ndarray:
        return self._point_count[: self._n]

    @property
    def flags(self) -> np.ndarray:
        return self._flags[: self._n]

    @property
    def roots(self) -> np.ndarray:
        return self._roots

    @property
    def is_leaf(self) -> np.ndarray:
        return self.child_count == 0

    @property
    def in_coarse(self) -> np.ndarray:
        return (self.flags & FLAG_COARSE) != 0

    @property
    def in_fine(self) -> np.ndarray:
        return (self.flags & FLAG_FINE) != 0

    def set_flag(self, flag: int, ids, value: bool = True):
        ids = np.asarray(ids, dtype=np.int64)
        if value:
            self._flags[ids] |= np.uint8(flag)
        else:
            self._flags[ids] &= np.uint8(~flag & 0xFF)

    def clear_flag(self, flag: int):
        self._flags[: self._n] &= np.uint8(~flag & 0xFF)

    def member_mask(self, membership_filter=None) -> np.ndarray:
        if membership_filter is None:
            return np.ones(self._n, dtype=bool)
        if membership_filter == "leaf":
            return self.is_leaf.copy()
        if membership_filter == "coarse":
            return self.in_coarse.copy()
        if membership_filter == "fine":
            return self.in_fine.copy()
        raise SphoxelError(f"unknown membership filter {membership_filter!r}")

    def children(self, node_id: int) -> list[int]:
        s, c = self._child_start[node_id], self._child_count[node_id]
        return list(range(int(s), int(s + c))) if c else []

    def node(self, node_id: int) -> BinoctreeNode:
        if not 0 <= node_id < self._n:
            raise IndexError(node_id)
        p = int(self._parent[node_id])
        f = int(self._flags[node_id])
        return BinoctreeNode(
            id=int(node_id),
            bounds=SphoxelBounds.from_array(self._bounds[node_id]),
            parent=None if p < 0 else p,
            children=self.children(node_id),
            depth=int(self._depth[node_id]),
            point_count=int(self._point_count[node_id]),
            in_coarse=bool(f & FLAG_COARSE),
            in_fine=bool(f & FLAG_FINE),
        )

    def balls(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached :func:`cell_bounding_balls` for every node (bounds never change once written)."""
        have = len(self._ball_r)
        if have < self._n:
            c, r = cell_bounding_balls(self._bounds[have : self._n])
            self._ball_c = np.concatenate([self._ball_c, c])
            self._ball_r = np.concatenate([self._ball_r, r])
        return self._ball_c, self._ball_r

    def solid_angles(self) -> np.ndarray:
        return solid_angle_array(self.bounds)

    def ancestors_mask(self, ids) -> np.ndarray:
        """Mask of ``ids`` together with all their ancestors."""
        mask = np.zeros(self._n, dtype=bool)
        cur = np.unique(np.asarray(ids, dtype=np.int64))
        while cur.size:
            cur = cur[~mask[cur]]
            mask[cur] = True
            cur = self._parent[cur]
            cur = np.unique(cur[cur >= 0])
        return mask

    def subtree_mask(self, member: np.ndarray) -> np.ndarray:
        """Nodes whose subtree (self included) contains a member."""
        out = member.copy()
        depth = self.depth
        for d in range(int(depth.max()), 0, -1):
            ids = np.flatnonzero((depth == d) & out)
            out[self._parent[ids]] = True
        return out

    def descendants_mask(self, ids) -> np.ndarray:
        """Mask of ``ids`` together with all their descendants."""
        mask = np.zeros(self._n, dtype=bool)
        mask[np.asarray(ids, dtype=np.int64)] = True
        # children always have larger ids than their parent
        for d in range(1, int(self.depth.max()) + 1 if self._n else 1):
            ids_d = np.flatnonzero(self.depth == d)
            mask[ids_d] |= mask[self._parent[ids_d]]
        return mask

    # -- point bookkeeping -------------------------------------------------
    def _root_of(self, sph: np.ndarray) -> np.ndarray:
        te = np.linspace(0.0, math.pi, self.root_theta_divs + 1)
        pe = np.linspace(0.0, TWO_PI, self.root_phi_divs + 1)
        it = np.searchsorted(te[1:-1], sph[:, 1], side="right")
        ip = np.searchsorted(pe[1:-1], sph[:, 2], side="right")
        return self._roots[it * self.root_phi_divs + ip]

    def _child_for(self, nodes: np.ndarray, sph: np.ndarray) -> np.ndarray:
        start = self._child_start[nodes]
        count = self._child_count[nodes]
        first = self._bounds[start]  # child 0 carries the split values as its upper bounds
        ir = (count == 8) & (sph[:, 0] >= first[:, 1])
        it = sph[:, 1] >= first[:, 3]
        ip = sph[:, 2] >= first[:, 5]
        return start + 4 * ir + 2 * it + ip

    def in_shell(self, sph: np.ndarray) -> np.ndarray:
        return (sph[:, 0] >= self.near_r) & (sph[:, 0] <= self.far_r)

    def locate(self, sph) -> np.ndarray:
        """Leaf id containing each spherical point, ``-1`` outside the shell."""
        sph = np.atleast_2d(np.asarray(sph, dtype=np.float64))
        out = np.full(len(sph), -1, dtype=np.int64)
        inside = np.flatnonzero(self.in_shell(sph))
        if inside.size == 0:
            return out
        cur = self._root_of(sph[inside])
        active = np.arange(inside.size)
        while active.size:
            internal = self._child_count[cur[active]] > 0
            active = active[internal]
            if not active.size:
                break
            cur[active] = self._child_for(cur[active], sph[inside[active]])
        out[inside] = cur
        return out

    def add_points(self, sph) -> int:
        """Ingest spherical points; those outside the shell are dropped. Returns the kept count."""
        sph = np.atleast_2d(np.asarray(sph, dtype=np.float64)).reshape(-1, 3)
        leaf = self.locate(sph)
        keep = leaf >= 0
        sph, leaf = sph[keep], leaf[keep]
        self.points = np.concatenate([self.points, sph])
        self.point_leaf = np.concatenate([self.point_leaf, leaf])
        cur = leaf
        while cur.size:
            np.add.at(self._point_count, cur, 1)
            cur = self._parent[cur]
            cur = cur[cur >= 0]
        return int(keep.sum())

    # -- refinement ----------------------------------------------------------
    def subdivide_many(self, node_ids) -> np.ndarray:
        """Subdivide leaves in one vectorised step; returns all new ids."""
        ids = np.unique(np.asarray(node_ids, dtype=np.int64))
        if ids.size == 0:
            return ids
        if np.any(self._child_count[ids] != 0):
            bad = ids[self._child_count[ids] != 0][0]
            raise NotALeaf(f"node {bad} already has children")
        b = self._bounds[ids]
        r0, r1, t0, t1, p0, p1 = b.T
        rm = 0.5 * (r0 + r1)
        tm = 0.5 * (t0 + t1)
        pm = 0.5 * (p0 + p1)
        split = (r1 - r0) > self.elongation_ratio * rm * (0.5 * (t1 - t0))
        counts = np.where(split, 8, 4)
        k = len(ids)
        kids = np.empty((k, 8, 6))
        for c in range(8):
            ir, it, ip = c >> 2, (c >> 1) & 1, c & 1
            kids[:, c, 0] = np.where(split, (r0, rm)[ir], r0)
            kids[:, c, 1] = np.where(split, (rm, r1)[ir], r1)
            kids[:, c, 2] = (t0, tm)[it]
            kids[:, c, 3] = (tm, t1)[it]
            kids[:, c, 4] = (p0, pm)[ip]
            kids[:, c, 5] = (pm, p1)[ip]
        keep = np.arange(8)[None, :] < counts[:, None]
        new_bounds = kids[keep]
        parents = np.repeat(ids, counts)
        new = self._append(new_bounds, parent=parents, depth=self._depth[parents] + 1)
        starts = new[0] + np.concatenate([[0], np.cumsum(counts)[:-1]])
        self._child_start[ids] = starts
        self._child_count[ids] = counts
        if self.point_leaf.size:
            moving = np.flatnonzero(np.isin(self.point_leaf, ids))
            if moving.size:
                child = self._child_for(self.point_leaf[moving], self.points[moving])
                self.point_leaf[moving] = child
                np.add.at(self._point_count, child, 1)
        return new

    # -- serialization -------------------------------------------------------
    def node_records(self) -> np.ndarray:
        rec = np.zeros(self._n, dtype=NODE_DTYPE)
        rec["id"] = np.arange(self._n)
        rec["parent"] = self.parent
        rec["n_children"] = self.child_count
        ch = np.full((self._n, 8), -1, dtype=np.int64)
        has = self.child_count > 0
        offs = np.arange(8)[None, :]
        ch[has] = np.where(offs < self.child_count[has, None], self.child_start[has, None] + offs, -1)
        rec["children"] = ch
        rec["bounds"] = self.bounds
        rec["depth"] = self.depth
        rec["point_count"] = self.point_count
        rec["flags"] = self.flags
        return rec

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            _MAGIC,
            FORMAT_VERSION,
            self.near_r,
            self.far_r,
            self.scale_coeff,
            self.elongation_ratio,
            self.root_theta_divs,
            self.root_phi_divs,
            self._n,
            len(self.points),
        )
        pts = np.ascontiguousarray(self.points, dtype="<f8")
        return head + self.node_records().tobytes() + pts.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Binoctree":
        if len(data) < _HEADER.size:
            raise SphoxelError("truncated tree file")
        magic, version, near, far, scale, elong, ntd, npd, n, m = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise SphoxelError("not a binoctree file")
        if version != FORMAT_VERSION:
            raise SphoxelError(f"unsupported tree format version {version}")
        off = _HEADER.size
        need = off + n * NODE_DTYPE.itemsize + m * 24
        if len(data) != need:
            raise SphoxelError(f"tree file size {len(data)} does not match header ({need})")
        rec = np.frombuffer(data, dtype=NODE_DTYPE, count=n, offset=off)
        pts = np.frombuffer(data, dtype="<f8", count=3 * m, offset=off + n * NODE_DTYPE.itemsize)
        tree = cls(near, far, scale, elong, ntd, npd, _empty=True)
        tree._load_records(rec)
        tree.points = pts.reshape(m, 3).astype(np.float64)
        tree.point_leaf = tree.locate(tree.points) if m else np.zeros(0, dtype=np.int64)
        return tree

    def _load_records(self, rec):
        n = len(rec)
        self._n = 0
        self._alloc(max(n, 64))
        self._n = n
        if np.any(rec["id"] != np.arange(n)):
            raise SphoxelError("node ids must be dense and ordered")
        self._bounds[:n] = rec["bounds"]
        self._parent[:n] = rec["parent"]
        self._child_count[:n] = rec["n_children"]
        self._child_start[:n] = np.where(rec["n_children"] > 0, rec["children"][:, 0], -1)
        self._depth[:n] = rec["depth"]
        self._point_count[:n] = rec["point_count"]
        self._flags[:n] = rec["flags"]
        self._roots = np.flatnonzero(self._parent[:n] < 0)

    def to_json_dict(self) -> dict:
        rec = self.node_records()
        return {
            "version": FORMAT_VERSION,
            "near_r": self.near_r,
            "far_r": self.far_r,
            "scale_coeff": self.scale_coeff,
            "elongation_ratio": self.elongation_ratio,
            "root_theta_divs": self.root_theta_divs,
            "root_phi_divs": self.root_phi_divs,
            "node_count": self._n,
            "nodes": [
                {
                    "id": int(r["id"]),
                    "parent": int(r["parent"]),
                    "children": [int(c) for c in r["children"][: r["n_children"]]],
                    "bounds": [float(x) for x in r["bounds"]],
                    "depth": int(r["depth"]),
                    "point_count": int(r["point_count"]),
                    "flags": {
                        "polar": bool(r["flags"] & FLAG_POLAR),
                        "coarse": bool(r["flags"] & FLAG_COARSE),
                        "fine": bool(r["flags"] & FLAG_FINE),
                    },
                }
                for r in rec
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1, sort_keys=True)


def normalize_scene(points, camera_positions, far_margin: float = 1.0):
    """Scale a camera-centred scene into the unit sphere.

    Returns ``(scaled_points, near_r, far_r, scale_coeff)`` where ``far_r`` is
    always 1 and ``scale_coeff`` converts normalised lengths back to metric.
    """
    cams = np.asarray(camera_positions, dtype=np.float64).reshape(-1, 3)
    if len(cams) == 0:
        raise EmptyCameraSet("at least one camera position is required")
    if not far_margin >= 1.0:
        raise InvalidConfig(f"far_margin must be >= 1, got {far_margin}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pt_r = float(np.linalg.norm(pts, axis=1).max()) if len(pts) else 0.0
    cam_r = float(np.linalg.norm(cams, axis=1).max())
    if pt_r == 0.0:
        raise DegenerateScene("all points sit at the origin (or there are none)")
    if pt_r > cam_r:
        scale = far_margin * pt_r
    else:
        # points inside the camera circle: bound the far sphere by the cameras
        scale = max(far_margin, 2.0) * cam_r
    near_r = max(cam_r / scale, NEAR_FLOOR)
    return pts / scale, near_r, 1.0, scale


def subdivide(tree: Binoctree, node_id: int) -> list[int]:
    """Split a leaf into 4 angular children, or 8 when the radial extent is elongated."""
    return [int(i) for i in tree.subdivide_many([node_id])]


def build_initial(points, config: BuildConfig, near_r: float, far_r: float) -> Binoctree:
    """Refine the root tiling around ``points`` (Cartesian, normalised).

    Every point-bearing leaf is split until its solid angle drops to
    ``config.alpha_min`` (or ``config.max_depth`` is reached); empty leaves
    are left alone.
    """
    config.validate()
    tree = Binoctree(
        near_r,
        far_r,
        elongation_ratio=config.elongation_ratio,
        root_theta_divs=config.root_theta_divs,
        root_phi_divs=config.root_phi_divs,
    )
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts):
        tree.add_points(cart_to_sph_array(pts))
    while True:
        cand = np.flatnonzero(
            tree.is_leaf
            & (tree.point_count > 0)
            & (tree.solid_angles() > config.alpha_min)
            & (tree.depth < config.max_depth)
        )
        if cand.size == 0:
            return tree
        tree.subdivide_many(cand)


def leaves(tree: Binoctree, membership_filter=None) -> Iterator[int]:
    mask = tree.is_leaf
    if membership_filter is not None and membership_filter != "leaf":
        mask = mask & tree.member_mask(membership_filter)
    return (int(i) for i in np.flatnonzero(mask))


def traverse(tree: Binoctree, origins, dirs, membership_filter="leaf"):
    """Level-synchronous breadth-first traversal for a batch of rays.

    Descent into a node's children is gated by a ball enclosing the node's
    exact cell. Child prisms can poke slightly outside the parent's prism, so
    gating on the parent's prism would silently drop leaves.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    nr = len(origins)
    member = tree.member_mask(membership_filter)
    worth = tree.subtree_mask(member) if membership_filter not in (None, "leaf") else np.ones(len(tree), bool)
    bc, br = tree.balls()
    roots = tree.roots
    pr = np.repeat(np.arange(nr), len(roots))
    pn = np.tile(roots, nr)
    out_r, out_n, out_a, out_b = [], [], [], []
    while pn.size:
        keep = worth[pn]
        pr, pn = pr[keep], pn[keep]
        keep = ray_hits_ball(origins[pr], dirs[pr], bc[pn], br[pn])
        pr, pn = pr[keep], pn[keep]
        m = member[pn]
        if m.any():
            sel = pn[m]
            h, a, b = intersect_pairs(origins[pr[m]], dirs[pr[m]], tree.bounds[sel], (bc[sel], br[sel]))
            out_r.append(pr[m][h])
            out_n.append(pn[m][h])
            out_a.append(a[h])
            out_b.append(b[h])
        cnt = tree.child_count[pn]
        internal = cnt > 0
        pr, pn, cnt = pr[internal], pn[internal], cnt[internal]
        start = tree.child_start[pn]
        pr = np.repeat(pr, cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        pn = np.repeat(start, cnt) + offs
    results = [[] for _ in range(nr)]
    if not out_r:
        return results
    R = np.concatenate(out_r)
    N = np.concatenate(out_n)
    A = np.concatenate(out_a)
    B = np.concatenate(out_b)
    order = np.lexsort((N, A, R))
    for i in order:
        results[R[i]].append((int(N[i]), float(A[i]), float(B[i])))
    return results


def bfs_intersect(tree: Binoctree, ray: Ray, membership_filter="leaf"):
    """Sorted ``(node_id, t_entry, t_exit)`` of nodes hit by ``ray`` that pass the filter."""
    return traverse(tree, ray.origin[None], ray.direction[None], membership_filter)[0]
