"""Ray sampling: whole-space sphere samples, coarse and fine sphoxel samples,
occlusion-aware weights and inverse-CDF importance sampling.

Every sampler has a deterministic mode (stratum midpoints, ``rng=None``) and
a jittered mode driven by a caller-supplied ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .binoctree import FLAG_COARSE, FLAG_FINE, Binoctree, traverse
from .geom import Ray, ray_sphere_exit
from .intersect import metrics_array
from .sdf import SdfField

SEGMENTS = ("sphere", "coarse", "fine", "importance")
DEFAULT_SHARPNESS = 64.0


@dataclass(frozen=True)
class SampleCounts:
    sphere: int = 32
    coarse: int = 32
    fine: int = 32
    importance: int = 32
    importance_steps: int = 1

    @classmethod
    def parse(cls, text: str, importance_steps: int = 1) -> "SampleCounts":
        parts = [int(x) for x in text.split(",")]
        if len(parts) != 4:
            raise ValueError("counts need four comma-separated integers")
        return cls(*parts, importance_steps=importance_steps)

    def validate(self):
        vals = (self.sphere, self.coarse, self.fine, self.importance)
        if min(vals) < 0 or sum(vals) == 0:
            raise ValueError("sample counts must be non-negative with a positive total")
        if self.sphere == 1:
            raise ValueError("sphere stage needs 0 or at least 2 samples")
        if self.importance_steps < 1:
            raise ValueError("importance_steps must be >= 1")
        return self


# Ablation rows: sphere / coarse / fine / importance (steps).
ABLATION_CONFIGS = {
    "sphere": SampleCounts(64, 0, 0, 64, importance_steps=4),
    "sphere+coarse": SampleCounts(32, 32, 0, 64, importance_steps=4),
    "sphere+coarse+fine": SampleCounts(32, 32, 32, 32, importance_steps=2),
}


@dataclass
class SampleBatch:
    """Samples of one ray, sorted by ``t``."""

    t: np.ndarray
    segment: np.ndarray  # str per sample
    node: np.ndarray  # source node id, -1 when not tied to a sphoxel
    t_near: float = 0.0
    t_far: float = 0.0

    def count(self, segment: str) -> int:
        return int(np.sum(self.segment == segment))

    def counts(self) -> dict:
        return {s: self.count(s) for s in SEGMENTS}

    def to_dict(self) -> dict:
        return {
            "t_near": self.t_near,
            "t_far": self.t_far,
            "samples": [
                {"t": float(t), "segment": str(s), "node": None if n < 0 else int(n)}
                for t, s, n in zip(self.t, self.segment, self.node)
            ],
        }


@dataclass
class SampleSets:
    coarse: set = field(default_factory=set)
    fine: set = field(default_factory=set)
    prune_threshold: int = 3


@dataclass
class WeightProfile:
    weights: np.ndarray
    alpha: np.ndarray
    sharpness: float

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def _strata(n: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    """``n`` stratified fractions in ``[0, 1)``; midpoints without ``rng``."""
    k = np.arange(n, dtype=np.float64)
    off = 0.5 if rng is None else rng.random(n)
    return (k + off) / n


def sphere_exits(ray: Ray, near_r: float, far_r: float) -> tuple[float, float]:
    return ray_sphere_exit(ray, near_r), ray_sphere_exit(ray, far_r)


def sphere_samples(ray: Ray, near_r: float, far_r: float, n: int, rng=None) -> np.ndarray:
    """``n`` samples between the near- and far-sphere exits.

    The two exits are always included; the ``n - 2`` interior samples are
    stratified uniformly in inverse distance along the ray.
    """
    if n < 2:
        raise ValueError("sphere sampling needs n >= 2")
    t0, t1 = sphere_exits(ray, near_r, far_r)
    if n == 2:
        return np.array([t0, t1])
    # t0 can be 0 when the camera sits on the near sphere; start the
    # disparity range just past it.
    lo = t0 if t0 > 0 else min(1e-9 * t1, t1)
    u = _strata(n - 2, rng)
    inv = 1.0 / lo + u * (1.0 / t1 - 1.0 / lo)
    mid = np.clip(1.0 / inv, t0, t1)
    return np.concatenate([[t0], mid, [t1]])


def merge_intervals(intervals, t_lo=-np.inf, t_hi=np.inf) -> np.ndarray:
    """Union of ``(start, end)`` pairs clipped to ``[t_lo, t_hi]`` as a sorted ``(k, 2)`` array."""
    iv = np.asarray([(a, b) for a, b in intervals], dtype=np.float64).reshape(-1, 2)
    iv = np.stack([np.maximum(iv[:, 0], t_lo), np.minimum(iv[:, 1], t_hi)], axis=1)
    iv = iv[iv[:, 1] > iv[:, 0]]
    if len(iv) == 0:
        return iv
    iv = iv[np.argsort(iv[:, 0], kind="stable")]
    out = [list(iv[0])]
    for a, b in iv[1:]:
        if a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return np.asarray(out)


def total_length(segments: np.ndarray) -> float:
    return float(np.sum(segments[:, 1] - segments[:, 0])) if len(segments) else 0.0


def stratified_in_segments(segments: np.ndarray, n: int, rng=None) -> np.ndarray:
    """Spread ``n`` samples over disjoint segments in proportion to their length."""
    if n <= 0 or len(segments) == 0:
        return np.zeros(0)
    lengths = segments[:, 1] - segments[:, 0]
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = _strata(n, rng) * cum[-1]
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(segments) - 1)
    return np.minimum(segments[k, 0] + (s - cum[k]), segments[k, 1])


def select_coarse(tree: Binoctree, prune_threshold: int = 3) -> set:
    """Mark parents and grandparents of point-bearing leaves as coarse, minus sparse nodes.

    The fine set is initialised to the coarse set.
    """
    leaf = np.flatnonzero(tree.is_leaf & (tree.point_count > 0))
    par = tree.parent[leaf]
    par = par[par >= 0]
    gpar = tree.parent[par]
    gpar = gpar[gpar >= 0]
    cand = np.unique(np.concatenate([par, gpar]))
    coarse = cand[tree.point_count[cand] >= prune_threshold]
    tree.clear_flag(FLAG_COARSE)
    tree.clear_flag(FLAG_FINE)
    tree.set_flag(FLAG_COARSE, coarse)
    tree.set_flag(FLAG_FINE, coarse)
    return {int(i) for i in coarse}


def _interval_samples(ray, tree, n, flt, rng, hits=None) -> tuple[np.ndarray, np.ndarray]:
    if hits is None:
        hits = traverse(tree, ray.origin[None], ray.direction[None], flt)[0]
    if n <= 0 or not hits:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    t_lo, t_hi = sphere_exits(ray, tree.near_r, tree.far_r)
    segs = merge_intervals([(a, b) for _, a, b in hits], t_lo, t_hi)
    t = stratified_in_segments(segs, n, rng)
    return t, _source_nodes(t, hits)


def _source_nodes(t, hits) -> np.ndarray:
    ids = np.array([h[0] for h in hits])
    a = np.array([h[1] for h in hits])
    b = np.array([h[2] for h in hits])
    inside = (t[:, None] >= a[None]) & (t[:, None] <= b[None])
    first = inside.argmax(axis=1)
    return np.where(inside.any(axis=1), ids[first], -1)


def coarse_samples(ray: Ray, tree: Binoctree, n: int, rng=None, hits=None) -> np.ndarray:
    """Samples over the union of coarse-sphoxel intervals; empty when none is hit."""
    return _interval_samples(ray, tree, n, "coarse", rng, hits)[0]


def fine_samples(ray: Ray, tree: Binoctree, n: int, rng=None, hits=None) -> np.ndarray:
    return _interval_samples(ray, tree, n, "fine", rng, hits)[0]


def refine_fine(tree: Binoctree, field: SdfField, min_angular_size: float):
    """One refinement round of the fine set.

    Leaves under coarse nodes are re-tested for ``|d(center)| < R``; passing
    leaves become the fine set and those still wider than
    ``min_angular_size`` are subdivided (their children are tested next round).

    Returns ``(fine_ids, new_ids)``.
    """
    tree.clear_flag(FLAG_FINE)
    region = tree.descendants_mask(np.flatnonzero(tree.in_coarse))
    cand = np.flatnonzero(region & tree.is_leaf)
    if cand.size == 0:
        return set(), np.zeros(0, dtype=np.int64)
    c, r = metrics_array(tree.bounds[cand])
    fine = cand[np.abs(field.eval(c)) < r]
    tree.set_flag(FLAG_FINE, fine)
    wide = fine[tree.solid_angles()[fine] > min_angular_size]
    new = tree.subdivide_many(wide) if wide.size else np.zeros(0, dtype=np.int64)
    return {int(i) for i in fine}, new


def refine_until_stable(tree, field, min_angular_size, max_rounds=None) -> int:
    """Run refinement rounds until nothing is subdivided; returns the round count."""
    rounds = 0
    while max_rounds is None or rounds < max_rounds:
        _, new = refine_fine(tree, field, min_angular_size)
        rounds += 1
        if new.size == 0:
            break
    return rounds


def neus_weights(sdf_values, sharpness: float = DEFAULT_SHARPNESS) -> WeightProfile:
    """Occlusion-aware weights for the ``n`` intervals between ``n + 1`` SDF samples.

    ``alpha_i = max((S(s f_i) - S(s f_{i+1})) / S(s f_i), 0)`` with ``S`` the
    logistic function, and ``w_i = alpha_i * prod_{j<i} (1 - alpha_j)``.
    """
    f = np.asarray(sdf_values, dtype=np.float64)
    if f.size < 2:
        raise ValueError("need at least two SDF samples")
    if not sharpness > 0:
        raise ValueError("sharpness must be positive")
    cdf = expit(sharpness * f)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(cdf[:-1] > 0, (cdf[:-1] - cdf[1:]) / cdf[:-1], 0.0)
    alpha = np.clip(alpha, 0.0, 1.0)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
    w = alpha * trans
    # rounding can push a saturated profile a few ulps past 1
    while w.sum() > 1.0:
        w = w * (1.0 - 2.0**-52) / w.sum()
    return WeightProfile(w, alpha, float(sharpness))


def importance_samples(t, weights, n: int, rng=None) -> np.ndarray:
    """Inverse-CDF samples of the piecewise-constant PDF ``weights`` over ``[t_i, t_{i+1}]``.

    All-zero weights fall back to a flat PDF over ``[t_0, t_last]``.
    """
    t = np.asarray(t, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(t) - 1,):
        raise ValueError("need one weight per interval")
    if n <= 0:
        return np.zeros(0)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    widths = np.diff(t)
    w = np.where(widths > 0, w, 0.0)
    if not w.sum() > 0:
        w = widths.copy()
    cdf = np.concatenate([[0.0], np.cumsum(w)])
    cdf /= cdf[-1]
    u = _strata(n, rng)
    k = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(w) - 1)
    # skip zero-mass bins that share the CDF value
    frac = (u - cdf[k]) / np.where(w[k] > 0, cdf[k + 1] - cdf[k], 1.0)
    return t[k] + np.clip(frac, 0.0, 1.0) * widths[k]


def compose_ray_samples(
    ray: Ray,
    tree: Binoctree,
    field: Optional[SdfField],
    counts: SampleCounts,
    sharpness: float = DEFAULT_SHARPNESS,
    rng=None,
    coarse_hits=None,
    fine_hits=None,
) -> SampleBatch:
    """All enabled sampling stages for one ray, merged and sorted.

    Importance sampling runs in ``counts.importance_steps`` passes; each pass
    re-weights the current sample set with the sharpness doubled, and adds its
    share of the importance budget.
    """
    counts.validate()
    t_near, t_far = sphere_exits(ray, tree.near_r, tree.far_r)
    ts, segs, nodes = [], [], []

    def add(t, seg, node=None):
        ts.append(np.asarray(t, dtype=np.float64))
        segs.append(np.full(len(t), seg, dtype=object))
        nodes.append(np.full(len(t), -1, dtype=np.int64) if node is None else node)

    if counts.sphere:
        add(sphere_samples(ray, tree.near_r, tree.far_r, counts.sphere, rng), "sphere")
    if counts.coarse:
        t, nd = _interval_samples(ray, tree, counts.coarse, "coarse", rng, coarse_hits)
        add(t, "coarse", nd)
    if counts.fine:
        t, nd = _interval_samples(ray, tree, counts.fine, "fine", rng, fine_hits)
        add(t, "fine", nd)
    if counts.importance:
        steps = counts.importance_steps
        share = [counts.importance // steps + (k < counts.importance % steps) for k in range(steps)]
        for k, m in enumerate(share):
            cur = np.sort(np.concatenate(ts)) if ts else np.array([t_near, t_far])
            if len(cur) < 2:
                cur = np.array([t_near, t_far])
            if field is None:
                w = np.zeros(len(cur) - 1)
            else:
                w = neus_weights(field.eval(ray.at(cur)), sharpness * 2.0**k).weights
            add(importance_samples(cur, w, m, rng), "importance")
    t = np.concatenate(ts) if ts else np.zeros(0)
    order = np.argsort(t, kind="stable")
    return SampleBatch(
        t=t[order],
        segment=np.concatenate(segs)[order].astype(str) if segs else np.zeros(0, dtype=str),
        node=np.concatenate(nodes)[order] if nodes else np.zeros(0, dtype=np.int64),
        t_near=float(t_near),
        t_far=float(t_far),
    )


def compose_batch(rays, tree, field, counts: SampleCounts, sharpness=DEFAULT_SHARPNESS, rng=None):
    """:func:`compose_ray_samples` over many rays with one batched traversal per stage."""
    rays = list(rays)
    if not rays:
        return []
    o = np.stack([r.origin for r in rays])
    d = np.stack([r.direction for r in rays])
    ch = traverse(tree, o, d, "coarse") if counts.coarse else [None] * len(rays)
    fh = traverse(tree, o, d, "fine") if counts.fine else [None] * len(rays)
    return [
        compose_ray_samples(r, tree, field, counts, sharpness, rng, coarse_hits=c, fine_hits=f)
        for r, c, f in zip(rays, ch, fh)
    ]


def interval_length(ray: Ray, tree: Binoctree, membership_filter: str, hits=None) -> float:
    """Total length of the union of member intervals along ``ray`` within the shell."""
    if hits is None:
        hits = traverse(tree, ray.origin[None], ray.direction[None], membership_filter)[0]
    t_lo, t_hi = sphere_exits(ray, tree.near_r, tree.far_r)
    return total_length(merge_intervals([(a, b) for _, a, b in hits], t_lo, t_hi))
