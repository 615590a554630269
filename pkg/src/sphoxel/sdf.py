"""Signed distance fields.

Analytic scenes stand in for a learned field: anything with an ``eval``
method over ``(N, 3)`` points plugs into refinement, sampling and rendering.
Distances are negative inside solid matter.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import SphoxelError
from .intersect import metrics_array

DEFAULT_FD_STEP = 1e-4


class SdfField:
    """Base class. Subclasses implement :meth:`eval`; :meth:`gradient` defaults to central differences."""

    scale: float = 1.0

    def eval(self, points) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, points):
        return self.eval(points)

    def gradient(self, points, h=None) -> np.ndarray:
        return fd_gradient(self, points, h if h is not None else DEFAULT_FD_STEP * self.scale)


def fd_gradient(field: SdfField, points, h: float) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    g = np.empty_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (field.eval(p + e) - field.eval(p - e)) / (2.0 * h)
    return g


class Sphere(SdfField):
    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.scale = self.radius

    def eval(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.linalg.norm(p - self.center, axis=1) - self.radius

    def gradient(self, points, h=None):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64)) - self.center
        n = np.linalg.norm(p, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, p / n, 0.0)


class Box(SdfField):
    """Solid axis-aligned box (exact Euclidean SDF)."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.scale = float(np.max(self.hi - self.lo))

    def eval(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = np.abs(p - c) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside


class Plane(SdfField):
    """Half-space ``normal . p <= -offset`` is solid; distance ``normal . p + offset``."""

    def __init__(self, normal=(0.0, 0.0, 1.0), offset=0.0):
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)
        self.scale = max(abs(self.offset), 1.0)

    def eval(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return p @ self.normal + self.offset


class Inverted(SdfField):
    """Swap inside and outside, e.g. a hollow room around the camera."""

    def __init__(self, inner: SdfField):
        self.inner = inner
        self.scale = inner.scale

    def eval(self, points):
        return -self.inner.eval(points)

    def gradient(self, points, h=None):
        return -self.inner.gradient(points, h)


class Union(SdfField):
    """Pointwise minimum; exact outside, conservative inside."""

    def __init__(self, *parts: SdfField):
        if not parts:
            raise SphoxelError("union of zero primitives")
        self.parts = list(parts)
        self.scale = max(p.scale for p in parts)

    def eval(self, points):
        return np.min(np.stack([f.eval(points) for f in self.parts]), axis=0)


class Scaled(SdfField):
    """``factor * f``; not a distance field unless ``|factor| == 1``."""

    def __init__(self, inner: SdfField, factor: float):
        self.inner = inner
        self.factor = float(factor)
        self.scale = inner.scale

    def eval(self, points):
        return self.factor * self.inner.eval(points)


class Constant(SdfField):
    def __init__(self, value: float):
        self.value = float(value)

    def eval(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.full(len(p), self.value)


def hollow_sphere(radius: float, center=(0.0, 0.0, 0.0)) -> SdfField:
    """Spherical room: empty inside, solid beyond ``radius``."""
    return Inverted(Sphere(center, radius))


def box_room(lo, hi) -> SdfField:
    return Inverted(Box(lo, hi))


def eval_sdf(field: SdfField, p) -> np.ndarray | float:
    out = field.eval(p)
    if np.ndim(p) == 1:
        return float(out[0])
    return out


def surface_in_sphoxel(field: SdfField, bounds) -> np.ndarray | bool:
    """``|d(center)| < R`` for one bounds row or a stack of them."""
    b = np.asarray(bounds.as_array() if hasattr(bounds, "as_array") else bounds, dtype=np.float64)
    single = b.ndim == 1
    c, r = metrics_array(np.atleast_2d(b))
    out = np.abs(field.eval(c)) < r
    return bool(out[0]) if single else out


def eikonal_residual(field: SdfField, p, h: float = DEFAULT_FD_STEP):
    """``|grad f| - 1`` from central differences; large near gradient singularities."""
    if not h > 0:
        raise SphoxelError("finite-difference step must be positive")
    g = fd_gradient(field, p, h)
    res = np.linalg.norm(g, axis=1) - 1.0
    return float(res[0]) if np.ndim(p) == 1 else res


# -- scene files ---------------------------------------------------------------

def _primitive(spec: dict) -> SdfField:
    kind = spec.get("type")
    try:
        if kind == "sphere":
            f = Sphere(spec.get("center", (0, 0, 0)), spec["radius"])
        elif kind == "box":
            f = Box(spec["min"], spec["max"])
        elif kind == "box_room":
            f = box_room(spec["min"], spec["max"])
        elif kind == "hollow_sphere":
            f = hollow_sphere(spec["radius"], spec.get("center", (0, 0, 0)))
        elif kind == "plane":
            f = Plane(spec.get("normal", (0, 0, 1)), spec.get("offset", 0.0))
        elif kind == "union":
            f = Union(*(_primitive(s) for s in spec["children"]))
        else:
            raise SphoxelError(f"unknown primitive type {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SphoxelError):
            raise
        raise SphoxelError(f"bad {kind} primitive: {exc}") from exc
    if spec.get("invert", False):
        f = Inverted(f)
    return f


def scene_from_dict(d) -> SdfField:
    prims = d["primitives"] if isinstance(d, dict) else d
    fields = [_primitive(p) for p in prims]
    return fields[0] if len(fields) == 1 else Union(*fields)


def load_scene(path) -> SdfField:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SphoxelError(f"cannot read scene {path}: {exc}") from exc
    return scene_from_dict(d)


def scene_far_bound(d, default: float = 100.0) -> float:
    if isinstance(d, dict) and "far" in d:
        return float(d["far"])
    return default
