"""Spherical/Cartesian conversions and the low-level intersection primitives.

Conventions: ``theta`` is the colatitude measured from the +z axis, ``phi`` the
azimuth measured from +x towards +y and wrapped into ``[0, 2*pi)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import InvalidBounds, OriginOutsideSphere

TWO_PI = 2.0 * math.pi

# |det| below this is treated as a ray parallel to the triangle plane.
PARALLEL_EPS = 1e-12
# Barycentric slack so that hits exactly on a shared edge are never lost to rounding.
BARY_EPS = 1e-12


class SphericalCoord(NamedTuple):
    r: float
    theta: float
    phi: float


@dataclass
class Ray:
    """Half-line ``origin + t * direction`` with ``t >= 0``.

    The direction is normalised on construction.
    """

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(d))
        if not n > 0.0 or not math.isfinite(n):
            raise ValueError("ray direction must be a finite non-zero vector")
        self.direction = d / n

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass
class Triangle:
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        self.v0 = np.asarray(self.v0, dtype=np.float64)
        self.v1 = np.asarray(self.v1, dtype=np.float64)
        self.v2 = np.asarray(self.v2, dtype=np.float64)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.v1 - self.v0, self.v2 - self.v0)

    @property
    def is_degenerate(self) -> bool:
        return float(np.linalg.norm(self.normal)) <= 1e-15


@dataclass(frozen=True)
class SphoxelBounds:
    """Axis-aligned box in ``(r, theta, phi)``: one spherical cell."""

    r_min: float
    r_max: float
    theta_min: float
    theta_max: float
    phi_min: float
    phi_max: float

    def __post_init__(self):
        if not (0.0 <= self.r_min < self.r_max):
            raise InvalidBounds(f"bad radial range [{self.r_min}, {self.r_max}]")
        if not (0.0 <= self.theta_min < self.theta_max <= math.pi):
            raise InvalidBounds(f"bad polar range [{self.theta_min}, {self.theta_max}]")
        if not (self.phi_min < self.phi_max and self.phi_max - self.phi_min <= TWO_PI + 1e-12):
            raise InvalidBounds(f"bad azimuth range [{self.phi_min}, {self.phi_max}]")

    @classmethod
    def from_array(cls, a) -> "SphoxelBounds":
        return cls(*(float(x) for x in a))

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.r_min, self.r_max, self.theta_min, self.theta_max, self.phi_min, self.phi_max]
        )

    @property
    def is_polar(self) -> bool:
        return self.theta_min == 0.0 or self.theta_max == math.pi

    @property
    def solid_angle(self) -> float:
        return solid_angle(self.theta_min, self.theta_max, self.phi_min, self.phi_max)

    @property
    def volume(self) -> float:
        return self.solid_angle * (self.r_max**3 - self.r_min**3) / 3.0

    def contains(self, p: SphericalCoord, closed_r=False, closed_theta=False, closed_phi=False) -> bool:
        """Half-open membership test; the ``closed_*`` switches close the upper end."""
        r, t, f = p
        ok_r = self.r_min <= r < self.r_max or (closed_r and r == self.r_max)
        ok_t = self.theta_min <= t < self.theta_max or (closed_theta and t == self.theta_max)
        ok_f = self.phi_min <= f < self.phi_max or (closed_phi and f == self.phi_max)
        return ok_r and ok_t and ok_f


def sph_to_cart(p) -> np.ndarray:
    r, theta, phi = p
    st = math.sin(theta)
    return np.array([r * st * math.cos(phi), r * st * math.sin(phi), r * math.cos(theta)])


def cart_to_sph(v) -> SphericalCoord:
    x, y, z = (float(c) for c in v)
    rho = math.hypot(x, y)
    r = math.hypot(rho, z)
    if r == 0.0:
        return SphericalCoord(0.0, 0.0, 0.0)
    theta = math.atan2(rho, z)
    if rho == 0.0:
        return SphericalCoord(r, theta, 0.0)
    phi = math.atan2(y, x) % TWO_PI
    if phi >= TWO_PI:
        phi = 0.0
    return SphericalCoord(r, theta, phi)


def sph_to_cart_array(sph: np.ndarray) -> np.ndarray:
    """Vectorised :func:`sph_to_cart` over the last axis of ``(..., 3)``."""
    sph = np.asarray(sph, dtype=np.float64)
    r, theta, phi = sph[..., 0], sph[..., 1], sph[..., 2]
    st = _sin_theta(theta)
    return np.stack([r * st * np.cos(phi), r * st * np.sin(phi), r * _cos_theta(theta)], axis=-1)


def cart_to_sph_array(xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    rho = np.hypot(x, y)
    r = np.hypot(rho, z)
    theta = np.arctan2(rho, z)
    phi = np.mod(np.arctan2(y, x), TWO_PI)
    phi = np.where((rho == 0.0) | (phi >= TWO_PI), 0.0, phi)
    theta = np.where(r == 0.0, 0.0, theta)
    return np.stack([r, theta, phi], axis=-1)


def _sin_theta(theta):
    # Exact zero on the poles so collapsed prism vertices coincide bit-for-bit.
    theta = np.asarray(theta, dtype=np.float64)
    return np.where((theta == 0.0) | (theta == math.pi), 0.0, np.sin(theta))


def _cos_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return np.where(theta == math.pi, -1.0, np.where(theta == 0.0, 1.0, np.cos(theta)))


def ray_sphere_exit(ray: Ray, radius: float) -> float:
    """Distance along ``ray`` at which it leaves the origin-centred sphere.

    Raises
    ------
    OriginOutsideSphere
        If the ray origin lies outside the sphere (an origin exactly on the
        sphere is accepted).
    """
    o, d = ray.origin, ray.direction
    oo = float(o @ o)
    if oo > radius * radius * (1.0 + 1e-12):
        raise OriginOutsideSphere(f"|origin|={math.sqrt(oo):.6g} exceeds radius {radius:.6g}")
    b = float(o @ d)
    c = oo - radius * radius
    disc = max(b * b - c, 0.0)
    # c <= 0, so the larger root is the non-negative one; avoid cancellation.
    sq = math.sqrt(disc)
    if b <= 0.0:
        return -b + sq
    return -c / (b + sq) if b + sq > 0.0 else 0.0


def ray_sphere_exit_array(origins, directions, radius) -> np.ndarray:
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    oo = dot(o, o)
    if np.any(oo > radius * radius * (1.0 + 1e-12)):
        raise OriginOutsideSphere("ray origin outside sphere")
    b = dot(o, d)
    c = oo - radius * radius
    sq = np.sqrt(np.maximum(b * b - c, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        alt = np.where(b + sq > 0.0, -c / (b + sq), 0.0)
    return np.where(b <= 0.0, -b + sq, alt)


class TriangleHit(NamedTuple):
    t: float
    front_facing: bool


def ray_triangle_intersect(ray: Ray, tri: Triangle) -> Optional[TriangleHit]:
    """Moller-Trumbore test; edges and vertices count as hits."""
    t, u, v, det = moller_trumbore(
        ray.origin[None], ray.direction[None], tri.v0[None], tri.v1[None], tri.v2[None]
    )
    hit = _mt_accept(u, v, det) & (t >= 0.0)
    if not hit[0]:
        return None
    # det = (v1-v0) . (d x (v2-v0)) = -d . n, so det > 0 means the ray faces the normal.
    return TriangleHit(float(t[0]), bool(det[0] > 0.0))


def moller_trumbore(origins, dirs, v0, v1, v2):
    """Broadcasting Moller-Trumbore: returns ``(t, u, v, det)`` without any acceptance test."""
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(dirs, e2)
    det = dot(e1, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = origins - v0
        u = dot(s, p) * inv
        q = np.cross(s, e1)
        v = dot(dirs, q) * inv
        t = dot(e2, q) * inv
    return t, u, v, det


def dot(a, b):
    """Elementwise 3-vector dot product with a fixed summation order.

    Unlike ``einsum`` the result for a pair never depends on how the batch
    around it is shaped, which keeps batched and per-item queries bit-identical.
    """
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _mt_accept(u, v, det):
    with np.errstate(invalid="ignore"):
        return (
            (np.abs(det) >= PARALLEL_EPS)
            & (u >= -BARY_EPS)
            & (v >= -BARY_EPS)
            & (u + v <= 1.0 + BARY_EPS)
        )


def solid_angle(theta_min, theta_max, phi_min, phi_max) -> float:
    if not (0.0 <= theta_min < theta_max <= math.pi):
        raise InvalidBounds(f"bad polar range [{theta_min}, {theta_max}]")
    if not (phi_min < phi_max and phi_max - phi_min <= TWO_PI + 1e-12):
        raise InvalidBounds(f"bad azimuth range [{phi_min}, {phi_max}]")
    return (phi_max - phi_min) * (math.cos(theta_min) - math.cos(theta_max))


def solid_angle_array(bounds: np.ndarray) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    return (b[..., 5] - b[..., 4]) * (_cos_theta(b[..., 2]) - _cos_theta(b[..., 3]))


def cell_volume_array(bounds: np.ndarray) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    return solid_angle_array(b) * (b[..., 1] ** 3 - b[..., 0] ** 3) / 3.0
