"""Planes, rays, zone fields of view, plane fitting and plane-comparison metrics.

Conventions
-----------
* The sensor sits at the origin looking down +z.
* A plane is ``a . x + d = 0`` with ``a`` a unit normal that faces the sensor,
  so ``d > 0`` and ``a . r < 0`` for every ray ``r`` that hits it.
* Angular coordinates ``(ax, ay)`` in degrees map to the direction
  ``normalize(tan(ax), tan(ay), 1)``. A zone is therefore the pyramid over an
  axis-aligned rectangle on the ``z = 1`` image plane.
* ``phi = 0`` puts the near edge of a tilted plane toward +x; ``phi`` grows
  counterclockwise looking down +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateFitError,
    InvalidArgumentError,
    InvalidGeometryError,
    MetricUndefinedError,
)

FULL_FOV_DEG = (33.0, 34.0)
POINT_ERROR_GRID = 8


@dataclass(frozen=True)
class PlaneGeometry:
    """Scene parameterization: angle of incidence, z-axis intercept, azimuth."""

    theta: float  # degrees
    z0: float  # meters
    phi: float = 0.0  # degrees

    def validate(self) -> None:
        if not (0.0 <= self.theta < 90.0) or not math.isfinite(self.theta):
            raise InvalidGeometryError(f"theta must lie in [0, 90) degrees, got {self.theta}")
        if not (self.z0 > 0.0) or not math.isfinite(self.z0):
            raise InvalidGeometryError(f"z0 must be positive, got {self.z0}")
        if not math.isfinite(self.phi):
            raise InvalidGeometryError(f"phi must be finite, got {self.phi}")

    def normalized(self) -> "PlaneGeometry":
        return PlaneGeometry(self.theta, self.z0, self.phi % 360.0)


@dataclass(frozen=True)
class ImplicitPlane:
    """Plane ``a . x + d = 0`` with unit normal ``a`` facing the origin."""

    a: np.ndarray
    d: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(3)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "d", float(self.d))

    def __eq__(self, other):
        if not isinstance(other, ImplicitPlane):
            return NotImplemented
        return bool(np.array_equal(self.a, other.a)) and self.d == other.d

    __hash__ = None


class ZoneKind(str, Enum):
    CENTER = "center"
    EDGE = "edge"
    CORNER = "corner"


@dataclass(frozen=True)
class ZoneFov:
    """Angular rectangle imaged by one histogram. All values in degrees."""

    center_x: float
    center_y: float
    width: float
    height: float
    kind: ZoneKind = ZoneKind.CENTER

    @property
    def x_bounds(self) -> tuple[float, float]:
        return self.center_x - self.width / 2, self.center_x + self.width / 2

    @property
    def y_bounds(self) -> tuple[float, float]:
        return self.center_y - self.height / 2, self.center_y + self.height / 2

    def center_direction(self) -> np.ndarray:
        return angles_to_directions(np.array([self.center_x]), np.array([self.center_y]))[0]


def default_zones(fov: tuple[float, float] = FULL_FOV_DEG) -> list[ZoneFov]:
    """3x3 zone layout over ``fov`` (width, height in degrees), row-major.

    Rows run from -y to +y and columns from -x to +x, so index 4 is the
    center zone, 1/3/5/7 are edges and 0/2/6/8 corners.
    """
    w, h = fov[0] / 3.0, fov[1] / 3.0
    zones = []
    for row in range(3):
        for col in range(3):
            off = (row != 1) + (col != 1)
            kind = (ZoneKind.CENTER, ZoneKind.EDGE, ZoneKind.CORNER)[off]
            zones.append(ZoneFov((col - 1) * w, (row - 1) * h, w, h, kind))
    return zones


def validate_zone_layout(zones: Sequence[ZoneFov]) -> None:
    if len(zones) != 9:
        raise InvalidArgumentError(f"expected 9 zones, got {len(zones)}")
    kinds = [ZoneKind(z.kind) for z in zones]
    counts = {k: kinds.count(k) for k in ZoneKind}
    if counts != {ZoneKind.CENTER: 1, ZoneKind.EDGE: 4, ZoneKind.CORNER: 4}:
        raise InvalidArgumentError(f"zone kinds must be 1 center, 4 edge, 4 corner; got {counts}")
    for z in zones:
        if not (z.width > 0 and z.height > 0):
            raise InvalidArgumentError(f"zone extents must be positive: {z}")


def angles_to_directions(ax_deg, ay_deg) -> np.ndarray:
    """Unit directions for angular coordinates in degrees; returns shape (..., 3)."""
    tx = np.tan(np.radians(ax_deg))
    ty = np.tan(np.radians(ay_deg))
    v = np.stack([tx, ty, np.ones_like(tx)], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def directions_to_angles(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dirs = np.asarray(dirs, dtype=float)
    return (
        np.degrees(np.arctan2(dirs[..., 0], dirs[..., 2])),
        np.degrees(np.arctan2(dirs[..., 1], dirs[..., 2])),
    )


def plane_from_geometry(g: PlaneGeometry) -> ImplicitPlane:
    g.validate()
    th = math.radians(g.theta)
    ph = math.radians(g.phi)
    st = math.sin(th)
    a = np.array([-st * math.cos(ph), -st * math.sin(ph), -math.cos(th)])
    return ImplicitPlane(a, g.z0 * math.cos(th))


def geometry_from_plane(p: ImplicitPlane) -> PlaneGeometry:
    """Inverse of :func:`plane_from_geometry` for sensor-facing planes."""
    a, d = _oriented(p)
    cos_t = float(np.clip(-a[2], -1.0, 1.0))
    if cos_t <= 0.0:
        raise InvalidGeometryError("plane is parallel to the optical axis")
    theta = math.degrees(math.acos(cos_t))
    z0 = float(d / cos_t)
    if math.hypot(a[0], a[1]) < 1e-15:
        phi = 0.0
    else:
        phi = math.degrees(math.atan2(-a[1], -a[0])) % 360.0
    return PlaneGeometry(theta, z0, phi)


def _oriented(p: ImplicitPlane) -> tuple[np.ndarray, float]:
    a = p.a / np.linalg.norm(p.a)
    d = p.d / np.linalg.norm(p.a)
    if d < 0 or (d == 0 and a[2] > 0):
        a, d = -a, -d
    return a, d


def intersect_many(dirs: np.ndarray, p: ImplicitPlane) -> np.ndarray:
    """Intersections of unit rays with ``p``; rows are NaN where there is none."""
    dirs = np.asarray(dirs, dtype=float)
    denom = dirs @ p.a
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -p.d / denom
    hit = (denom < 0) & (t > 0) & np.isfinite(t)
    out = dirs * np.where(hit, t, np.nan)[..., None]
    return out


def intersect(r, p: ImplicitPlane) -> np.ndarray | None:
    """Intersection point of ray direction ``r`` with ``p``, or None."""
    x = intersect_many(np.asarray(r, dtype=float)[None, :], p)[0]
    return None if np.isnan(x[0]) else x


def angular_error(p1: ImplicitPlane, p2: ImplicitPlane) -> float:
    """Angle between the two normals, degrees."""
    # atan2 stays accurate for nearly parallel normals, where acos loses half the digits
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(p1.a, p2.a))), float(np.dot(p1.a, p2.a))))


def linear_error(p1: ImplicitPlane, p2: ImplicitPlane) -> float:
    return abs(p1.d - p2.d)


def fov_grid_directions(n: int = POINT_ERROR_GRID, fov: tuple[float, float] = FULL_FOV_DEG) -> np.ndarray:
    """n x n rays at cell centers of a uniform angular grid, row-major (y outer)."""
    xs = -fov[0] / 2 + (np.arange(n) + 0.5) * fov[0] / n
    ys = -fov[1] / 2 + (np.arange(n) + 0.5) * fov[1] / n
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return angles_to_directions(gx.ravel(), gy.ravel())


def point_error(
    p1: ImplicitPlane,
    p2: ImplicitPlane,
    fov: tuple[float, float] = FULL_FOV_DEG,
    grid: int = POINT_ERROR_GRID,
) -> float:
    """Mean distance between per-ray intersections with ``p1`` and ``p2``."""
    dirs = fov_grid_directions(grid, fov)
    x1 = intersect_many(dirs, p1)
    x2 = intersect_many(dirs, p2)
    if np.isnan(x1).any() or np.isnan(x2).any():
        raise MetricUndefinedError("a grid ray misses one of the planes")
    return float(np.mean(np.linalg.norm(x1 - x2, axis=1)))


def fit_plane_svd(pts) -> ImplicitPlane:
    """Total-least-squares plane through ``pts`` (shape (n, 3), n >= 3)."""
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise DegenerateFitError(f"need at least 3 points of shape (n, 3), got {pts.shape}")
    centroid = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateFitError("points are collinear or coincident")
    a = vt[-1]
    d = -float(a @ centroid)
    return ImplicitPlane(*_oriented(ImplicitPlane(a, d)))


class _SphericalRectangle:
    """Uniform solid-angle sampler for a rectangle seen from the origin.

    The rectangle is spanned by ``corner + u*ex + v*ey``. Follows the
    construction of Urena et al. (2013).
    """

    def __init__(self, corner, ex, ey):
        corner, ex, ey = (np.asarray(v, dtype=float) for v in (corner, ex, ey))
        exl, eyl = np.linalg.norm(ex), np.linalg.norm(ey)
        self.x = ex / exl
        self.y = ey / eyl
        self.z = np.cross(self.x, self.y)
        z0 = float(corner @ self.z)
        if z0 > 0:
            self.z = -self.z
            z0 = -z0
        self.z0 = z0
        self.x0 = float(corner @ self.x)
        self.y0 = float(corner @ self.y)
        self.x1 = self.x0 + exl
        self.y1 = self.y0 + eyl
        v00 = np.array([self.x0, self.y0, z0])
        v01 = np.array([self.x0, self.y1, z0])
        v10 = np.array([self.x1, self.y0, z0])
        v11 = np.array([self.x1, self.y1, z0])

        def unit(v):
            return v / np.linalg.norm(v)

        n0 = unit(np.cross(v00, v10))
        n1 = unit(np.cross(v10, v11))
        n2 = unit(np.cross(v11, v01))
        n3 = unit(np.cross(v01, v00))
        g0 = math.acos(float(np.clip(-n0 @ n1, -1, 1)))
        g1 = math.acos(float(np.clip(-n1 @ n2, -1, 1)))
        g2 = math.acos(float(np.clip(-n2 @ n3, -1, 1)))
        g3 = math.acos(float(np.clip(-n3 @ n0, -1, 1)))
        self.b0 = n0[2]
        self.b1 = n2[2]
        self.k = 2 * math.pi - g2 - g3
        self.solid_angle = g0 + g1 - self.k

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        au = u * self.solid_angle + self.k
        fu = (np.cos(au) * self.b0 - self.b1) / np.sin(au)
        cu = np.sign(fu) / np.sqrt(fu * fu + self.b0 * self.b0)
        cu = np.clip(cu, -1.0, 1.0)
        xu = -(cu * self.z0) / np.sqrt(1.0 - cu * cu)
        xu = np.clip(xu, self.x0, self.x1)
        dist = np.sqrt(xu * xu + self.z0 * self.z0)
        h0 = self.y0 / np.sqrt(dist * dist + self.y0 * self.y0)
        h1 = self.y1 / np.sqrt(dist * dist + self.y1 * self.y1)
        hv = h0 + v * (h1 - h0)
        hv2 = hv * hv
        safe = hv2 < 1.0 - 1e-12
        yv = np.where(safe, hv * dist / np.sqrt(np.where(safe, 1.0 - hv2, 1.0)), self.y1)
        pts = xu[:, None] * self.x + yv[:, None] * self.y + self.z0 * self.z
        return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def zone_rectangle(zone: ZoneFov) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner and edge vectors of the zone's rectangle on the z = 1 plane."""
    tx0, tx1 = np.tan(np.radians(zone.x_bounds))
    ty0, ty1 = np.tan(np.radians(zone.y_bounds))
    return np.array([tx0, ty0, 1.0]), np.array([tx1 - tx0, 0.0, 0.0]), np.array([0.0, ty1 - ty0, 0.0])


def zone_solid_angle(zone: ZoneFov) -> float:
    return _SphericalRectangle(*zone_rectangle(zone)).solid_angle


def sample_zone_rays(zone: ZoneFov, count: int, seed=0) -> np.ndarray:
    """Directions uniformly distributed over the zone's solid angle.

    ``seed`` is anything :func:`numpy.random.default_rng` accepts (an int or a
    sequence of ints).

    Perfect-square counts use a k x k jittered grid (row-major strata);
    other counts fall back to independent uniform samples.
    """
    if int(count) != count or count < 1:
        raise InvalidArgumentError(f"count must be a positive integer, got {count}")
    count = int(count)
    rng = np.random.default_rng(seed)
    k = math.isqrt(count)
    if k * k == count:
        j = np.arange(count)
        u = (j % k + rng.random(count)) / k
        v = (j // k + rng.random(count)) / k
    else:
        u = rng.random(count)
        v = rng.random(count)
    return _SphericalRectangle(*zone_rectangle(zone)).sample(u, v)
