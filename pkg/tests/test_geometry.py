import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from tofplane.errors import DegenerateFitError, InvalidArgumentError, InvalidGeometryError, MetricUndefinedError
from tofplane.geometry import (
    ImplicitPlane,
    PlaneGeometry,
    ZoneFov,
    ZoneKind,
    angular_error,
    default_zones,
    directions_to_angles,
    fit_plane_svd,
    fov_grid_directions,
    geometry_from_plane,
    intersect,
    intersect_many,
    linear_error,
    plane_from_geometry,
    point_error,
    sample_zone_rays,
    zone_rectangle,
    zone_solid_angle,
)

thetas = st.floats(0.0, 89.0)
z0s = st.floats(0.01, 2.0)
phis = st.floats(0.0, 359.999)


def fronto(d):
    return ImplicitPlane(np.array([0.0, 0.0, -1.0]), d)


# ---------------------------------------------------------------- plane_from_geometry

def test_fronto_parallel():
    p = plane_from_geometry(PlaneGeometry(0, 0.2, 0))
    np.testing.assert_allclose(p.a, [0, 0, -1], atol=1e-15)
    assert p.d == pytest.approx(0.2, abs=1e-15)


def test_azimuth_ignored_at_normal_incidence():
    assert plane_from_geometry(PlaneGeometry(0, 0.2, 137)) == plane_from_geometry(PlaneGeometry(0, 0.2, 0))


def test_tilted_offset():
    # z0 * cos(30 deg), evaluated independently
    assert plane_from_geometry(PlaneGeometry(30, 0.2, 0)).d == pytest.approx(0.17320508075688776, abs=1e-15)


def test_phi_zero_tilts_near_edge_toward_plus_x():
    p = plane_from_geometry(PlaneGeometry(20, 0.3, 0))
    near = intersect(np.array([math.sin(0.2), 0, math.cos(0.2)]), p)
    far = intersect(np.array([-math.sin(0.2), 0, math.cos(0.2)]), p)
    assert np.linalg.norm(near) < np.linalg.norm(far)


@pytest.mark.parametrize("g", [PlaneGeometry(90, 0.2, 0), PlaneGeometry(10, 0.0, 0), PlaneGeometry(-1, 0.2, 0),
                               PlaneGeometry(10, -0.1, 0)])
def test_invalid_geometry(g):
    with pytest.raises(InvalidGeometryError):
        plane_from_geometry(g)


@given(thetas, z0s, phis)
def test_plane_from_geometry_properties(theta, z0, phi):
    p = plane_from_geometry(PlaneGeometry(theta, z0, phi))
    assert np.linalg.norm(p.a) == pytest.approx(1.0, abs=1e-9)
    assert p.d > 0 and p.a[2] < 0
    assert p.a @ np.array([0, 0, z0]) + p.d == pytest.approx(0.0, abs=1e-9)
    assert math.degrees(math.acos(-p.a[2])) == pytest.approx(theta, abs=1e-6)
    assert p.d / math.cos(math.radians(theta)) == pytest.approx(z0, rel=1e-9)


@given(st.floats(0.01, 89.0), z0s, phis)
def test_geometry_round_trip(theta, z0, phi):
    g = geometry_from_plane(plane_from_geometry(PlaneGeometry(theta, z0, phi)))
    assert g.theta == pytest.approx(theta, abs=1e-7)
    assert g.z0 == pytest.approx(z0, rel=1e-9)
    dphi = (g.phi - phi + 180) % 360 - 180
    assert abs(dphi) < 1e-5 * max(1.0, 1.0 / math.sin(math.radians(theta)))


def test_geometry_from_plane_flips_orientation():
    p = plane_from_geometry(PlaneGeometry(25, 0.3, 40))
    g = geometry_from_plane(ImplicitPlane(-2 * p.a, -2 * p.d))
    assert (g.theta, g.z0, g.phi) == pytest.approx((25, 0.3, 40))


# ---------------------------------------------------------------- intersect

def test_axial_intersection():
    np.testing.assert_allclose(intersect([0, 0, 1], fronto(0.2)), [0, 0, 0.2])


def test_plane_behind_sensor():
    assert intersect([0, 0, 1], ImplicitPlane(np.array([0, 0, 1.0]), 0.2)) is None


def test_parallel_ray_misses():
    assert intersect([1, 0, 0], fronto(0.2)) is None


def test_oblique_ray_range():
    r = np.array([0, math.sin(math.radians(10)), math.cos(math.radians(10))])
    x = intersect(r, fronto(0.2))
    assert x[2] == pytest.approx(0.2, abs=1e-12)
    assert np.linalg.norm(x) == pytest.approx(0.2 / math.cos(math.radians(10)), rel=1e-12)


@given(thetas, z0s, phis, st.floats(-16, 16), st.floats(-17, 17))
def test_intersection_lies_on_plane(theta, z0, phi, ax, ay):
    p = plane_from_geometry(PlaneGeometry(theta, z0, phi))
    r = np.array([math.tan(math.radians(ax)), math.tan(math.radians(ay)), 1.0])
    r /= np.linalg.norm(r)
    x = intersect(r, p)
    if x is not None:
        assert p.a @ x + p.d == pytest.approx(0.0, abs=1e-9 * max(1.0, np.linalg.norm(x)))


# ---------------------------------------------------------------- metrics

def test_angular_error_examples():
    p = fronto(0.2)
    q = ImplicitPlane(np.array([0, math.sin(math.radians(5)), -math.cos(math.radians(5))]), 0.2)
    assert angular_error(p, p) == 0.0
    assert angular_error(p, q) == pytest.approx(5.0, abs=1e-9)
    assert angular_error(q, p) == angular_error(p, q)


def test_linear_error_examples():
    p1 = plane_from_geometry(PlaneGeometry(0, 0.20, 0))
    p2 = plane_from_geometry(PlaneGeometry(0, 0.25, 0))
    assert linear_error(p1, p1) == 0.0
    assert linear_error(p1, p2) == pytest.approx(0.05, abs=1e-15)
    assert linear_error(p2, p1) == linear_error(p1, p2)


def test_point_error_identical_is_zero():
    p = plane_from_geometry(PlaneGeometry(12, 0.2, 33))
    assert point_error(p, p) == 0.0


def test_point_error_parallel_fronto_planes():
    # 0.01 * mean(1/dir_z) over the 8x8 angular grid, from a scalar-math oracle
    assert point_error(fronto(0.20), fronto(0.21)) == pytest.approx(0.010284461250904209, rel=1e-12)


def test_point_error_grid_is_row_major_angular():
    dirs = fov_grid_directions()
    ax, ay = directions_to_angles(dirs)
    assert dirs.shape == (64, 3)
    np.testing.assert_allclose(ax[:8], -16.5 + (np.arange(8) + 0.5) * 33 / 8)
    np.testing.assert_allclose(ay[::8], -17 + (np.arange(8) + 0.5) * 34 / 8)


def test_point_error_undefined_when_ray_misses():
    steep = plane_from_geometry(PlaneGeometry(85, 0.2, 0))
    with pytest.raises(MetricUndefinedError):
        point_error(steep, fronto(0.2))


@given(thetas.filter(lambda t: t < 60), z0s, phis, thetas.filter(lambda t: t < 60), z0s, phis)
def test_point_error_symmetric_nonnegative(t1, z1, f1, t2, z2, f2):
    p = plane_from_geometry(PlaneGeometry(t1, z1, f1))
    q = plane_from_geometry(PlaneGeometry(t2, z2, f2))
    e = point_error(p, q)
    assert e >= 0
    assert e == pytest.approx(point_error(q, p), rel=1e-12, abs=1e-15)


@given(st.floats(0.05, 1.0), st.lists(st.floats(1e-4, 0.5), min_size=2, max_size=5, unique=True))
def test_point_error_increases_with_offset(d, deltas):
    errs = [point_error(fronto(d), fronto(d + dd)) for dd in sorted(deltas)]
    assert all(b > a for a, b in zip(errs, errs[1:]))


# ---------------------------------------------------------------- fit_plane_svd

def test_fit_exact_points():
    p = plane_from_geometry(PlaneGeometry(20, 0.25, 70))
    pts = intersect_many(fov_grid_directions(3), p)
    assert point_error(fit_plane_svd(pts), p) < 1e-9


def test_fit_symmetric_perturbation():
    p = plane_from_geometry(PlaneGeometry(15, 0.3, 200))
    pts = intersect_many(fov_grid_directions(4), p)
    # every point appears once displaced by +eps and once by -eps along the normal
    q = fit_plane_svd(np.vstack([pts + 1e-3 * p.a, pts - 1e-3 * p.a]))
    assert angular_error(p, q) < 1e-6
    assert abs(p.d - q.d) < 1e-9


def test_fit_matches_normal_equations(rng):
    pts = rng.normal(size=(50, 3)) * [0.1, 0.1, 0.005] + [0, 0, 0.3]
    pts[:, 2] += 0.2 * pts[:, 0] - 0.1 * pts[:, 1]
    q = fit_plane_svd(pts)
    # orthogonal least squares: smallest eigenvector of the scatter matrix
    c = pts - pts.mean(axis=0)
    w, v = np.linalg.eigh(c.T @ c)
    n = v[:, 0] * -np.sign(v[2, 0])
    assert angular_error(q, ImplicitPlane(n, -n @ pts.mean(axis=0))) < 1e-6


@pytest.mark.parametrize("pts", [np.zeros((2, 3)), np.array([[0, 0, 1.0], [0, 0, 2], [0, 0, 3]]),
                                 np.ones((5, 3))])
def test_fit_degenerate(pts):
    with pytest.raises(DegenerateFitError):
        fit_plane_svd(pts)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 1))
def test_fit_translation_equivariant(vx, vy, vz):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(20, 3)) * [0.1, 0.1, 0.01] + [0, 0, 0.5]
    v = np.array([vx, vy, vz])
    p, q = fit_plane_svd(pts), fit_plane_svd(pts + v)
    assert angular_error(p, q) < 1e-6
    # distance of the translated centroid is consistent with the shift along the normal
    assert abs(q.a @ (pts.mean(axis=0) + v) + q.d) < 1e-9


# ---------------------------------------------------------------- zones and rays

def test_default_zone_layout():
    zones = default_zones()
    kinds = [z.kind for z in zones]
    assert kinds.count(ZoneKind.CENTER) == 1 and kinds.count(ZoneKind.EDGE) == 4
    assert kinds.count(ZoneKind.CORNER) == 4 and zones[4].kind == ZoneKind.CENTER
    assert sum(z.width for z in zones[:3]) == pytest.approx(33.0)
    assert sum(z.height for z in zones[::3]) == pytest.approx(34.0)


def test_sample_rays_deterministic_and_inside():
    zone = default_zones()[2]
    r1 = sample_zone_rays(zone, 2304, 7)
    r2 = sample_zone_rays(zone, 2304, 7)
    assert r1.shape == (2304, 3)
    np.testing.assert_array_equal(r1, r2)
    np.testing.assert_allclose(np.linalg.norm(r1, axis=1), 1.0, atol=1e-12)
    ax, ay = directions_to_angles(r1)
    (x0, x1), (y0, y1) = zone.x_bounds, zone.y_bounds
    assert np.all((ax >= x0 - 1e-9) & (ax <= x1 + 1e-9) & (ay >= y0 - 1e-9) & (ay <= y1 + 1e-9))
    assert np.all(r1[:, 2] > 0)


def test_sample_rays_count_validation():
    with pytest.raises(InvalidArgumentError):
        sample_zone_rays(default_zones()[0], 0)


def test_mean_direction_of_centered_zone():
    zone = ZoneFov(0, 0, 20, 20, ZoneKind.CENTER)
    m = sample_zone_rays(zone, 100_000, 3).mean(axis=0)
    m /= np.linalg.norm(m)
    assert np.linalg.norm(m - zone.center_direction()) < 1e-2


def test_solid_angle_closed_form():
    # solid angle of the tan-rectangle [x0,x1]x[y0,y1] on the z=1 plane
    zone = default_zones()[0]
    tx = np.tan(np.radians(zone.x_bounds))
    ty = np.tan(np.radians(zone.y_bounds))

    def f(x, y):
        return math.atan(x * y / math.sqrt(1 + x * x + y * y))

    expected = f(tx[1], ty[1]) - f(tx[0], ty[1]) - f(tx[1], ty[0]) + f(tx[0], ty[0])
    assert zone_solid_angle(zone) == pytest.approx(expected, rel=1e-10)


def test_uniform_over_solid_angle_chi_square():
    zone = default_zones()[8]
    n = 100_000
    rays = sample_zone_rays(zone, n, 11)
    # 4x4 partition into equal tan-space cells, expected counts proportional to their solid angle
    tx = np.tan(np.radians(np.linspace(*zone.x_bounds, 5)))
    ty = np.tan(np.radians(np.linspace(*zone.y_bounds, 5)))
    px, py = rays[:, 0] / rays[:, 2], rays[:, 1] / rays[:, 2]
    counts, _, _ = np.histogram2d(px, py, bins=[tx, ty])

    def f(x, y):
        return np.arctan(x * y / np.sqrt(1 + x * x + y * y))

    omega = f(tx[1:, None], ty[None, 1:]) - f(tx[:-1, None], ty[None, 1:]) - f(tx[1:, None], ty[None, :-1]) \
        + f(tx[:-1, None], ty[None, :-1])
    expected = n * omega / omega.sum()
    assert chisquare(counts.ravel(), expected.ravel()).pvalue > 0.01


def test_zone_rectangle_spans_zone():
    zone = default_zones()[5]
    corner, ex, ey = zone_rectangle(zone)
    assert corner[2] == 1.0
    assert corner[0] == pytest.approx(math.tan(math.radians(zone.x_bounds[0])))
    assert (corner + ex)[0] == pytest.approx(math.tan(math.radians(zone.x_bounds[1])))
    assert (corner + ey)[1] == pytest.approx(math.tan(math.radians(zone.y_bounds[1])))
