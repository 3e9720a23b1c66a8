import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from tofplane.errors import InvalidArgumentError, InvalidReferenceError
from tofplane.forward_model import (
    C_LIGHT_M_PER_PS,
    HARD,
    SOFT,
    CameraParams,
    ReferenceHistogram,
    ReflectanceParams,
    apply_crosstalk,
    apply_impulse,
    bin_distance,
    detected_photons,
    phong_intensity,
    render_image,
    render_raw_histogram,
    rescale_reference,
)
from tofplane.geometry import ImplicitPlane, PlaneGeometry, ZoneFov, ZoneKind, default_zones, plane_from_geometry
from tofplane.simulate import synth_reference

AXIS = np.array([0.0, 0.0, 1.0])
FACING = np.array([0.0, 0.0, -1.0])
CAM = CameraParams()
DELTA = synth_reference()


def fronto(d):
    return ImplicitPlane(FACING, d)


# ---------------------------------------------------------------- phong

def test_phong_diffuse_only():
    assert phong_intensity(AXIS, FACING, ReflectanceParams(0.5, 0.0, 10)) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("k_e", [0.0, 0.5, 3.0, 150.0])
def test_phong_retroreflection(k_e):
    assert phong_intensity(AXIS, FACING, ReflectanceParams(0.3, 1.0, k_e)) == pytest.approx(1.0, abs=1e-15)


def test_phong_oblique_oracle():
    a = np.array([-math.sin(math.radians(30)), 0.0, -math.cos(math.radians(30))])
    # 0.8*0.7*cos30 + 0.3*(2cos^2 30 - 1)^20, evaluated with scalar math
    assert phong_intensity(AXIS, a, ReflectanceParams(0.8, 0.3, 20)) == pytest.approx(0.48497451222158056,
                                                                                      rel=1e-12)


def test_phong_back_facing_is_zero():
    assert phong_intensity(AXIS, -FACING, ReflectanceParams(0.8, 0.3, 20)) == 0.0


@given(st.floats(0, 80), st.floats(0, 360), st.floats(0, 1), st.floats(0, 1), st.floats(0, 200))
def test_phong_in_unit_interval(theta, phi, albedo, k_s, k_e):
    a = plane_from_geometry(PlaneGeometry(theta, 1.0, phi)).a
    val = phong_intensity(AXIS, a, ReflectanceParams(albedo, k_s, k_e))
    assert 0.0 <= val <= 1.0 + 1e-12 and math.isfinite(val)


# ---------------------------------------------------------------- saturation

def test_detected_photons_examples():
    c = CameraParams(gain=1.0, saturation=100.0)
    assert detected_photons(0.0, 1.0, c) == 0.0
    assert detected_photons(1.0, 1.0, c) == pytest.approx(0.9950166250831893, rel=1e-12)
    assert detected_photons(1e12, 1.0, c) < 100.0


def test_detected_photons_bad_range():
    with pytest.raises(InvalidArgumentError):
        detected_photons(1.0, 0.0, CAM)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 2), st.floats(0.01, 2), st.floats(1e-4, 10))
def test_detected_photons_monotone(i1, i2, r1, r2, gain):
    c = CameraParams(gain=gain, saturation=2.0)
    lo_i, hi_i = sorted((i1, i2))
    near, far = sorted((r1, r2))
    assert detected_photons(lo_i, near, c) <= detected_photons(hi_i, near, c)
    assert detected_photons(hi_i, far, c) <= detected_photons(hi_i, near, c)
    assert detected_photons(hi_i, near, c) <= detected_photons(hi_i, near, CameraParams(gain=2 * gain,
                                                                                        saturation=2.0))
    assert detected_photons(hi_i, near, c) < 2.0


# ---------------------------------------------------------------- raw histograms

def test_hard_binning_concentrates_mass():
    k = 20
    z0 = (k + 0.5) * bin_distance(CAM.bin_size)
    narrow = ZoneFov(0, 0, 2, 2, ZoneKind.CENTER)
    h = render_raw_histogram(fronto(z0), ReflectanceParams(0.6, 0.0, 1), CAM, narrow, seed=1, mode=HARD)
    assert h[k - 1:k + 2].sum() >= 0.99 * h.sum() > 0


def test_zero_albedo_renders_nothing():
    f = ReflectanceParams(0.0, 0.0, 10)
    assert not render_raw_histogram(fronto(0.2), f, CAM, default_zones()[4]).any()
    assert not render_image(PlaneGeometry(10, 0.2, 40), f, CAM, DELTA, mode=SOFT).any()


def test_soft_and_hard_totals_agree():
    p = plane_from_geometry(PlaneGeometry(10, 0.5, 30))
    f = ReflectanceParams(0.6, 0.05, 20)
    for zone in default_zones():
        hard = render_raw_histogram(p, f, CAM, zone, mode=HARD)
        soft = render_raw_histogram(p, f, CAM, zone, mode=SOFT)
        assert soft.sum() == pytest.approx(hard.sum(), rel=0.02)


@pytest.mark.xfail(strict=True, reason="point-sampled Gaussians alias when a zone's transient spans about "
                                       "one bin; per-bin agreement needs bin-integrated kernels")
def test_soft_approaches_hard_for_narrow_kernel():
    c = CameraParams(soft_bin_sigma=0.25)
    f = ReflectanceParams(0.6, 0.05, 20)
    for g in (PlaneGeometry(0, 0.2, 0), PlaneGeometry(25, 0.4, 60)):
        p = plane_from_geometry(g)
        for zone in default_zones():
            hard = render_raw_histogram(p, f, c, zone, mode=HARD)
            soft = render_raw_histogram(p, f, c, zone, mode=SOFT)
            assert np.max(np.abs(soft - hard)) < 0.05 * hard.max()


def test_out_of_range_photons_dropped():
    far = fronto(200 * bin_distance(CAM.bin_size))
    for mode in (HARD, SOFT):
        assert not render_raw_histogram(far, ReflectanceParams(), CAM, default_zones()[4], mode=mode).any()


def test_plane_behind_sensor_renders_zero():
    behind = ImplicitPlane(np.array([0.0, 0.0, 1.0]), 0.2)
    assert not render_raw_histogram(behind, ReflectanceParams(), CAM, default_zones()[4]).any()


@given(st.floats(0, 60), st.floats(0.03, 0.6), st.floats(0, 360), st.floats(0, 1), st.floats(0, 1),
       st.floats(0, 100), st.sampled_from([HARD, SOFT]))
def test_saturation_bound(theta, z0, phi, albedo, k_s, k_e, mode):
    c = CameraParams(gain=5.0, saturation=0.5, rays_per_zone=64)
    p = plane_from_geometry(PlaneGeometry(theta, z0, phi))
    h = render_raw_histogram(p, ReflectanceParams(albedo, k_s, k_e), c, default_zones()[4], mode=mode)
    assert np.all(h >= 0) and np.all(h < c.saturation * c.rays_per_zone)
    if mode == HARD:
        assert h.max() < c.saturation * c.rays_per_zone


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 60), st.floats(0.05, 0.6), st.sampled_from([HARD, SOFT]))
def test_albedo_monotone(a1, a2, theta, z0, mode):
    lo, hi = sorted((a1, a2))
    c = CameraParams(rays_per_zone=64)
    p = plane_from_geometry(PlaneGeometry(theta, z0, 45))
    h_lo = render_raw_histogram(p, ReflectanceParams(lo, 0.0, 1), c, default_zones()[0], mode=mode)
    h_hi = render_raw_histogram(p, ReflectanceParams(hi, 0.0, 1), c, default_zones()[0], mode=mode)
    assert np.all(h_hi >= h_lo)


# ---------------------------------------------------------------- reference rescale

def test_single_spike_lands_on_scaled_position():
    bins = np.zeros(5)
    bins[3] = 1.0  # +80 ps from the reference midpoint with 80 ps bins
    ref = ReferenceHistogram(bins, 80.0)
    for s, lag in ((1.0, 1), (2.0, 2), (0.5, 0.5)):
        k = rescale_reference(ref, s, 80.0, 11, sigma_bins=0.05)
        if lag == int(lag):
            assert k[5 + int(lag)] == pytest.approx(1.0, abs=1e-12)
        else:
            assert k[5] == pytest.approx(0.5) and k[6] == pytest.approx(0.5)


def test_two_spikes_double_separation():
    bins = np.zeros(5)
    bins[[1, 3]] = 1.0  # -80 ps and +80 ps
    ref = ReferenceHistogram(bins, 80.0)
    k1 = rescale_reference(ref, 1.0, 80.0, 15, sigma_bins=0.05)
    k2 = rescale_reference(ref, 2.0, 80.0, 15, sigma_bins=0.05)
    assert list(np.flatnonzero(k1 > 0.1)) == [6, 8]
    assert list(np.flatnonzero(k2 > 0.1)) == [5, 9]


@given(st.lists(st.floats(0, 10), min_size=1, max_size=40).filter(lambda b: max(b) > 0),
       st.floats(1, 200), st.floats(0.2, 5), st.floats(10, 200), st.integers(1, 60), st.floats(0.3, 3))
def test_kernel_normalized(bins, ref_bs, s, target, klen, sigma):
    k = rescale_reference(ReferenceHistogram(bins, ref_bs), s, target, klen, sigma)
    assume_finite = np.all(np.isfinite(k))
    if assume_finite:
        assert k.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(k >= 0)


def test_zero_reference_rejected():
    with pytest.raises(InvalidReferenceError):
        rescale_reference(ReferenceHistogram(np.zeros(8), 40.0), 1.0, 80.0, 9)


# ---------------------------------------------------------------- impulse and crosstalk

def test_impulse_identity():
    raw = np.random.default_rng(1).random(128)
    np.testing.assert_array_equal(apply_impulse(raw, [0.0, 1.0, 0.0]), raw)
    np.testing.assert_array_equal(apply_impulse(raw, [1.0]), raw)


def test_impulse_of_zero():
    assert not apply_impulse(np.zeros(128), [0.2, 0.5, 0.3]).any()


def test_impulse_three_tap_correlation():
    raw = np.zeros(10)
    raw[4] = 2.0
    out = apply_impulse(raw, [0.2, 0.5, 0.3])
    # out[i] = sum_k kernel[k] raw[i + k - 1]: the kernel appears mirrored about the spike
    expected = np.zeros(10)
    expected[[3, 4, 5]] = [0.6, 1.0, 0.4]
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_impulse_preserves_interior_counts():
    raw = np.zeros(128)
    raw[60:70] = np.arange(1, 11)
    k = rescale_reference(DELTA, 1.0, 80.0, 15)
    assert apply_impulse(raw, k).sum() == pytest.approx(raw.sum(), rel=1e-12)


@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(-3, 3))
def test_post_processing_linear(seed, psi, scale):
    rng = np.random.default_rng(seed)
    x, y = rng.random((9, 32)), rng.random((9, 32))
    k = rng.random(5)
    k /= k.sum()
    np.testing.assert_allclose(apply_impulse(scale * x + y, k), scale * apply_impulse(x, k) + apply_impulse(y, k),
                               atol=1e-12)
    np.testing.assert_allclose(apply_crosstalk(scale * x + y, psi),
                               scale * apply_crosstalk(x, psi) + apply_crosstalk(y, psi), atol=1e-12)


def test_crosstalk_examples():
    img = np.random.default_rng(2).random((9, 16))
    np.testing.assert_array_equal(apply_crosstalk(img, 0.0), img)
    same = np.full((9, 16), 3.0)
    np.testing.assert_allclose(apply_crosstalk(same, 0.05), 3.0 * (1 + 9 * 0.05))
    single = np.zeros((9, 16))
    single[2] = np.arange(16.0)
    out = apply_crosstalk(single, 0.1)
    for j in range(9):
        np.testing.assert_allclose(out[j], (1.1 if j == 2 else 0.1) * single[2])


# ---------------------------------------------------------------- full render

def test_doubling_distance_shifts_peak():
    f = ReflectanceParams(0.6, 0.0, 1)
    z0 = 0.3
    h1 = render_image(PlaneGeometry(0, z0, 0), f, CAM, DELTA, mode=HARD)[4]
    h2 = render_image(PlaneGeometry(0, 2 * z0, 0), f, CAM, DELTA, mode=HARD)[4]
    shift = (2 * z0 / C_LIGHT_M_PER_PS) / CAM.bin_size
    assert abs((np.argmax(h2) - np.argmax(h1)) - shift) <= 1.0


def test_render_deterministic_across_thread_counts():
    g, f = PlaneGeometry(17, 0.22, 123), ReflectanceParams(0.6, 0.1, 15)
    before = torch.get_num_threads()
    try:
        outs = []
        for n in (1, 2, 4):
            torch.set_num_threads(n)
            outs.append(render_image(g, f, CAM, DELTA, seed=5, mode=SOFT))
        outs.append(render_image(g, f, CAM, DELTA, seed=5, mode=SOFT))
    finally:
        torch.set_num_threads(before)
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])


def test_render_shape_and_seed_dependence():
    g, f = PlaneGeometry(10, 0.2, 10), ReflectanceParams()
    a = render_image(g, f, CAM, DELTA, seed=0, mode=HARD)
    b = render_image(g, f, CAM, DELTA, seed=1, mode=HARD)
    assert a.shape == (9, 128) and np.all(a >= 0)
    assert not np.array_equal(a, b)


def test_soft_render_finite_differences_exist():
    base = dict(theta=12.0, z0=0.2, phi=40.0, albedo=0.6, k_s=0.1, k_e=15.0)
    steps = dict(theta=1e-3, z0=1e-5, phi=1e-3, albedo=1e-5, k_s=1e-5, k_e=1e-3)

    def render(v):
        return render_image(PlaneGeometry(v["theta"], v["z0"], v["phi"]),
                            ReflectanceParams(v["albedo"], v["k_s"], v["k_e"]), CAM, DELTA, mode=SOFT)

    for name, h in steps.items():
        up, dn = dict(base), dict(base)
        up[name] += h
        dn[name] -= h
        fd = (render(up) - render(dn)) / (2 * h)
        assert np.all(np.isfinite(fd)) and np.any(fd != 0), name


def test_camera_validation():
    with pytest.raises(InvalidArgumentError):
        CameraParams(gain=0).validate()
    with pytest.raises(InvalidArgumentError):
        CameraParams(zones=tuple(default_zones()[:8])).validate()
    CameraParams().validate()
