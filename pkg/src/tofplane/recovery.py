"""Plane and albedo recovery from transient images.

Two routes:

* histogram peaks: spline-interpolated peak per zone, a linear bin-to-distance
  map, projection along (angle-scaled) zone centers, and an SVD plane fit.
  Its four parameters are calibrated with Nelder-Mead.
* differentiable rendering: Adam on the normalized L2 image loss through the
  soft renderer, over geometry and reflectance (recovery) or over camera
  constants with known geometry (calibration).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np
import torch
from scipy.interpolate import CubicSpline

from .errors import DataError, DegenerateInitError, NoPeakError, RecoveryFailedError
from .forward_model import (
    DIFFERENTIABLE_CAMERA_FIELDS,
    DTYPE,
    SOFT,
    CameraParams,
    ReferenceHistogram,
    ReflectanceParams,
    RenderInputs,
    bin_distance,
    default_kernel_len,
    render_t,
    zone_rays,
)
from .geometry import (
    ImplicitPlane,
    PlaneGeometry,
    ZoneFov,
    ZoneKind,
    fit_plane_svd,
    geometry_from_plane,
    plane_from_geometry,
    point_error,
)
from .optim import (
    ANGLE_SCALE,
    DISTANCE_SCALE,
    REFLECTANCE_SCALE,
    OptimizerReport,
    ParamVector,
    minimize_adam,
    nelder_mead,
)
from .simulate import MeasurementRecord

log = logging.getLogger(__name__)

PEAK_WINDOW_BINS = 2
PEAK_OVERSAMPLE = 10

GEOMETRY_NAMES = ("theta", "z0", "phi")
REFLECTANCE_NAMES = ("albedo", "k_s", "k_e")
RECOVERY_BOUNDS = {
    "theta": (0.0, 75.0),
    "z0": (0.005, 1.5),
    "phi": (None, None),
    "albedo": (0.0, 1.0),
    "k_s": (0.0, 1.0),
    "k_e": (0.0, 200.0),
}
RECOVERY_SCALES = {
    "theta": ANGLE_SCALE,
    "z0": DISTANCE_SCALE,
    "phi": ANGLE_SCALE,
    "albedo": REFLECTANCE_SCALE,
    "k_s": REFLECTANCE_SCALE,
    # k_e spans two orders of magnitude more than the other reflectance terms
    "k_e": 100.0 * REFLECTANCE_SCALE,
}
DEFAULT_REFLECTANCE_INIT = ReflectanceParams(albedo=0.5, k_s=0.1, k_e=10.0)
DEFAULT_RECOVERY_LR = 0.02
DEFAULT_RECOVERY_LR_FINAL = 0.002
DEFAULT_RECOVERY_STEPS = 100
DEFAULT_CALIBRATION_STEPS = 500
DEFAULT_CALIBRATION_LR = 0.05
DEFAULT_CALIBRATION_LR_FINAL = 0.005


class Method(str, Enum):
    DIFF_RENDER = "diff-render"
    PEAK_CALIBRATED = "peak-calibrated"
    PEAK_NAIVE = "peak-naive"


@dataclass(frozen=True)
class PeakParams:
    slope_m: float  # meters per bin
    intercept_b: float  # meters
    edge_scale: float = 1.0
    corner_scale: float = 1.0

    def validate(self) -> None:
        if not (self.slope_m > 0 and self.edge_scale > 0 and self.corner_scale > 0):
            raise DataError(f"peak parameters need positive slope and scales: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.slope_m, self.intercept_b, self.edge_scale, self.corner_scale])


def naive_peak_params(camera: CameraParams) -> PeakParams:
    """Nominal constants with no fitting: one bin of range per bin, unit angle scales.

    The intercept only undoes the bin offset, so a peak at bin index k maps
    to the range at the start of bin k.
    """
    return PeakParams(bin_distance(camera.bin_size), -bin_distance(camera.bin_offset), 1.0, 1.0)


@dataclass
class RecoveryResult:
    geometry: PlaneGeometry
    plane: ImplicitPlane
    method: Method
    reflectance: ReflectanceParams | None = None
    report: OptimizerReport | None = None


# ---------------------------------------------------------------------------
# histogram peaks


def find_peak(h) -> float:
    """Sub-bin location of the histogram maximum, in bin-index units.

    A natural cubic spline through (bin index, count) is sampled at 10x density
    over +-2 bins around the highest bin; the best sample wins.
    """
    h = np.asarray(h, dtype=float)
    if h.size == 0 or not np.all(np.isfinite(h)):
        raise NoPeakError("histogram is empty or not finite")
    k = int(np.argmax(h))
    if not h[k] > 0:
        raise NoPeakError("histogram has no positive bin")
    if h.size < 3:
        return float(k)
    x = np.arange(h.size, dtype=float)
    lo = max(k - PEAK_WINDOW_BINS, 0)
    hi = min(k + PEAK_WINDOW_BINS, h.size - 1)
    spline = CubicSpline(x, h, bc_type="natural")
    n = (hi - lo) * PEAK_OVERSAMPLE + 1
    xs = np.linspace(lo, hi, n)
    return float(xs[int(np.argmax(spline(xs)))])


def _scaled_direction(u: np.ndarray, scale: float) -> np.ndarray:
    polar = math.acos(min(max(u[2], -1.0), 1.0)) * scale
    az = math.atan2(u[1], u[0])
    return np.array([math.sin(polar) * math.cos(az), math.sin(polar) * math.sin(az), math.cos(polar)])


def zone_peaks(image) -> np.ndarray:
    """Peak coordinate per zone histogram; NaN where a zone has no peak."""
    out = np.full(len(image), np.nan)
    for j, hist in enumerate(image):
        try:
            out[j] = find_peak(hist)
        except NoPeakError:
            pass
    return out


def points_from_peaks(peaks: np.ndarray, params: PeakParams, zones: Sequence[ZoneFov]) -> np.ndarray:
    """Project each zone's peak distance along its (angle-scaled) center direction."""
    pts = []
    for i, zone in zip(peaks, zones):
        if np.isnan(i):
            continue
        kind = ZoneKind(zone.kind)
        s = {ZoneKind.EDGE: params.edge_scale, ZoneKind.CORNER: params.corner_scale}.get(kind, 1.0)
        u = _scaled_direction(zone.center_direction(), s)
        pts.append(u * (i * params.slope_m + params.intercept_b))
    return np.array(pts).reshape(-1, 3)


def _plane_from_peaks(peaks: np.ndarray, params: PeakParams, zones: Sequence[ZoneFov]) -> ImplicitPlane:
    pts = points_from_peaks(peaks, params, zones)
    if len(pts) < 3:
        raise RecoveryFailedError(f"only {len(pts)} zones have a usable peak")
    return fit_plane_svd(pts)


def recover_plane_peaks(image, params: PeakParams, zones: Sequence[ZoneFov]) -> ImplicitPlane:
    return _plane_from_peaks(zone_peaks(image), params, zones)


def _truth_plane(rec: MeasurementRecord) -> ImplicitPlane:
    if rec.truth is None:
        raise DataError(f"record {rec.record_id} has no ground truth")
    return plane_from_geometry(rec.truth)


def _peak_error(peaks: Sequence[np.ndarray], truths: Sequence[ImplicitPlane], params: PeakParams,
                zones: Sequence[ZoneFov]) -> float:
    if not (params.slope_m > 0 and params.edge_scale > 0 and params.corner_scale > 0):
        return math.inf
    total = 0.0
    for pk, truth in zip(peaks, truths):
        try:
            total += point_error(_plane_from_peaks(pk, params, zones), truth)
        except (RecoveryFailedError, ValueError):
            return math.inf
    return total / len(peaks)


def peak_objective(dataset: Sequence[MeasurementRecord], params: PeakParams, zones: Sequence[ZoneFov]) -> float:
    """Mean point error of peak recovery over ``dataset``; inf if any record fails."""
    return _peak_error([zone_peaks(r.image) for r in dataset], [_truth_plane(r) for r in dataset], params, zones)


def calibrate_peaks(dataset: Sequence[MeasurementRecord], init: PeakParams, zones: Sequence[ZoneFov],
                    max_evals: int = 3000, tol: float = 1e-7,
                    restarts: int = 5) -> tuple[PeakParams, OptimizerReport]:
    """Nelder-Mead fit of (slope, intercept, edge scale, corner scale) to ground truth.

    Records whose recovery fails at ``init`` are dropped with a warning.
    ``max_evals`` bounds the total across restarts.
    """
    if not dataset:
        raise DataError("calibration dataset is empty")
    truths = [_truth_plane(rec) for rec in dataset]
    peaks, kept = [], []
    for rec, truth in zip(dataset, truths):
        pk = zone_peaks(rec.image)
        if math.isfinite(_peak_error([pk], [truth], init, zones)):
            peaks.append(pk)
            kept.append(truth)
        else:
            log.warning("excluding record %s: peak recovery fails at the initial parameters", rec.record_id)
    if not peaks:
        raise RecoveryFailedError("no usable records for peak calibration")

    # intercept scaled like a few bins of range so the first simplex probes it meaningfully
    x = ParamVector(
        ("slope_m", "intercept_b", "edge_scale", "corner_scale"),
        init.as_array(),
        [init.slope_m, max(abs(init.intercept_b), 10.0 * init.slope_m), 1.0, 1.0],
    )

    def objective(v):
        return _peak_error(peaks, kept, PeakParams(*v), zones)

    # restart from the best vertex until a run stops improving: a collapsed simplex can stall
    report = OptimizerReport(final_loss=objective(x.values), evaluations=1)
    for _ in range(restarts + 1):
        budget = max_evals - report.evaluations
        if budget <= len(x) + 1:
            break
        x_new, run = nelder_mead(objective, x, max_evals=budget, tol=tol)
        report.iterations += run.iterations
        report.evaluations += run.evaluations
        report.trajectory.extend(min(t, report.final_loss) for t in run.trajectory)
        improved = report.final_loss - run.final_loss
        if run.final_loss <= report.final_loss:
            x, report.final_loss = x_new, run.final_loss
        report.converged = run.converged
        if improved <= tol * max(report.final_loss, 1e-12):
            break
    return PeakParams(*(float(v) for v in x.values)), report


# ---------------------------------------------------------------------------
# differentiable rendering


def image_loss_t(rendered: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
    """Sum over zones of the L2 norm of the residual divided by the observed zone maximum."""
    peak = observed.max(dim=-1, keepdim=True).values
    floor = peak[peak > 0].min() if bool((peak > 0).any()) else torch.ones((), dtype=DTYPE)
    peak = torch.where(peak > 0, peak, floor)
    return torch.linalg.vector_norm((rendered - observed) / peak, dim=-1).sum()


def image_loss(rendered, observed) -> float:
    with torch.no_grad():
        return float(image_loss_t(torch.as_tensor(rendered, dtype=DTYPE), torch.as_tensor(observed, dtype=DTYPE)))


def _inputs(values: dict, camera: CameraParams) -> RenderInputs:
    """RenderInputs from a name -> tensor/float mapping, camera constants filling the rest."""
    merged = {k: getattr(camera, k) for k in DIFFERENTIABLE_CAMERA_FIELDS}
    merged.update(values)
    return RenderInputs(**{k: v if isinstance(v, torch.Tensor) else torch.tensor(float(v), dtype=DTYPE)
                           for k, v in merged.items()})


def scene_objective(observed, delta: ReferenceHistogram, camera: CameraParams, seed: int = 0):
    """Torch objective of (theta, z0, phi, albedo, k_s, k_e) for one observed image."""
    obs = torch.as_tensor(np.asarray(observed, dtype=float), dtype=DTYPE)
    rays = zone_rays(camera, seed)
    klen = default_kernel_len(delta, camera.ref_rescale, camera.bin_size, camera.soft_bin_sigma)
    names = GEOMETRY_NAMES + REFLECTANCE_NAMES

    def objective(v: torch.Tensor) -> torch.Tensor:
        x = _inputs(dict(zip(names, v)), camera)
        return image_loss_t(render_t(x, camera, delta, rays, SOFT, klen), obs)

    return objective


def _check_observed(observed) -> np.ndarray:
    obs = np.asarray(observed, dtype=float)
    if obs.ndim != 2 or not np.all(np.isfinite(obs)):
        raise DataError(f"observed image must be a finite 2-D array, got shape {obs.shape}")
    if not np.any(obs > 0):
        raise DegenerateInitError("observed image has no signal")
    return obs


def recover_plane_diffrender(observed, delta: ReferenceHistogram, camera: CameraParams, init: PlaneGeometry,
                             steps: int = DEFAULT_RECOVERY_STEPS, lr: float = DEFAULT_RECOVERY_LR,
                             lr_final: float | None = DEFAULT_RECOVERY_LR_FINAL,
                             init_reflectance: ReflectanceParams = DEFAULT_REFLECTANCE_INIT,
                             seed: int = 0) -> RecoveryResult:
    """Fit plane geometry and reflectance to ``observed`` through the soft renderer."""
    obs = _check_observed(observed)
    init.validate()
    names = GEOMETRY_NAMES + REFLECTANCE_NAMES
    x0 = ParamVector(
        names,
        [init.theta, init.z0, init.phi, init_reflectance.albedo, init_reflectance.k_s, init_reflectance.k_e],
        [RECOVERY_SCALES[n] for n in names],
    )
    objective = scene_objective(obs, delta, camera, seed)
    with torch.no_grad():
        start = render_t(_inputs(dict(zip(names, x0.values)), camera), camera, delta, zone_rays(camera, seed))
    if not bool((start > 0).any()):
        raise DegenerateInitError(f"initial estimate {init} renders an empty image")

    best, report = minimize_adam(objective, x0, steps=steps, lr=lr, bounds=RECOVERY_BOUNDS, lr_final=lr_final)
    geom = PlaneGeometry(best["theta"], best["z0"], best["phi"] % 360.0)
    refl = ReflectanceParams(best["albedo"], best["k_s"], best["k_e"])
    return RecoveryResult(geom, plane_from_geometry(geom), Method.DIFF_RENDER, refl, report)


def recover_albedo(observed, delta: ReferenceHistogram, camera: CameraParams, init: PlaneGeometry,
                   **kwargs) -> float:
    return recover_plane_diffrender(observed, delta, camera, init, **kwargs).reflectance.albedo


def peak_init_geometry(image, params: PeakParams, zones: Sequence[ZoneFov]) -> PlaneGeometry:
    """Peak-based plane converted to (theta, z0, phi), clamped into the recovery bounds."""
    g = geometry_from_plane(recover_plane_peaks(image, params, zones))
    theta = min(max(g.theta, 0.0), RECOVERY_BOUNDS["theta"][1])
    z0 = min(max(g.z0, RECOVERY_BOUNDS["z0"][0]), RECOVERY_BOUNDS["z0"][1])
    return PlaneGeometry(theta, z0, g.phi)


CAMERA_BOUNDS = {
    "gain": (1e-12, None),
    "saturation": (1e-12, None),
    "crosstalk": (0.0, None),
    "ref_rescale": (1e-3, None),
    "bin_offset": (None, None),
    "albedo": (0.0, 1.0),
    "k_s": (0.0, 1.0),
    "k_e": (0.0, 200.0),
}


def _camera_scales(camera: CameraParams) -> dict[str, float]:
    return {
        "gain": camera.gain,
        "saturation": camera.saturation,
        "crosstalk": 0.05,
        "ref_rescale": camera.ref_rescale,
        "bin_offset": camera.bin_size,
        "albedo": REFLECTANCE_SCALE,
        "k_s": REFLECTANCE_SCALE,
        "k_e": RECOVERY_SCALES["k_e"],
    }


def camera_objective(dataset: Sequence[MeasurementRecord], camera: CameraParams, names: Sequence[str],
                     fixed_reflectance: ReflectanceParams, seed: int = 0):
    """Torch objective of the named camera/reflectance members, summed over ``dataset``."""
    rays = zone_rays(camera, seed)
    data = []
    for rec in dataset:
        if rec.truth is None:
            raise DataError(f"record {rec.record_id} has no ground truth")
        data.append((rec.truth, rec.reference, torch.as_tensor(_check_observed(rec.image), dtype=DTYPE)))

    def objective(v: torch.Tensor) -> torch.Tensor:
        free = dict(zip(names, v))
        refl = {k: free.get(k, getattr(fixed_reflectance, k)) for k in REFLECTANCE_NAMES}
        cam = {k: free[k] for k in DIFFERENTIABLE_CAMERA_FIELDS if k in free}
        total = torch.zeros((), dtype=DTYPE)
        for truth, ref, obs in data:
            x = _inputs({"theta": truth.theta, "z0": truth.z0, "phi": truth.phi, **refl, **cam}, camera)
            # headroom for ref_rescale growing during calibration
            klen = default_kernel_len(ref, camera.ref_rescale * 1.5, camera.bin_size, camera.soft_bin_sigma)
            total = total + image_loss_t(render_t(x, camera, ref, rays, SOFT, klen), obs)
        return total

    return objective


def calibrate_camera(dataset: Sequence[MeasurementRecord], init: CameraParams,
                     steps: int = DEFAULT_CALIBRATION_STEPS, lr: float = DEFAULT_CALIBRATION_LR,
                     lr_final: float | None = DEFAULT_CALIBRATION_LR_FINAL,
                     init_reflectance: ReflectanceParams = DEFAULT_REFLECTANCE_INIT,
                     free_camera: Sequence[str] = DIFFERENTIABLE_CAMERA_FIELDS,
                     free_reflectance: Sequence[str] = ("k_s", "k_e"),
                     seed: int = 0) -> tuple[CameraParams, ReflectanceParams, OptimizerReport]:
    """Fit the differentiable camera constants and one shared reflectance to a dataset with known geometry.

    Zone fields of view stay fixed. Albedo is held at ``init_reflectance``
    by default because it enters the image only through its product with the
    gain; freeing both leaves that product, not either factor, identifiable.
    """
    if not dataset:
        raise DataError("calibration dataset is empty")
    bad = [r.record_id for r in dataset if r.truth is None]
    if bad:
        raise DataError(f"records without ground truth: {bad}")
    names = tuple(free_camera) + tuple(free_reflectance)
    unknown = set(names) - set(DIFFERENTIABLE_CAMERA_FIELDS) - set(REFLECTANCE_NAMES)
    if unknown:
        raise DataError(f"cannot calibrate {sorted(unknown)}")
    scales = _camera_scales(init)
    start = {**{k: getattr(init, k) for k in DIFFERENTIABLE_CAMERA_FIELDS},
             **{k: getattr(init_reflectance, k) for k in REFLECTANCE_NAMES}}
    x0 = ParamVector(names, [start[n] for n in names], [scales[n] for n in names])
    objective = camera_objective(dataset, init, names, init_reflectance, seed)
    best, report = minimize_adam(objective, x0, steps=steps, lr=lr, lr_final=lr_final,
                                 bounds={n: CAMERA_BOUNDS[n] for n in names})
    vals = best.as_dict()
    camera = replace(init, **{k: vals[k] for k in free_camera})
    refl = replace(init_reflectance, **{k: vals[k] for k in free_reflectance})
    return camera, refl, report


def dataset_camera_loss(dataset: Sequence[MeasurementRecord], camera: CameraParams,
                        reflectance: ReflectanceParams, seed: int = 0) -> float:
    objective = camera_objective(dataset, camera, (), reflectance, seed)
    with torch.no_grad():
        return float(objective(torch.zeros(0, dtype=DTYPE)))
