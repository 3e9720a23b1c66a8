"""On-disk formats.

* measurement files: JSON Lines, one record per line;
* camera / peak parameter files: one JSON object with units in the keys and a
  ``format_version``;
* sweep specs: one JSON object;
* recovery results: JSON Lines, one result per record.

Floats are written with ``repr`` precision so every value round-trips exactly.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import IO, Iterator

import numpy as np

from .errors import DataError
from .forward_model import CameraParams, ReferenceHistogram, ReflectanceParams
from .geometry import PlaneGeometry, ZoneFov, ZoneKind
from .recovery import PeakParams
from .simulate import MeasurementRecord, SweepSpec

FORMAT_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _require(d: dict, key: str, where: str, kind=(int, float)):
    if not isinstance(d, dict):
        raise DataError(f"{where}: expected an object")
    if key not in d:
        raise DataError(f"{where}: missing field '{key}'")
    v = d[key]
    if kind is not None and (not isinstance(v, kind) or (isinstance(v, bool) and kind is not bool)):
        raise DataError(f"{where}: field '{key}' has the wrong type ({type(v).__name__})")
    return v


def _load_json(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{path}:1: expected a JSON object")
    return obj


def _check_version(obj: dict, where: str, kind: str) -> None:
    v = obj.get("format_version")
    if v != FORMAT_VERSION:
        raise DataError(f"{where}: unsupported format_version {v!r} (expected {FORMAT_VERSION})")
    if obj.get("kind") != kind:
        raise DataError(f"{where}: field 'kind' must be {kind!r}, got {obj.get('kind')!r}")


# ---------------------------------------------------------------------------
# reflectance / truth blocks


def reflectance_to_dict(f: ReflectanceParams) -> dict:
    return {"albedo": float(f.albedo), "k_s": float(f.k_s), "k_e": float(f.k_e)}


def reflectance_from_dict(d: dict, where: str = "reflectance") -> ReflectanceParams:
    f = ReflectanceParams(*(float(_require(d, k, where)) for k in ("albedo", "k_s", "k_e")))
    try:
        f.validate()
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from exc
    return f


def _truth_to_dict(g: PlaneGeometry, f: ReflectanceParams | None) -> dict:
    d = {"theta_deg": float(g.theta), "z0_m": float(g.z0), "phi_deg": float(g.phi)}
    if f is not None:
        d.update(reflectance_to_dict(f))
    return d


def _truth_from_dict(d: dict, where: str) -> tuple[PlaneGeometry, ReflectanceParams | None]:
    g = PlaneGeometry(*(float(_require(d, k, where)) for k in ("theta_deg", "z0_m", "phi_deg")))
    try:
        g.validate()
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from exc
    f = reflectance_from_dict(d, where) if "albedo" in d else None
    return g, f


# ---------------------------------------------------------------------------
# measurement records


def record_to_dict(rec: MeasurementRecord) -> dict:
    return {
        "id": rec.record_id,
        "histograms": [[float(v) for v in h] for h in rec.image],
        "reference": {"bins": [float(v) for v in rec.reference.bins], "bin_size_ps": rec.reference.bin_size},
        "truth": None if rec.truth is None else _truth_to_dict(rec.truth, rec.reflectance),
        "meta": rec.meta,
    }


def record_from_dict(d: dict, where: str = "record") -> MeasurementRecord:
    rid = _require(d, "id", where, str)
    hists = _require(d, "histograms", where, list)
    try:
        image = np.array(hists, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: field 'histograms' is not a numeric matrix") from exc
    if image.ndim != 2 or image.shape[0] != 9:
        raise DataError(f"{where}: field 'histograms' must hold 9 equal-length arrays, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or np.any(image < 0):
        raise DataError(f"{where}: histogram values must be finite and nonnegative")
    ref_d = _require(d, "reference", where, dict)
    ref = ReferenceHistogram(np.array(_require(ref_d, "bins", f"{where}.reference", list), dtype=float),
                             float(_require(ref_d, "bin_size_ps", f"{where}.reference")))
    try:
        ref.validate()
    except ValueError as exc:
        raise DataError(f"{where}.reference: {exc}") from exc
    truth = d.get("truth")
    g, f = (None, None) if truth is None else _truth_from_dict(truth, f"{where}.truth")
    meta = d.get("meta", {})
    if not isinstance(meta, dict):
        raise DataError(f"{where}: field 'meta' must be an object")
    return MeasurementRecord(rid, image, ref, g, f, meta)


def write_record(fh: IO[str], rec: MeasurementRecord) -> None:
    fh.write(_dumps(record_to_dict(rec)) + "\n")


def iter_records(path: str | Path) -> Iterator[MeasurementRecord]:
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON: {exc.msg}") from exc
            yield record_from_dict(obj, where)


def read_records(path: str | Path) -> list[MeasurementRecord]:
    return list(iter_records(path))


def write_records(path: str | Path, records) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            write_record(fh, rec)
            n += 1
    return n


# ---------------------------------------------------------------------------
# camera / peak parameters

_CAMERA_KEYS = {
    "num_bins": "num_bins",
    "bin_size_ps": "bin_size",
    "bin_offset_ps": "bin_offset",
    "gain": "gain",
    "saturation_counts": "saturation",
    "crosstalk": "crosstalk",
    "ref_rescale": "ref_rescale",
    "rays_per_zone": "rays_per_zone",
    "soft_bin_sigma_bins": "soft_bin_sigma",
}


def camera_to_dict(c: CameraParams, reflectance: ReflectanceParams | None = None) -> dict:
    d = {"format_version": FORMAT_VERSION, "kind": "camera"}
    d.update({k: getattr(c, attr) for k, attr in _CAMERA_KEYS.items()})
    d["zones"] = [
        {"center_x_deg": z.center_x, "center_y_deg": z.center_y, "width_deg": z.width,
         "height_deg": z.height, "kind": ZoneKind(z.kind).value}
        for z in c.zones
    ]
    if reflectance is not None:
        d["reflectance"] = reflectance_to_dict(reflectance)
    return d


def camera_from_dict(d: dict, where: str = "camera") -> tuple[CameraParams, ReflectanceParams | None]:
    _check_version(d, where, "camera")
    vals = {}
    for key, attr in _CAMERA_KEYS.items():
        v = _require(d, key, where)
        vals[attr] = int(v) if attr in ("num_bins", "rays_per_zone") else float(v)
        if attr in ("num_bins", "rays_per_zone") and v != int(v):
            raise DataError(f"{where}: field '{key}' must be an integer")
    zones = []
    for j, z in enumerate(_require(d, "zones", where, list)):
        zw = f"{where}.zones[{j}]"
        try:
            kind = ZoneKind(_require(z, "kind", zw, str))
        except ValueError as exc:
            raise DataError(f"{zw}: field 'kind' must be center, edge or corner") from exc
        zones.append(ZoneFov(*(float(_require(z, k, zw)) for k in
                               ("center_x_deg", "center_y_deg", "width_deg", "height_deg")), kind))
    cam = CameraParams(zones=tuple(zones), **vals)
    try:
        cam.validate()
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from exc
    refl = reflectance_from_dict(d["reflectance"], f"{where}.reflectance") if "reflectance" in d else None
    return cam, refl


def save_camera(path: str | Path, c: CameraParams, reflectance: ReflectanceParams | None = None) -> None:
    Path(path).write_text(json.dumps(camera_to_dict(c, reflectance), indent=2) + "\n")


def load_camera(path: str | Path) -> tuple[CameraParams, ReflectanceParams | None]:
    return camera_from_dict(_load_json(path), str(path))


_PEAK_KEYS = {
    "slope_m_per_bin": "slope_m",
    "intercept_m": "intercept_b",
    "edge_scale": "edge_scale",
    "corner_scale": "corner_scale",
}


def peaks_to_dict(p: PeakParams) -> dict:
    d = {"format_version": FORMAT_VERSION, "kind": "peaks"}
    d.update({k: getattr(p, attr) for k, attr in _PEAK_KEYS.items()})
    return d


def peaks_from_dict(d: dict, where: str = "peaks") -> PeakParams:
    _check_version(d, where, "peaks")
    p = PeakParams(**{attr: float(_require(d, k, where)) for k, attr in _PEAK_KEYS.items()})
    p.validate()
    return p


def save_peaks(path: str | Path, p: PeakParams) -> None:
    Path(path).write_text(json.dumps(peaks_to_dict(p), indent=2) + "\n")


def load_peaks(path: str | Path) -> PeakParams:
    return peaks_from_dict(_load_json(path), str(path))


# ---------------------------------------------------------------------------
# sweep specs


def _range(d: dict, key: str, where: str) -> tuple[float, float, int]:
    v = _require(d, key, where, list)
    if len(v) != 3 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise DataError(f"{where}: field '{key}' must be [min, max, count]")
    if v[2] != int(v[2]) or v[2] < 1:
        raise DataError(f"{where}: field '{key}' count must be a positive integer")
    return float(v[0]), float(v[1]), int(v[2])


def sweep_to_dict(s: SweepSpec) -> dict:
    return {
        "theta_deg": list(s.theta_range),
        "z0_m": list(s.z0_range),
        "phi_deg": list(s.phi_range),
        "reflectance": reflectance_to_dict(s.reflectance),
        "noise": s.noise,
        "peak_counts": s.peak_counts,
        "seed": s.seed,
        "pulse_width_ps": s.pulse_width_ps,
        "render_mode": s.render_mode,
    }


def sweep_from_dict(d: dict, where: str = "spec") -> SweepSpec:
    defaults = SweepSpec()
    kw = dict(
        theta_range=_range(d, "theta_deg", where),
        z0_range=_range(d, "z0_m", where),
        phi_range=_range(d, "phi_deg", where),
    )
    if "reflectance" in d:
        kw["reflectance"] = reflectance_from_dict(d["reflectance"], f"{where}.reflectance")
    for key, kind in (("noise", str), ("render_mode", str), ("seed", int),
                      ("peak_counts", (int, float)), ("pulse_width_ps", (int, float))):
        if key in d:
            kw[key] = _require(d, key, where, kind)
    unknown = set(d) - set(sweep_to_dict(defaults))
    if unknown:
        raise DataError(f"{where}: unknown field(s) {sorted(unknown)}")
    spec = SweepSpec(**kw)
    try:
        spec.validate()
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from exc
    if spec.render_mode not in ("hard", "soft"):
        raise DataError(f"{where}: field 'render_mode' must be 'hard' or 'soft'")
    if not (spec.peak_counts > 0 and spec.pulse_width_ps > 0):
        raise DataError(f"{where}: fields 'peak_counts' and 'pulse_width_ps' must be positive")
    return spec


def load_sweep(path: str | Path) -> SweepSpec:
    return sweep_from_dict(_load_json(path), str(path))


# ---------------------------------------------------------------------------
# recovery results


def result_line(record_id: str, method: str, result=None, error: str | None = None) -> str:
    d = {"id": record_id, "method": method, "ok": result is not None, "error": error}
    if result is not None:
        g = result.geometry
        d.update({"theta_deg": g.theta, "z0_m": g.z0, "phi_deg": g.phi,
                  "normal": [float(v) for v in result.plane.a], "d_m": result.plane.d})
        if result.reflectance is not None:
            d.update(reflectance_to_dict(result.reflectance))
        if result.report is not None:
            d.update({"final_loss": result.report.final_loss, "iterations": result.report.iterations})
    return _dumps(d)


def read_results(path: str | Path) -> list[dict]:
    out = []
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            where = f"{path}:{lineno}"
            _require(d, "id", where, str)
            if _require(d, "ok", where, bool):
                a = np.array(_require(d, "normal", where, list), dtype=float)
                if a.shape != (3,) or not math.isclose(float(np.linalg.norm(a)), 1.0, abs_tol=1e-6):
                    raise DataError(f"{where}: field 'normal' must be a unit 3-vector")
                _require(d, "d_m", where)
            out.append(d)
    return out
