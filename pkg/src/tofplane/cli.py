"""Command-line entry point: simulate, calibrate, recover, evaluate, render.

Settings resolve in order: built-in defaults, then the ``--config`` JSON file,
then ``TOFPLANE_<KEY>`` environment variables, then command-line flags.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .errors import (
    ConfigError,
    DataError,
    EvaluationError,
    InvalidArgumentError,
    InvalidGeometryError,
    InvalidReferenceError,
    TofPlaneError,
)
from .evaluation import METRICS, evaluate
from .formats import (
    iter_records,
    load_camera,
    load_peaks,
    load_sweep,
    read_records,
    read_results,
    result_line,
    save_camera,
    save_peaks,
    write_record,
)
from .forward_model import HARD, SOFT, CameraParams, ReflectanceParams, render_image
from .geometry import PlaneGeometry, geometry_from_plane
from .recovery import (
    DEFAULT_CALIBRATION_LR,
    DEFAULT_CALIBRATION_LR_FINAL,
    DEFAULT_CALIBRATION_STEPS,
    DEFAULT_RECOVERY_LR,
    DEFAULT_RECOVERY_LR_FINAL,
    DEFAULT_RECOVERY_STEPS,
    DEFAULT_REFLECTANCE_INIT,
    RECOVERY_BOUNDS,
    Method,
    RecoveryResult,
    calibrate_camera,
    calibrate_peaks,
    dataset_camera_loss,
    naive_peak_params,
    peak_init_geometry,
    peak_objective,
    recover_plane_diffrender,
    recover_plane_peaks,
)
from .simulate import DEFAULT_PULSE_WIDTH_PS, generate_dataset, synth_reference

log = logging.getLogger("tofplane")

ENV_PREFIX = "TOFPLANE_"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class RunConfig:
    """Every setting a command may read. ``None`` means "use the command's default"."""

    camera: str | None = None
    peaks: str | None = None
    method: str = Method.DIFF_RENDER.value
    steps: int | None = None
    lr: float | None = None
    lr_final: float | None = None
    tol: float = 1e-7
    max_evals: int = 3000
    seed: int | None = None  # None: command default (0, or the sweep spec's own seed)
    threads: int = 1
    init_perturb: str | None = None
    verbose: bool = False

    def validate(self) -> None:
        if self.method not in {m.value for m in Method}:
            raise ConfigError(f"method must be one of {[m.value for m in Method]}, got {self.method!r}")
        for name in ("camera", "peaks"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name} file not found: {path}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.max_evals < 1 or not self.tol > 0:
            raise ConfigError("max_evals must be >= 1 and tol positive")
        if self.init_perturb is not None:
            perturbation(self.init_perturb)


def _coerce(name: str, raw, where: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = kinds[name]
    try:
        if raw is None:
            return None
        if "bool" in kind:
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off", ""):
                return False
            raise ValueError(raw)
        if "int" in kind:
            if isinstance(raw, float) and raw != int(raw):
                raise ValueError(raw)
            return int(raw)
        if "float" in kind:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: invalid value {raw!r} for '{name}'") from exc


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values = {}
    if getattr(args, "config", None):
        try:
            obj = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        names = {f.name for f in fields(RunConfig)}
        for k, v in obj.items():
            if k not in names:
                raise ConfigError(f"{args.config}: unknown config key '{k}'")
            values[k] = _coerce(k, v, args.config)
    for f in fields(RunConfig):
        env = environ.get(ENV_PREFIX + f.name.upper())
        if env is not None:
            values[f.name] = _coerce(f.name, env, ENV_PREFIX + f.name.upper())
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def perturbation(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"init_perturb must be 'dtheta,dz0,dphi', got {text!r}") from exc
    if len(parts) != 3:
        raise ConfigError(f"init_perturb must be 'dtheta,dz0,dphi', got {text!r}")
    return parts


def _camera(cfg: RunConfig) -> tuple[CameraParams, ReflectanceParams | None]:
    return load_camera(cfg.camera) if cfg.camera else (CameraParams(), None)


def _camera_id(cfg: RunConfig) -> str:
    return Path(cfg.camera).name if cfg.camera else "default"


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: RunConfig, out=None) -> int:
    spec = load_sweep(args.spec)
    camera, _ = _camera(cfg)
    if cfg.seed is not None:
        spec = replace(spec, seed=cfg.seed)
    with open(args.out, "w") as fh:
        n = generate_dataset(spec, camera, lambda rec: write_record(fh, rec), camera_id=_camera_id(cfg))
    print(f"{n} record{'s' if n != 1 else ''} written", file=out)
    return n


def _require_truth(dataset) -> None:
    bad = [r.record_id for r in dataset if r.truth is None]
    if bad:
        raise DataError(f"calibration needs ground truth; records without it: {bad[:10]}")


def cmd_calibrate(args, cfg: RunConfig, out=None):
    dataset = read_records(args.dataset)
    if not dataset:
        raise DataError(f"{args.dataset}: dataset is empty")
    _require_truth(dataset)
    camera, refl = _camera(cfg)
    if args.mode == "peaks":
        init = load_peaks(args.init) if args.init else naive_peak_params(camera)
        before = peak_objective(dataset, init, camera.zones)
        params, report = calibrate_peaks(dataset, init, camera.zones, max_evals=cfg.max_evals, tol=cfg.tol)
        after = report.final_loss
        save_peaks(args.out, params)
    else:
        if args.init:
            camera, refl = load_camera(args.init)
        refl = refl or DEFAULT_REFLECTANCE_INIT
        before = dataset_camera_loss(dataset, camera, refl, cfg.seed or 0)
        camera_out, refl_out, report = calibrate_camera(
            dataset, camera,
            steps=cfg.steps or DEFAULT_CALIBRATION_STEPS,
            lr=cfg.lr or DEFAULT_CALIBRATION_LR,
            lr_final=cfg.lr_final or DEFAULT_CALIBRATION_LR_FINAL,
            init_reflectance=refl, seed=cfg.seed or 0)
        after = report.final_loss
        if after > before:  # Adam keeps the best iterate, and the start is one of them
            camera_out, refl_out, after = camera, refl, before
        save_camera(args.out, camera_out, refl_out)
    print(f"objective before: {before!r}", file=out)
    print(f"objective after: {after!r}", file=out)
    return before, after


def _recover_one(rec, method: Method, camera: CameraParams, peaks, cfg: RunConfig) -> RecoveryResult:
    if method is not Method.DIFF_RENDER:
        plane = recover_plane_peaks(rec.image, peaks, camera.zones)
        return RecoveryResult(geometry_from_plane(plane), plane, method)
    if cfg.init_perturb is not None:
        if rec.truth is None:
            raise DataError("init_perturb needs ground truth in the dataset")
        dt, dz, dp = perturbation(cfg.init_perturb)
        g = rec.truth
        init = PlaneGeometry(min(max(g.theta + dt, 0.0), RECOVERY_BOUNDS["theta"][1]),
                             min(max(g.z0 + dz, RECOVERY_BOUNDS["z0"][0]), RECOVERY_BOUNDS["z0"][1]),
                             (g.phi + dp) % 360.0)
    else:
        init = peak_init_geometry(rec.image, peaks, camera.zones)
    return recover_plane_diffrender(
        rec.image, rec.reference, camera, init,
        steps=cfg.steps or DEFAULT_RECOVERY_STEPS,
        lr=cfg.lr or DEFAULT_RECOVERY_LR,
        lr_final=cfg.lr_final or DEFAULT_RECOVERY_LR_FINAL,
        seed=cfg.seed or 0)


def cmd_recover(args, cfg: RunConfig, out=None) -> tuple[int, int]:
    method = Method(cfg.method)
    camera, _ = _camera(cfg)
    if method is Method.PEAK_CALIBRATED and cfg.peaks is None:
        raise ConfigError("method peak-calibrated needs --peaks")
    peaks = load_peaks(cfg.peaks) if (cfg.peaks and method is not Method.PEAK_NAIVE) else naive_peak_params(camera)

    def work(rec) -> tuple[str, bool]:
        try:
            res = _recover_one(rec, method, camera, peaks, cfg)
        except (TofPlaneError, ArithmeticError) as exc:
            log.warning("record %s failed: %s", rec.record_id, exc)
            return result_line(rec.record_id, method.value, error=f"{type(exc).__name__}: {exc}"), False
        return result_line(rec.record_id, method.value, res), True

    ok = failed = 0
    records = iter_records(args.dataset)
    with open(args.out, "w") as fh, ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        # map() yields in submission order whatever the completion order
        for line, success in pool.map(work, records):
            fh.write(line + "\n")
            ok += success
            failed += not success
    print(f"{ok} recovered, {failed} failed", file=out)
    return ok, failed


def cmd_evaluate(args, cfg: RunConfig, out=None):
    report = evaluate(read_results(args.results), read_records(args.dataset))
    report.write_csvs(args.out)
    for m in METRICS:
        s = report.aggregate(m)
        print(f"{m}: n={s.n} mean={s.mean:.6g} median={s.median:.6g} p95={s.p95:.6g}", file=out)
    return report


def cmd_render(args, cfg: RunConfig, out=None) -> np.ndarray:
    camera, refl = _camera(cfg)
    refl = ReflectanceParams(
        args.albedo if args.albedo is not None else (refl or ReflectanceParams()).albedo,
        args.k_s if args.k_s is not None else (refl or ReflectanceParams()).k_s,
        args.k_e if args.k_e is not None else (refl or ReflectanceParams()).k_e,
    )
    g = PlaneGeometry(args.theta, args.z0, args.phi)
    image = render_image(g, refl, camera, synth_reference(args.pulse_width), seed=cfg.seed or 0, mode=args.mode)
    fh = open(args.out, "w", newline="") if args.out else (out or sys.stdout)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["zone"] + [f"bin{i}" for i in range(image.shape[1])])
        for j, row in enumerate(image):
            w.writerow([j] + [repr(float(v)) for v in row])
    finally:
        if args.out:
            fh.close()
    return image


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--config", help="JSON file of config keys")
    common.add_argument("--threads", type=int, help="worker threads for recover (default 1)")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--camera", help="camera params file (default: built-in camera)")

    p = _Parser(prog="tofplane", description="Transient-histogram plane recovery toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset from a sweep spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)

    c = sub.add_parser("calibrate", parents=[common], help="fit camera or peak parameters to ground truth")
    c.add_argument("mode", choices=("camera", "peaks"))
    c.add_argument("--dataset", required=True)
    c.add_argument("--init", help="initial params file (camera or peaks format)")
    c.add_argument("--out", required=True)
    c.add_argument("--steps", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--lr-final", dest="lr_final", type=float)
    c.add_argument("--tol", type=float)
    c.add_argument("--max-evals", dest="max_evals", type=int)

    r = sub.add_parser("recover", parents=[common], help="recover one plane per record")
    r.add_argument("--dataset", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--method", choices=[m.value for m in Method])
    r.add_argument("--peaks", help="calibrated peak params file")
    r.add_argument("--steps", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--lr-final", dest="lr_final", type=float)
    r.add_argument("--init-perturb", dest="init_perturb",
                   help="start diff-render at truth + 'dtheta_deg,dz0_m,dphi_deg' instead of the peak estimate")

    e = sub.add_parser("evaluate", parents=[common], help="error metrics and report tables")
    e.add_argument("--results", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True, help="output directory for the CSV tables")

    d = sub.add_parser("render", parents=[common], help="forward-render one pose as CSV")
    d.add_argument("--theta", type=float, required=True, help="degrees")
    d.add_argument("--z0", type=float, required=True, help="meters")
    d.add_argument("--phi", type=float, default=0.0, help="degrees")
    d.add_argument("--albedo", type=float)
    d.add_argument("--k-s", dest="k_s", type=float)
    d.add_argument("--k-e", dest="k_e", type=float)
    d.add_argument("--mode", choices=(HARD, SOFT), default=HARD)
    d.add_argument("--pulse-width", dest="pulse_width", type=float, default=DEFAULT_PULSE_WIDTH_PS, help="ps")
    d.add_argument("--out", help="CSV path (default stdout)")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "recover": cmd_recover,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def main(argv=None, environ=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("a command is required: " + ", ".join(COMMANDS))
        cfg = resolve_config(args, environ)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if cfg.threads > 1:
        torch.set_num_threads(1)  # parallelism comes from the record pool instead
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvaluationError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, InvalidArgumentError, InvalidGeometryError, InvalidReferenceError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TofPlaneError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
