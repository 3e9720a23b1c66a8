"""Error metrics over recovery results, aggregated and bucketed for reporting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, MetricUndefinedError
from .geometry import ImplicitPlane, angular_error, linear_error, plane_from_geometry, point_error
from .simulate import MeasurementRecord

THETA_BUCKET_DEG = 5.0
Z0_BUCKET_M = 0.054
METRICS = ("angular_error_deg", "linear_error_mm", "point_error_mm")


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Smallest value with at least ``pct`` percent of the data at or below it."""
    xs = sorted(values)
    if not xs:
        return math.nan
    rank = max(1, math.ceil(pct / 100.0 * len(xs)))
    return float(xs[rank - 1])


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    median: float
    p95: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "Summary":
        v = [float(x) for x in values]
        if not v:
            return cls(0, math.nan, math.nan, math.nan)
        return cls(len(v), float(np.mean(v)), float(np.median(v)), nearest_rank(v, 95))


@dataclass
class RecordErrors:
    record_id: str
    method: str
    theta_deg: float
    z0_m: float
    phi_deg: float
    ok: bool
    angular_error_deg: float = math.nan
    linear_error_mm: float = math.nan
    point_error_mm: float = math.nan
    true_albedo: float = math.nan
    albedo: float = math.nan
    error: str = ""


@dataclass
class EvaluationReport:
    records: list[RecordErrors] = field(default_factory=list)

    @property
    def succeeded(self) -> list[RecordErrors]:
        return [r for r in self.records if r.ok]

    def aggregate(self, metric: str) -> Summary:
        return Summary.of([getattr(r, metric) for r in self.succeeded])

    def buckets(self, key: str, width: float) -> list[tuple[float, Summary]]:
        """Point-error summary per bucket ``[k*width, (k+1)*width)`` of ``key``, keyed by bucket center."""
        groups: dict[int, list[float]] = {}
        for r in self.succeeded:
            k = int(math.floor(getattr(r, key) / width + 1e-9))
            groups.setdefault(k, []).append(r.point_error_mm)
        return [((k + 0.5) * width, Summary.of(groups[k])) for k in sorted(groups)]

    def write_csvs(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        method = self.records[0].method if self.records else ""
        paths = []

        def write(name, header, rows):
            p = out / name
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows([[_fmt(v) for v in row] for row in rows])
            paths.append(p)

        failed = len(self.records) - len(self.succeeded)
        write("table1.csv", ["method", "metric", "n", "failed", "mean", "median", "p95"],
              [[method, m, s.n, failed, s.mean, s.median, s.p95] for m in METRICS for s in [self.aggregate(m)]])
        write("fig4_aoi_buckets.csv", ["theta_center_deg", "n", "mean_mm", "median_mm", "p95_mm"],
              [[c, s.n, s.mean, s.median, s.p95] for c, s in self.buckets("theta_deg", THETA_BUCKET_DEG)])
        write("fig5_dist_buckets.csv", ["z0_center_m", "n", "mean_mm", "median_mm", "p95_mm"],
              [[c, s.n, s.mean, s.median, s.p95] for c, s in self.buckets("z0_m", Z0_BUCKET_M)])
        write("fig7_albedo.csv", ["id", "true_albedo", "albedo", "theta_deg", "z0_m"],
              [[r.record_id, r.true_albedo, r.albedo, r.theta_deg, r.z0_m]
               for r in self.succeeded if not math.isnan(r.albedo)])
        write("per_record.csv", ["id", "method", "ok", "theta_deg", "z0_m", "phi_deg", *METRICS, "albedo", "error"],
              [[r.record_id, r.method, int(r.ok), r.theta_deg, r.z0_m, r.phi_deg, r.angular_error_deg,
                r.linear_error_mm, r.point_error_mm, r.albedo, r.error] for r in self.records])
        return paths


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def evaluate(results: Sequence[dict], dataset: Sequence[MeasurementRecord]) -> EvaluationReport:
    """Per-record errors of ``results`` (dicts as written by the recover command) against ``dataset`` truth."""
    by_id = {r.record_id: r for r in dataset}
    result_ids = [r["id"] for r in results]
    orphans = sorted(set(result_ids) - set(by_id)) + sorted(set(by_id) - set(result_ids))
    if orphans:
        raise DataError(f"results and dataset do not align; orphan ids: {orphans}")
    report = EvaluationReport()
    for res in results:
        rec = by_id[res["id"]]
        if rec.truth is None:
            raise DataError(f"record {rec.record_id} has no ground truth")
        g = rec.truth
        row = RecordErrors(rec.record_id, str(res.get("method", "")), g.theta, g.z0, g.phi, bool(res["ok"]),
                           true_albedo=rec.reflectance.albedo if rec.reflectance else math.nan)
        if not row.ok:
            row.error = str(res.get("error") or "recovery failed")
            report.records.append(row)
            continue
        truth = plane_from_geometry(g)
        est = ImplicitPlane(np.asarray(res["normal"], dtype=float), float(res["d_m"]))
        try:
            row.point_error_mm = 1e3 * point_error(est, truth)
        except MetricUndefinedError as exc:
            row.ok, row.error = False, str(exc)
            report.records.append(row)
            continue
        row.angular_error_deg = angular_error(est, truth)
        row.linear_error_mm = 1e3 * linear_error(est, truth)
        row.albedo = float(res["albedo"]) if "albedo" in res else math.nan
        report.records.append(row)
    return report
