"""Shared builders for tests."""

import numpy as np

from tofplane.geometry import default_zones, intersect, plane_from_geometry
from tofplane.simulate import MeasurementRecord, synth_reference


def exact_peak_image(g, m0, b0, zones=None, width_bins=1.5, num_bins=128):
    """Image whose zone-j histogram peaks at (range along zone center - b0) / m0.

    This is the peak model with unit angle scales, so calibration on such
    images has (m0, b0, 1, 1) as its exact answer.
    """
    zones = default_zones() if zones is None else zones
    p = plane_from_geometry(g)
    x = np.arange(num_bins, dtype=float)
    img = np.zeros((len(zones), num_bins))
    for j, z in enumerate(zones):
        r = np.linalg.norm(intersect(z.center_direction(), p))
        img[j] = np.exp(-0.5 * ((x - (r - b0) / m0) / width_bins) ** 2)
    return img


def exact_peak_dataset(poses, m0, b0):
    ref = synth_reference()
    return [MeasurementRecord(f"{i:06d}", exact_peak_image(g, m0, b0), ref, g) for i, g in enumerate(poses)]


ACCEPTANCE_LINES: list[str] = []


def report(number: int, name: str, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
