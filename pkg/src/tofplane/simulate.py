"""Synthetic measurement generator with known ground truth."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import DataError, InvalidArgumentError
from .forward_model import (
    HARD,
    CameraParams,
    ReferenceHistogram,
    ReflectanceParams,
    render_image,
)
from .geometry import PlaneGeometry

log = logging.getLogger(__name__)

DEFAULT_PULSE_WIDTH_PS = 120.0
DEFAULT_REF_BIN_SIZE_PS = 40.0
DEFAULT_REF_BINS = 64
DEFAULT_PEAK_COUNTS = 50.0
NOISE_NONE, NOISE_POISSON = "none", "poisson"


def synth_reference(width_ps: float = DEFAULT_PULSE_WIDTH_PS, bin_size_ps: float = DEFAULT_REF_BIN_SIZE_PS,
                    num_bins: int = DEFAULT_REF_BINS) -> ReferenceHistogram:
    """Gaussian laser pulse of std ``width_ps`` centered on bin ``num_bins // 2``, unit peak."""
    if num_bins < 1 or not bin_size_ps > 0:
        raise InvalidArgumentError("reference needs num_bins >= 1 and a positive bin size")
    if not width_ps >= 0.1 * bin_size_ps:
        raise InvalidArgumentError(f"pulse width {width_ps} ps is narrower than 0.1 bin")
    t = (np.arange(num_bins) - num_bins // 2) * bin_size_ps
    bins = np.exp(-0.5 * (t / width_ps) ** 2)
    return ReferenceHistogram(bins / bins.max(), bin_size_ps)


@dataclass
class MeasurementRecord:
    """One transient image plus its reference pulse and optional ground truth."""

    record_id: str
    image: np.ndarray  # (9, num_bins)
    reference: ReferenceHistogram
    truth: PlaneGeometry | None = None
    reflectance: ReflectanceParams | None = None
    meta: dict = field(default_factory=dict)

    @property
    def has_truth(self) -> bool:
        return self.truth is not None

    def __eq__(self, other):
        if not isinstance(other, MeasurementRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and self.reference == other.reference
            and self.truth == other.truth
            and self.reflectance == other.reflectance
            and self.meta == other.meta
        )


def add_poisson_noise(image: np.ndarray, peak_counts: float, rng: np.random.Generator) -> np.ndarray:
    """Shot noise with the image scaled so its maximum bin expects ``peak_counts`` photons."""
    peak = float(np.max(image))
    if peak <= 0:
        return image.copy()
    scale = peak_counts / peak
    return rng.poisson(image * scale).astype(float) / scale


def simulate_measurement(g: PlaneGeometry, f: ReflectanceParams, c: CameraParams, delta: ReferenceHistogram,
                         noise: str = NOISE_NONE, seed: int = 0, peak_counts: float = DEFAULT_PEAK_COUNTS,
                         record_id: str = "0", mode: str = HARD, camera_id: str = "") -> MeasurementRecord:
    """Render one measurement; ``seed`` drives both the ray set and the noise."""
    image = render_image(g, f, c, delta, seed=seed, mode=mode)
    if noise == NOISE_POISSON:
        image = add_poisson_noise(image, peak_counts, np.random.default_rng([seed, 0x5EED]))
    elif noise != NOISE_NONE:
        raise InvalidArgumentError(f"unknown noise model {noise!r}")
    meta = {"seed": int(seed), "noise": noise, "render_mode": mode, "camera_id": camera_id}
    if noise == NOISE_POISSON:
        meta["peak_counts"] = float(peak_counts)
    return MeasurementRecord(record_id, image, delta, g, f, meta)


@dataclass(frozen=True)
class SweepSpec:
    """Cartesian sweep of plane poses. Ranges are (min, max, count), inclusive."""

    theta_range: tuple[float, float, int] = (0.0, 30.0, 4)
    z0_range: tuple[float, float, int] = (0.05, 0.30, 4)
    phi_range: tuple[float, float, int] = (0.0, 270.0, 4)
    reflectance: ReflectanceParams = field(default_factory=lambda: ReflectanceParams(0.6, 0.05, 20.0))
    noise: str = NOISE_NONE
    peak_counts: float = DEFAULT_PEAK_COUNTS
    seed: int = 0
    pulse_width_ps: float = DEFAULT_PULSE_WIDTH_PS
    render_mode: str = HARD

    def validate(self) -> None:
        for name in ("theta_range", "z0_range", "phi_range"):
            lo, hi, n = getattr(self, name)
            if int(n) != n or n < 1:
                raise DataError(f"{name}: count must be a positive integer, got {n}")
            if hi < lo:
                raise DataError(f"{name}: max {hi} is below min {lo}")
        if not (0.0 <= self.theta_range[0] and self.theta_range[1] < 90.0):
            raise DataError("theta_range must lie in [0, 90)")
        if not self.z0_range[0] > 0:
            raise DataError("z0_range must be positive")
        if self.noise not in (NOISE_NONE, NOISE_POISSON):
            raise DataError(f"noise must be 'none' or 'poisson', got {self.noise!r}")
        self.reflectance.validate()

    @property
    def count(self) -> int:
        return int(self.theta_range[2] * self.z0_range[2] * self.phi_range[2])

    def poses(self) -> Iterator[PlaneGeometry]:
        """Theta-major, then z0, then phi."""
        axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in (self.theta_range, self.z0_range, self.phi_range)]
        for th, z0, ph in itertools.product(*axes):
            yield PlaneGeometry(float(th), float(z0), float(ph) % 360.0)


class SinkWriteError(DataError):
    def __init__(self, message, written: int):
        super().__init__(f"{message} (after {written} records)")
        self.written = written


def generate_dataset(spec: SweepSpec, c: CameraParams, out: Callable[[MeasurementRecord], object],
                     reference: ReferenceHistogram | None = None, camera_id: str = "") -> int:
    """Stream one record per sweep pose to ``out`` in sweep order; returns the count."""
    spec.validate()
    delta = reference if reference is not None else synth_reference(spec.pulse_width_ps)
    written = 0
    for i, g in enumerate(spec.poses()):
        rec = simulate_measurement(g, spec.reflectance, c, delta, noise=spec.noise,
                                   seed=spec.seed * 1_000_003 + i, peak_counts=spec.peak_counts,
                                   record_id=f"{i:06d}", mode=spec.render_mode, camera_id=camera_id)
        try:
            out(rec)
        except OSError as exc:
            raise SinkWriteError(f"sink write failed: {exc}", written) from exc
        written += 1
    log.info("generated %d records", written)
    return written


def random_poses(n: int, rng: np.random.Generator, theta=(0.0, 30.0), z0=(0.05, 0.30),
                 phi=(0.0, 360.0)) -> list[PlaneGeometry]:
    """Independent uniform draws of plane poses."""
    return [
        PlaneGeometry(float(rng.uniform(*theta)), float(rng.uniform(*z0)), float(rng.uniform(*phi)) % 360.0)
        for _ in range(n)
    ]


