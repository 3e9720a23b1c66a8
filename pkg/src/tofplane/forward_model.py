"""Transient-image forward model.

Renders the nine zone histograms of a planar scene: Phong shading, SPAD
saturation, hard or Gaussian soft binning, cross-correlation with the
temporally rescaled reference pulse, and inter-zone crosstalk.

The core is written against float64 torch tensors so that the soft mode can
be differentiated with autograd; the public functions accept and return
numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidArgumentError, InvalidReferenceError
from .geometry import (
    ImplicitPlane,
    PlaneGeometry,
    ZoneFov,
    ZoneKind,
    default_zones,
    sample_zone_rays,
    validate_zone_layout,
)

C_LIGHT_M_PER_PS = 299_792_458.0 * 1e-12
DTYPE = torch.float64
HARD, SOFT = "hard", "soft"


def bin_distance(bin_size_ps: float) -> float:
    """Range (meters) spanned by one bin of round-trip time."""
    return bin_size_ps * C_LIGHT_M_PER_PS / 2.0


@dataclass(frozen=True)
class ReflectanceParams:
    albedo: float = 0.5
    k_s: float = 0.1
    k_e: float = 10.0

    def validate(self) -> None:
        if not 0.0 <= self.albedo <= 1.0:
            raise InvalidArgumentError(f"albedo must be in [0, 1], got {self.albedo}")
        if not 0.0 <= self.k_s <= 1.0:
            raise InvalidArgumentError(f"k_s must be in [0, 1], got {self.k_s}")
        if not self.k_e >= 0.0:
            raise InvalidArgumentError(f"k_e must be >= 0, got {self.k_e}")


@dataclass(frozen=True)
class CameraParams:
    """Every constant of the forward model.

    Times are picoseconds. ``soft_bin_sigma`` is in bin widths.
    """

    num_bins: int = 128
    bin_size: float = 80.0
    bin_offset: float = 0.0
    gain: float = 0.01
    saturation: float = 1.0
    crosstalk: float = 0.02
    ref_rescale: float = 1.0
    zones: tuple[ZoneFov, ...] = field(default_factory=lambda: tuple(default_zones()))
    rays_per_zone: int = 2304
    soft_bin_sigma: float = 1.0

    def validate(self) -> None:
        checks = [
            (self.num_bins >= 1, "num_bins >= 1"),
            (self.bin_size > 0, "bin_size > 0"),
            (self.saturation > 0, "saturation > 0"),
            (self.gain > 0, "gain > 0"),
            (self.crosstalk >= 0, "crosstalk >= 0"),
            (self.ref_rescale > 0, "ref_rescale > 0"),
            (self.rays_per_zone >= 1, "rays_per_zone >= 1"),
            (self.soft_bin_sigma > 0, "soft_bin_sigma > 0"),
            (math.isfinite(self.bin_offset), "bin_offset finite"),
        ]
        for ok, what in checks:
            if not ok:
                raise InvalidArgumentError(f"invalid camera parameters: need {what}")
        validate_zone_layout(self.zones)

    def with_values(self, **values) -> "CameraParams":
        return replace(self, **values)


# Members of CameraParams that the renderer can differentiate through.
DIFFERENTIABLE_CAMERA_FIELDS = ("gain", "crosstalk", "ref_rescale", "bin_offset", "saturation")


@dataclass(frozen=True)
class ReferenceHistogram:
    """Laser pulse shape as reported by the sensor, with its own bin size (ps)."""

    bins: np.ndarray
    bin_size: float

    def __post_init__(self):
        object.__setattr__(self, "bins", np.asarray(self.bins, dtype=float).ravel())
        object.__setattr__(self, "bin_size", float(self.bin_size))

    def validate(self) -> None:
        b = self.bins
        if b.size == 0 or not np.all(np.isfinite(b)) or np.any(b < 0):
            raise InvalidReferenceError("reference bins must be nonempty, finite and nonnegative")
        if not np.any(b > 0):
            raise InvalidReferenceError("reference histogram is all zeros")
        if not self.bin_size > 0:
            raise InvalidReferenceError(f"reference bin size must be positive, got {self.bin_size}")

    def __eq__(self, other):
        if not isinstance(other, ReferenceHistogram):
            return NotImplemented
        return self.bin_size == other.bin_size and np.array_equal(self.bins, other.bins)

    __hash__ = None


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


# ---------------------------------------------------------------------------
# tensor core


def plane_tensors(theta_deg, z0, phi_deg) -> tuple[torch.Tensor, torch.Tensor]:
    th = torch.deg2rad(_t(theta_deg))
    ph = torch.deg2rad(_t(phi_deg))
    st = torch.sin(th)
    a = torch.stack([-st * torch.cos(ph), -st * torch.sin(ph), -torch.cos(th)])
    return a, _t(z0) * torch.cos(th)


def phong_t(dirs, a, albedo, k_s, k_e) -> torch.Tensor:
    """Phong return intensity for unit rays ``dirs`` (..., 3) hitting normal ``a``."""
    ra = dirs @ a
    mu = -ra
    # alignment of the mirror reflection r - 2(r.a)a with the return direction -r
    spec = torch.clamp(2.0 * ra * ra - 1.0, 0.0, 1.0)
    pos = spec > 0
    lobe = torch.where(pos, torch.clamp(spec, min=1e-300) ** k_e, torch.zeros_like(spec))
    intensity = albedo * (1.0 - k_s) * mu + k_s * lobe
    return torch.where(mu > 0, intensity, torch.zeros_like(intensity))


# largest float64 fraction below 1; keeps p strictly under the saturation ceiling
_BELOW_ONE = 1.0 - 2.0**-53


def detected_photons_t(intensity, range_m, gain, saturation) -> torch.Tensor:
    frac = -torch.expm1(-gain * intensity / (saturation * range_m * range_m))
    return saturation * torch.clamp(frac, max=_BELOW_ONE)


def soft_window(sigma_bins: float) -> int:
    return int(math.ceil(8.0 * sigma_bins)) + 1


def bin_rays_t(tau, weight, num_bins: int, bin_size, bin_offset, mode: str, sigma_bins: float) -> torch.Tensor:
    """Accumulate per-ray weights into histograms.

    ``tau`` and ``weight`` have shape (zones, rays); returns (zones, num_bins).
    Soft mode sums point samples at bin centers of unit-area Gaussians
    (std ``sigma_bins``) centered at each ray's arrival time.
    """
    nz = tau.shape[0]
    pos = (tau - bin_offset) / bin_size  # continuous bin coordinate, bin i spans [i, i+1)
    out = torch.zeros(nz * num_bins, dtype=DTYPE)
    zone_base = (torch.arange(nz) * num_bins)[:, None]
    if mode == HARD:
        idx = torch.floor(pos.detach()).to(torch.int64)
        ok = (idx >= 0) & (idx < num_bins) & (weight.detach() > 0)
        flat = (idx + zone_base)[ok]
        out = out.index_add(0, flat, weight[ok])
        return out.reshape(nz, num_bins)
    if mode != SOFT:
        raise InvalidArgumentError(f"mode must be 'hard' or 'soft', got {mode!r}")
    w = soft_window(sigma_bins)
    offsets = torch.arange(-w, w + 1)
    base = torch.floor(pos.detach()).to(torch.int64)
    idx = base[..., None] + offsets  # (zones, rays, taps)
    centers = idx.to(DTYPE) + 0.5
    z = (centers - pos[..., None]) / sigma_bins
    vals = weight[..., None] * torch.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * sigma_bins)
    ok = (idx >= 0) & (idx < num_bins)
    flat = (idx + zone_base[..., None])[ok]
    out = out.index_add(0, flat, vals[ok])
    return out.reshape(nz, num_bins)


def default_kernel_len(reference: ReferenceHistogram, ref_rescale: float, target_bin_size: float,
                       sigma_bins: float) -> int:
    half_span = (reference.bins.size // 2 + 1) * reference.bin_size * ref_rescale / target_bin_size
    return 2 * int(math.ceil(half_span + 6.0 * sigma_bins)) + 1


def rescale_reference_t(ref_bins, ref_bin_size: float, s, target_bin_size, kernel_len: int,
                        sigma_bins: float) -> torch.Tensor:
    """Soft-bin the reference pulse onto the transient bin grid.

    Reference bin j sits at time ``(j - N // 2) * ref_bin_size`` relative to the
    center bin; that time is multiplied by ``s``. Kernel tap k corresponds to
    lag ``k - kernel_len // 2`` target bins.
    """
    ref = _t(ref_bins)
    n = ref.shape[0]
    half = kernel_len // 2
    times = (torch.arange(n, dtype=DTYPE) - n // 2) * ref_bin_size * s
    lags = (torch.arange(kernel_len, dtype=DTYPE) - half) * target_bin_size
    z = (lags[:, None] - times[None, :]) / (sigma_bins * target_bin_size)
    k = (torch.exp(-0.5 * z * z) * ref[None, :]).sum(dim=1)
    return k / k.sum()


def apply_impulse_t(raw, kernel) -> torch.Tensor:
    """Cross-correlate each histogram (last axis) with a centered kernel.

    ``out[i] = sum_k kernel[k] * raw[i + k - K]`` with ``K = len(kernel) // 2``
    and zero padding; the output keeps the input length.
    """
    m = raw.shape[-1]
    half = kernel.shape[0] // 2
    pad = torch.nn.functional.pad(raw, (half, half))
    out = torch.zeros_like(raw)
    for k in range(kernel.shape[0]):
        # accumulation order is fixed, so results do not depend on thread count
        out = out + kernel[k] * pad[..., k : k + m]
    return out


def apply_crosstalk_t(image, psi) -> torch.Tensor:
    return image + psi * image.sum(dim=0, keepdim=True)


@lru_cache(maxsize=64)
def _zone_rays_cached(zones: tuple[ZoneFov, ...], count: int, seed: int) -> torch.Tensor:
    rays = np.stack([sample_zone_rays(z, count, (seed, j)) for j, z in enumerate(zones)])
    return torch.as_tensor(rays, dtype=DTYPE)


def zone_rays(camera: CameraParams, seed: int = 0) -> torch.Tensor:
    """Ray directions for all zones, shape (9, rays_per_zone, 3).

    Zone j draws from the seed sequence ``(seed, j)``.
    """
    return _zone_rays_cached(tuple(camera.zones), int(camera.rays_per_zone), int(seed))


@dataclass
class RenderInputs:
    """Tensor-valued renderer inputs; any entry may require grad."""

    theta: torch.Tensor
    z0: torch.Tensor
    phi: torch.Tensor
    albedo: torch.Tensor
    k_s: torch.Tensor
    k_e: torch.Tensor
    gain: torch.Tensor
    saturation: torch.Tensor
    crosstalk: torch.Tensor
    ref_rescale: torch.Tensor
    bin_offset: torch.Tensor

    @classmethod
    def from_params(cls, g: PlaneGeometry, f: ReflectanceParams, c: CameraParams) -> "RenderInputs":
        vals = dict(theta=g.theta, z0=g.z0, phi=g.phi, albedo=f.albedo, k_s=f.k_s, k_e=f.k_e)
        vals.update({k: getattr(c, k) for k in DIFFERENTIABLE_CAMERA_FIELDS})
        return cls(**{k: _t(float(v)) for k, v in vals.items()})


def raw_histograms_t(a, d, albedo, k_s, k_e, gain, saturation, bin_offset, rays, camera: CameraParams,
                     mode: str) -> torch.Tensor:
    """Raw histograms (zones, num_bins) for rays of shape (zones, rays, 3)."""
    mu = -(rays @ a)
    hit = mu > 0
    rng = torch.where(hit, d / torch.where(hit, mu, torch.ones_like(mu)), torch.ones_like(mu))
    intensity = phong_t(rays, a, albedo, k_s, k_e)
    p = detected_photons_t(intensity, rng, gain, saturation)
    p = torch.where(hit & (rng > 0), p, torch.zeros_like(p))
    tau = 2.0 * rng / C_LIGHT_M_PER_PS
    return bin_rays_t(tau, p, camera.num_bins, camera.bin_size, bin_offset, mode, camera.soft_bin_sigma)


def render_t(x: RenderInputs, camera: CameraParams, reference: ReferenceHistogram, rays: torch.Tensor,
             mode: str = SOFT, kernel_len: int | None = None) -> torch.Tensor:
    """Full transient image (9, num_bins) as a differentiable tensor."""
    a, d = plane_tensors(x.theta, x.z0, x.phi)
    raw = raw_histograms_t(a, d, x.albedo, x.k_s, x.k_e, x.gain, x.saturation, x.bin_offset, rays, camera, mode)
    if kernel_len is None:
        kernel_len = default_kernel_len(reference, float(x.ref_rescale), camera.bin_size, camera.soft_bin_sigma)
    kernel = rescale_reference_t(reference.bins, reference.bin_size, x.ref_rescale, camera.bin_size,
                                 kernel_len, camera.soft_bin_sigma)
    return apply_crosstalk_t(apply_impulse_t(raw, kernel), x.crosstalk)


# ---------------------------------------------------------------------------
# numpy-facing operations


def phong_intensity(r, a, f: ReflectanceParams) -> float:
    with torch.no_grad():
        return float(phong_t(_t(r), _t(a), f.albedo, f.k_s, f.k_e))


def detected_photons(intensity, range_m, c: CameraParams):
    """Expected detections for one ray; vectorizes over numpy inputs."""
    if np.any(np.asarray(range_m) <= 0):
        raise InvalidArgumentError("range must be positive")
    with torch.no_grad():
        out = detected_photons_t(_t(intensity), _t(range_m), c.gain, c.saturation).numpy()
    return float(out) if out.ndim == 0 else out


def render_raw_histogram(p: ImplicitPlane, f: ReflectanceParams, c: CameraParams, zone: ZoneFov,
                         seed=0, mode: str = HARD) -> np.ndarray:
    """Raw (pre-impulse, pre-crosstalk) histogram of one zone."""
    rays = torch.as_tensor(sample_zone_rays(zone, c.rays_per_zone, seed), dtype=DTYPE)
    with torch.no_grad():
        h = raw_histograms_t(_t(p.a), _t(p.d), f.albedo, f.k_s, f.k_e, c.gain, c.saturation, c.bin_offset,
                             rays[None], c, mode)
    return h[0].numpy()


def rescale_reference(delta: ReferenceHistogram, s: float, target_bin_size: float, kernel_len: int,
                      sigma_bins: float = 1.0) -> np.ndarray:
    delta.validate()
    if not s > 0:
        raise InvalidArgumentError(f"rescale factor must be positive, got {s}")
    if kernel_len < 1:
        raise InvalidArgumentError("kernel_len must be >= 1")
    with torch.no_grad():
        return rescale_reference_t(delta.bins, delta.bin_size, s, target_bin_size, int(kernel_len),
                                   sigma_bins).numpy()


def apply_impulse(raw, kernel) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=float)
    if kernel.size == 0:
        raise InvalidArgumentError("kernel must be nonempty")
    with torch.no_grad():
        return apply_impulse_t(_t(raw), _t(kernel)).numpy()


def apply_crosstalk(image, psi: float) -> np.ndarray:
    if psi < 0:
        raise InvalidArgumentError("crosstalk must be nonnegative")
    with torch.no_grad():
        return apply_crosstalk_t(_t(image), psi).numpy()


def render_image(g: PlaneGeometry, f: ReflectanceParams, c: CameraParams, delta: ReferenceHistogram,
                 seed: int = 0, mode: str = SOFT) -> np.ndarray:
    """Transient image (9, num_bins) for plane geometry ``g``."""
    g.validate()
    f.validate()
    c.validate()
    delta.validate()
    with torch.no_grad():
        img = render_t(RenderInputs.from_params(g, f, c), c, delta, zone_rays(c, seed), mode)
    return img.numpy()


def zone_kinds(zones: Sequence[ZoneFov]) -> list[ZoneKind]:
    return [ZoneKind(z.kind) for z in zones]


def camera_field_names() -> list[str]:
    return [f.name for f in fields(CameraParams)]
