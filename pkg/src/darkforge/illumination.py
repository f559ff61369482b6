"""Exposure statistic, illuminance alignment, Y histograms, and eta search.

A capture is aligned to a target illuminance by scaling its normalized
samples with expo_target / expo(capture) + eta, clamping to [0, 1], and
re-quantizing to the DN grid. The correction term eta absorbs whatever
the plain exposure ratio misses (clipping, quantization, scene
nonuniformity); it is found automatically by minimizing the KL
divergence between the Y-channel histograms of the aligned capture and
a reference standard. The search is golden-section over
eta in [-0.5 * ratio, 2 * ratio] with 64 iterations, probing through
the fast table kernel on a strided cell grid; the two final candidates
(the search argmin and eta = 0) are re-scored through the exact ISP on
the full frame and the better one is returned, so the result never
regresses the eta = 0 baseline.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _histcore
from .errors import (
    BinMismatch,
    EmptyFrame,
    InvalidRange,
    SaturationWarning,
    SearchDiverged,
    ZeroExposureInput,
)
from .imaging import BayerFrame, normalize

DEFAULT_BINS = 256
KL_TAU = 1e-8
GOLDEN_ITERATIONS = 64
# Eq.-style scaling gives no saturation model; flag heavy clipping
SATURATION_WARN_FRACTION = 0.01

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class Histogram:
    """Normalized histogram over Y in [0, 1]."""

    bins: int
    mass: np.ndarray = field(repr=False)

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=np.float64)
        if self.bins < 2 or mass.shape != (self.bins,):
            raise InvalidRange(f"need >= 2 bins and matching mass, got {mass.shape}")
        if np.any(mass < 0.0) or abs(float(mass.sum()) - 1.0) > 1e-9:
            raise InvalidRange("mass must be nonnegative and sum to 1")
        mass = np.ascontiguousarray(mass)
        mass.flags.writeable = False
        object.__setattr__(self, "mass", mass)

    def dump(self):
        """JSON-friendly rows of {bin_lo, bin_hi, mass}."""
        edges = np.linspace(0.0, 1.0, self.bins + 1)
        return [
            {"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]),
             "mass": float(self.mass[i])}
            for i in range(self.bins)
        ]


class IlluminanceBand(Enum):
    """Target illuminance decade with its equivalent-ISO range."""

    BAND_1E2 = "1e-2"  # 0.01 - 0.1 lux
    BAND_1E3 = "1e-3"  # 0.001 - 0.01 lux
    BAND_1E4 = "1e-4"  # 0.0001 - 0.001 lux

    @property
    def lux_bounds(self):
        lo = float(self.value)
        return (lo, lo * 10.0)

    @property
    def iso_bounds(self):
        hi = 40000.0 if self is IlluminanceBand.BAND_1E4 else 20000.0
        return (100.0, hi)

    @classmethod
    def parse(cls, token: str) -> "IlluminanceBand":
        try:
            return cls(token)
        except ValueError:
            raise InvalidRange(
                f"unknown band {token!r}; expected one of "
                f"{[b.value for b in cls]}"
            ) from None


def expo(frame: BayerFrame) -> float:
    """Mean normalized sample value; the scalar illuminance statistic."""
    return float(np.mean(normalize(frame), dtype=np.float64))


def align_exposure(cap: BayerFrame, expo_target: float, eta: float) -> BayerFrame:
    """Scale normalized samples by expo_target/expo(cap) + eta, clamp,
    and re-quantize (round half to even) back onto the DN grid."""
    aligned, sat_fraction = align_exposure_stats(cap, expo_target, eta)
    if sat_fraction > SATURATION_WARN_FRACTION:
        warnings.warn(
            f"{sat_fraction:.1%} of samples clipped at white during alignment",
            SaturationWarning,
            stacklevel=2,
        )
    return aligned


def align_exposure_stats(cap: BayerFrame, expo_target: float,
                         eta: float) -> tuple[BayerFrame, float]:
    """align_exposure plus the fraction of samples clipped at white."""
    e_cap = expo(cap)
    if e_cap <= 0.0:
        raise ZeroExposureInput("capture exposure statistic is zero")
    if expo_target <= 0.0:
        raise ZeroExposureInput("target exposure must be positive")
    scale = expo_target / e_cap + eta
    dn = cap.data.astype(np.float64)
    norm = np.clip((dn - cap.black_level) / cap.dn_range, 0.0, 1.0)
    scaled = norm * scale
    sat_fraction = float(np.mean(scaled > 1.0))
    quant = np.rint(np.clip(scaled, 0.0, 1.0) * cap.dn_range)
    out = cap.with_data((quant + cap.black_level).astype(np.uint16))
    return out, sat_fraction


def luma_histogram(frame: BayerFrame, bins: int = DEFAULT_BINS,
                   gains=(1.0, 1.0, 1.0)) -> Histogram:
    """Histogram of the Y plane of the fixed ISP rendering of frame.

    Bin index is min(floor(y * bins), bins - 1) per pixel.
    """
    if bins < 2:
        raise InvalidRange(f"need bins >= 2, got {bins}")
    if frame.data.size == 0:
        raise EmptyFrame("cannot histogram an empty frame")
    counts = _histcore.aligned_luma_counts(frame, 1.0, bins, gains)
    total = int(counts.sum())
    if total == 0:
        raise EmptyFrame("no samples to histogram")
    return Histogram(bins, counts / float(total))


def kl_divergence(p: Histogram, q: Histogram, tau: float = KL_TAU) -> float:
    """Sum of p * log(p / (q + tau)) with 0 log 0 treated as 0."""
    if p.bins != q.bins:
        raise BinMismatch(f"bin counts differ: {p.bins} vs {q.bins}")
    if tau <= 0.0:
        raise InvalidRange("tau must be positive")
    return _kl_mass(p.mass, q.mass, tau)


def _kl_mass(p: np.ndarray, q: np.ndarray, tau: float) -> float:
    nz = p > 0.0
    return float(np.sum(p[nz] * np.log(p[nz] / (q[nz] + tau))))


def search_eta(cap: BayerFrame, standard: BayerFrame, bins: int = DEFAULT_BINS,
               gains=(1.0, 1.0, 1.0)) -> tuple[float, float]:
    """Minimize the Y-histogram KL divergence of the aligned capture
    against the standard over eta; returns (eta, achieved KL).

    Probes run on a strided cell grid through the table kernel. The
    probe argmin and the eta = 0 baseline are then both re-scored
    exactly on the full frame and the better one wins, which makes the
    result monotone against the baseline on every input.
    """
    e_cap = expo(cap)
    if e_cap <= 0.0:
        raise ZeroExposureInput("capture exposure statistic is zero")
    e_std = expo(standard)
    if e_std <= 0.0:
        raise ZeroExposureInput("standard exposure statistic is zero")
    ratio = e_std / e_cap

    cap_tables = _histcore.build_luma_tables(cap.black_level, cap.white_level, gains)
    cap_sites = _histcore.split_sites(cap, _histcore.probe_stride(cap))
    std_tables = _histcore.build_luma_tables(standard.black_level,
                                             standard.white_level, gains)
    std_sites = _histcore.split_sites(standard, _histcore.probe_stride(standard))
    std_qlut = _histcore.build_qlut(standard.black_level, standard.white_level, 1.0)
    std_counts = _histcore.hist_counts(std_sites, std_qlut, std_tables, bins)
    std_mass = std_counts / float(std_counts.sum())

    def probe(eta: float) -> float:
        qlut = _histcore.build_qlut(cap.black_level, cap.white_level, ratio + eta)
        counts = _histcore.hist_counts(cap_sites, qlut, cap_tables, bins)
        return _kl_mass(counts / float(counts.sum()), std_mass, KL_TAU)

    lo, hi = -0.5 * ratio, 2.0 * ratio
    c = hi - _INVPHI * (hi - lo)
    d = lo + _INVPHI * (hi - lo)
    fc, fd = probe(c), probe(d)
    seen_finite = math.isfinite(fc) or math.isfinite(fd)
    for _ in range(GOLDEN_ITERATIONS):
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _INVPHI * (hi - lo)
            fc = probe(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INVPHI * (hi - lo)
            fd = probe(d)
        seen_finite = seen_finite or math.isfinite(fc) or math.isfinite(fd)
    if not seen_finite:
        raise SearchDiverged("KL divergence non-finite at every probe")
    eta_star = c if fc <= fd else d

    std_hist = luma_histogram(standard, bins, gains)

    def exact_kl(eta: float) -> float:
        counts = _histcore.aligned_luma_counts(cap, ratio + eta, bins,
                                               tables=cap_tables)
        return _kl_mass(counts / float(counts.sum()), std_hist.mass, KL_TAU)

    kl_star = exact_kl(eta_star)
    kl_zero = exact_kl(0.0)
    if kl_zero <= kl_star:
        return 0.0, kl_zero
    return eta_star, kl_star
