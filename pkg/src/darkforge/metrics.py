"""Full-reference quality metrics: PSNR and SSIM with a report container.

Both metrics operate on float arrays in [0, peak]; identical inputs return
the infinity sentinel for PSNR and exactly 1.0 for SSIM.  LPIPS needs a
pretrained perceptual network and is reported as unavailable.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from .errors import (
    EmptyManifest,
    InvalidRange,
    NonFiniteValue,
    ShapeMismatch,
    TooSmall,
)

GAUSSIAN_TAPS = 11
GAUSSIAN_SIGMA = 1.5
BLOCK = 8
DEFAULT_K1 = 0.01
DEFAULT_K2 = 0.03


def _as_image(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == 2:
        out = out[:, :, None]
    if out.ndim != 3:
        raise ShapeMismatch(f"{name} must be (h, w) or (h, w, C), "
                            f"got {np.asarray(arr).shape}")
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue(f"{name} contains non-finite values")
    return out


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, infinite for identical inputs."""
    x = _as_image(a, "a")
    y = _as_image(b, "b")
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    if peak <= 0.0:
        raise InvalidRange(f"peak must be positive, got {peak}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_taps() -> np.ndarray:
    half = GAUSSIAN_TAPS // 2
    i = np.arange(GAUSSIAN_TAPS, dtype=np.float64) - half
    g = np.exp(-(i * i) / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA))
    return g / g.sum()


def _local_mean_gaussian(plane: np.ndarray) -> np.ndarray:
    """Separable 11-tap Gaussian-weighted window means, valid region only."""
    taps = _gaussian_taps()
    half = GAUSSIAN_TAPS // 2
    rows = scipy.ndimage.correlate1d(plane, taps, axis=0, mode="constant")
    both = scipy.ndimage.correlate1d(rows, taps, axis=1, mode="constant")
    return both[half:-half, half:-half]


def _block_mean(plane: np.ndarray) -> np.ndarray:
    h8, w8 = plane.shape[0] // BLOCK, plane.shape[1] // BLOCK
    trimmed = plane[:h8 * BLOCK, :w8 * BLOCK]
    return trimmed.reshape(h8, BLOCK, w8, BLOCK).mean(axis=(1, 3))


def ssim(a, b, peak: float = 1.0, window: str = "gaussian",
         k1: float = DEFAULT_K1, k2: float = DEFAULT_K2) -> float:
    """Mean local structural similarity over windows and channels.

    window "gaussian" slides the canonical 11-tap sigma=1.5 kernel over all
    valid positions; "blocks" uses non-overlapping 8x8 tiles.  All second
    moments are computed as E[xy] - E[x]E[y] through one code path so that
    ssim(a, a) evaluates to exactly 1.0.
    """
    x = _as_image(a, "a")
    y = _as_image(b, "b")
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    if peak <= 0.0:
        raise InvalidRange(f"peak must be positive, got {peak}")
    if window == "gaussian":
        need = GAUSSIAN_TAPS
        local = _local_mean_gaussian
    elif window == "blocks":
        need = BLOCK
        local = _block_mean
    else:
        raise InvalidRange(f"unknown window kind {window!r}")
    if min(x.shape[0], x.shape[1]) < need:
        raise TooSmall(f"image {x.shape[:2]} smaller than {need}-wide window")

    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    total = 0.0
    for ch in range(x.shape[2]):
        xp, yp = x[:, :, ch], y[:, :, ch]
        mx = local(xp)
        my = local(yp)
        vx = local(xp * xp) - mx * mx
        vy = local(yp * yp) - my * my
        cov = local(xp * yp) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        total += float(np.mean(num / den))
    return total / x.shape[2]


@dataclass(frozen=True)
class PairMetrics:
    """Scores for one evaluated image pair."""

    name: str
    psnr_db: float
    ssim: float


def _json_num(v: float):
    return "inf" if math.isinf(v) else v


@dataclass(frozen=True)
class MetricReport:
    """Per-pair scores with mean/median aggregates; LPIPS is out of scope."""

    pairs: tuple
    lpips: str = field(default="unavailable")

    def __post_init__(self):
        if not self.pairs:
            raise EmptyManifest("metric report needs at least one pair")
        object.__setattr__(self, "pairs", tuple(self.pairs))

    def _column(self, attr: str) -> np.ndarray:
        return np.array([getattr(p, attr) for p in self.pairs])

    def to_dict(self) -> dict:
        psnrs = self._column("psnr_db")
        ssims = self._column("ssim")
        return {
            "pairs": [{"name": p.name, "psnr_db": _json_num(p.psnr_db),
                       "ssim": p.ssim} for p in self.pairs],
            "aggregate": {
                "psnr_mean": _json_num(float(psnrs.mean())),
                "psnr_median": _json_num(float(np.median(psnrs))),
                "ssim_mean": float(ssims.mean()),
                "ssim_median": float(np.median(ssims)),
            },
            "lpips": self.lpips,
        }
