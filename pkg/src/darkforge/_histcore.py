"""Lookup-table construction and the histogram gather kernel.

The eta search probes dozens of candidate scale factors per image and
needs the Y histogram of the scaled, re-quantized mosaic for each one.
Running the full ISP per probe is wasteful: after re-quantization every
sample sits on one of white-black+1 grid levels, so per-channel white
balance, sRGB gamma, and the BT.601 luma weight collapse into tables
indexed by the quantized level. Per 2x2 cell the probe kernel then only
gathers and adds.

Two kernel backends exist: a Cython loop (darkforge._fasthist) and a
numpy fallback. All transcendental math lives in the shared table
builders here, so the backends are bit-identical; selection honors the
DARKFORGE_FORCE_PYTHON environment variable.

Exactness note: the probe tables approximate the green mean at table
resolution (lut_g2 is indexed by q1+q2 and evaluated at (q1+q2)/(2D),
while the exact ISP averages the two float32 site values). The
discrepancy is a couple of float32 ulps on the gamma input and can move
a sample across a bin edge only when it already sits within ~1e-6 of
one. Probe values never leave the search; final candidates go through
aligned_luma_counts, which reproduces the public ISP composition bit
for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .imaging import BayerFrame, srgb_gamma_forward

try:
    from . import _fasthist
except ImportError:
    _fasthist = None

# probe grids larger than this are strided down; keeps a 64-iteration
# search on an 8 MP frame well under the interactive budget
TARGET_PROBE_CELLS = 262144


def compiled_available() -> bool:
    return _fasthist is not None


def active_backend() -> str:
    if os.environ.get("DARKFORGE_FORCE_PYTHON"):
        return "pure"
    return "compiled" if _fasthist is not None else "pure"


@dataclass(frozen=True)
class LumaTables:
    """Per-quantized-level luma contributions for one frame geometry.

    lut_r[q] = 0.299 * gamma(wb(q/D)), lut_b[q] = 0.114 * (...), both
    exact per level. lut_g2[k] approximates the green term at mean
    k/(2D). mq32[q] is the float32 normalized value of level q, used by
    the exact evaluator.
    """

    black: int
    white: int
    gains32: np.ndarray
    lut_r: np.ndarray
    lut_g2: np.ndarray
    lut_b: np.ndarray
    mq32: np.ndarray


def _channel32(m32: np.ndarray, gain32: np.float32) -> np.ndarray:
    # mirrors white_balance (f32 multiply + clip) then gamma_encode
    wb = np.clip(m32 * gain32, np.float32(0.0), np.float32(1.0))
    return srgb_gamma_forward(wb).astype(np.float32)


def build_luma_tables(black: int, white: int, gains) -> LumaTables:
    depth = white - black
    gains32 = np.asarray(gains, dtype=np.float32)
    levels = np.arange(depth + 1, dtype=np.float64)
    mq32 = (levels / depth).astype(np.float32)
    lut_r = 0.299 * _channel32(mq32, gains32[0]).astype(np.float64)
    lut_b = 0.114 * _channel32(mq32, gains32[2]).astype(np.float64)
    ksum = np.arange(2 * depth + 1, dtype=np.float64)
    gmean32 = (ksum / (2.0 * depth)).astype(np.float32)
    lut_g2 = 0.587 * _channel32(gmean32, gains32[1]).astype(np.float64)
    return LumaTables(black, white, _ro(gains32), _ro(lut_r), _ro(lut_g2),
                      _ro(lut_b), _ro(mq32))


def _ro(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


def build_qlut(black: int, white: int, scale: float) -> np.ndarray:
    """dn -> quantized level after exposure scaling, for dn in [0, white].

    Identical arithmetic to the array path in align_exposure, evaluated
    once per distinct dn value.
    """
    depth = white - black
    dn = np.arange(white + 1, dtype=np.float64)
    norm = np.clip((dn - black) / depth, 0.0, 1.0)
    scaled = np.clip(norm * scale, 0.0, 1.0)
    return np.rint(scaled * depth).astype(np.int32)


def probe_stride(frame: BayerFrame, target_cells: int = TARGET_PROBE_CELLS) -> int:
    ch, cw = frame.height // 2, frame.width // 2
    stride = 1
    while ((ch + stride - 1) // stride) * ((cw + stride - 1) // stride) > target_cells:
        stride += 1
    return stride


def split_sites(frame: BayerFrame, stride: int = 1):
    """Flattened per-site sample arrays (r, g1, g2, b) on a strided cell grid."""
    sites = frame.cfa.sites
    out = []
    for key in ("r", "g1", "g2", "b"):
        dy, dx = sites[key]
        plane = frame.data[dy::2, dx::2]
        if stride > 1:
            plane = plane[::stride, ::stride]
        out.append(np.ascontiguousarray(plane).ravel())
    return tuple(out)


def hist_counts(sites, qlut: np.ndarray, tables: LumaTables, bins: int) -> np.ndarray:
    """Probe-kernel histogram counts over the given site arrays."""
    r, g1, g2, b = sites
    if active_backend() == "compiled":
        return _fasthist.hist_kernel(r, g1, g2, b, qlut, tables.lut_r,
                                     tables.lut_g2, tables.lut_b, bins)
    return _hist_counts_numpy(r, g1, g2, b, qlut, tables.lut_r,
                              tables.lut_g2, tables.lut_b, bins)


def _hist_counts_numpy(r, g1, g2, b, qlut, lut_r, lut_g2, lut_b, bins):
    qr = qlut[r]
    k = qlut[g1] + qlut[g2]
    qb = qlut[b]
    y = (lut_r[qr] + lut_g2[k]) + lut_b[qb]
    y32 = y.astype(np.float32)
    idx = (y32.astype(np.float64) * bins).astype(np.int64)
    np.minimum(idx, bins - 1, out=idx)
    return np.bincount(idx, minlength=bins).astype(np.int64)


def aligned_luma_counts(frame: BayerFrame, scale: float, bins: int,
                        gains=(1.0, 1.0, 1.0), tables: LumaTables | None = None) -> np.ndarray:
    """Exact Y-histogram counts of scale-then-ISP on the full cell grid.

    Bit-identical to composing align_exposure with the public ISP
    (normalize -> demosaic_half -> white_balance -> gamma_encode ->
    rgb_to_yuv) and binning the Y plane: R and B go through exact
    per-level tables, the green mean is computed in float32 exactly as
    demosaic_half does, and the luma sum uses the same float64
    association order.
    """
    if tables is None:
        tables = build_luma_tables(frame.black_level, frame.white_level, gains)
    elif tables.black != frame.black_level or tables.white != frame.white_level:
        raise ValueError("tables were built for a different DN range")
    qlut = build_qlut(frame.black_level, frame.white_level, scale)
    r, g1, g2, b = split_sites(frame, 1)
    g32 = (tables.mq32[qlut[g1]] + tables.mq32[qlut[g2]]) * np.float32(0.5)
    ggam = _channel32(g32, tables.gains32[1])
    y = (tables.lut_r[qlut[r]] + 0.587 * ggam.astype(np.float64)) + tables.lut_b[qlut[b]]
    y32 = y.astype(np.float32)
    idx = (y32.astype(np.float64) * bins).astype(np.int64)
    np.minimum(idx, bins - 1, out=idx)
    return np.bincount(idx, minlength=bins).astype(np.int64)
