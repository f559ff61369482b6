"""RAW/sRGB data model, container I/O, and the fixed ISP.

The RAW container ("SIEDRAW1") is a minimal little-endian format so the
whole pipeline round-trips bit-exactly without vendor RAW decoders:

    offset  size  field
    0       8     magic b"SIEDRAW1"
    8       4     u32 width
    12      4     u32 height
    16      1     u8 CFA code (0=RGGB, 1=BGGR, 2=GRBG, 3=GBRG)
    17      3     padding
    20      2     u16 black_level
    22      2     u16 white_level
    24      4     f32 iso
    28      4     f32 exposure_s
    32      -     width*height u16 samples, row-major

The fixed ISP used for visualization and Y-channel statistics is
half-resolution demosaic -> white balance -> sRGB gamma -> BT.601 YUV
(identity color matrix). Bulk image planes are float32; intermediate
math runs in float64 before the cast.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    IoFailure,
    MagicMismatch,
    NonPositiveGain,
    OddDimensions,
    OutOfBounds,
    PhaseViolation,
    TruncatedPayload,
    WrongEncoding,
)

_MAGIC = b"SIEDRAW1"
_HEADER = struct.Struct("<8sIIB3xHHff")  # 32 bytes


class Cfa(Enum):
    RGGB = 0
    BGGR = 1
    GRBG = 2
    GBRG = 3

    @property
    def sites(self):
        """(row, col) offsets of the R, G1, G2, B sites inside a 2x2 cell.

        G1 is the first green in row-major order.
        """
        return _CFA_SITES[self]


_CFA_SITES = {
    Cfa.RGGB: {"r": (0, 0), "g1": (0, 1), "g2": (1, 0), "b": (1, 1)},
    Cfa.BGGR: {"r": (1, 1), "g1": (0, 1), "g2": (1, 0), "b": (0, 0)},
    Cfa.GRBG: {"r": (0, 1), "g1": (0, 0), "g2": (1, 1), "b": (1, 0)},
    Cfa.GBRG: {"r": (1, 0), "g1": (0, 0), "g2": (1, 1), "b": (0, 1)},
}


class Encoding(Enum):
    LINEAR = "linear"
    SRGB_GAMMA = "srgb_gamma"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class BayerFrame:
    """Single-channel RAW mosaic with capture metadata.

    iso and exposure_s are stored at float32 precision (the container
    width), so any constructed frame round-trips the file format exactly.
    Pixel data is immutable after construction.
    """

    width: int
    height: int
    cfa: Cfa
    black_level: int
    white_level: int
    iso: float
    exposure_s: float
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "iso", float(np.float32(self.iso)))
        object.__setattr__(self, "exposure_s", float(np.float32(self.exposure_s)))
        if self.width <= 0 or self.height <= 0 or self.width % 2 or self.height % 2:
            raise OddDimensions(
                f"dimensions must be positive and even, got {self.width}x{self.height}"
            )
        if not 0 <= self.black_level < self.white_level <= 65535:
            raise ValueError(
                f"need 0 <= black_level < white_level, got "
                f"{self.black_level}/{self.white_level}"
            )
        if self.exposure_s <= 0:
            raise ValueError("exposure_s must be positive")
        if self.iso < 100:
            raise ValueError("iso must be >= 100")
        data = np.asarray(self.data, dtype=np.uint16)
        if data.shape != (self.height, self.width):
            raise TruncatedPayload(
                f"payload shape {data.shape} != {(self.height, self.width)}"
            )
        if data.size and int(data.max()) > self.white_level:
            raise ValueError("samples above white_level")
        object.__setattr__(self, "data", _freeze(data))

    def __eq__(self, other):
        if not isinstance(other, BayerFrame):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.cfa is other.cfa
            and self.black_level == other.black_level
            and self.white_level == other.white_level
            and self.iso == other.iso
            and self.exposure_s == other.exposure_s
            and np.array_equal(self.data, other.data)
        )

    @property
    def dn_range(self) -> int:
        return self.white_level - self.black_level

    def with_data(self, data: np.ndarray) -> "BayerFrame":
        """Same metadata, new samples."""
        return BayerFrame(
            self.width,
            self.height,
            self.cfa,
            self.black_level,
            self.white_level,
            self.iso,
            self.exposure_s,
            data,
        )


@dataclass(frozen=True, eq=False)
class SrgbFrame:
    width: int
    height: int
    encoding: Encoding
    data: np.ndarray = field(repr=False)  # (h, w, 3) float32 in [0, 1]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != (self.height, self.width, 3):
            raise ValueError(f"data shape {data.shape} != {(self.height, self.width, 3)}")
        if data.size and not np.all(np.isfinite(data)):
            raise ValueError("non-finite components")
        object.__setattr__(self, "data", _freeze(data))

    def __eq__(self, other):
        if not isinstance(other, SrgbFrame):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.encoding is other.encoding
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class YuvFrame:
    width: int
    height: int
    y: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("y", "u", "v"):
            plane = np.asarray(getattr(self, name), dtype=np.float32)
            if plane.shape != (self.height, self.width):
                raise ValueError(f"{name} plane shape {plane.shape} mismatch")
            object.__setattr__(self, name, _freeze(plane))


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------

def load_bayer(path) -> BayerFrame:
    """Read a SIEDRAW1 file."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size or blob[:8] != _MAGIC:
        raise MagicMismatch(f"{path}: not a SIEDRAW1 file")
    magic, width, height, cfa_code, black, white, iso, exposure = _HEADER.unpack(
        blob[: _HEADER.size]
    )
    if width % 2 or height % 2 or width == 0 or height == 0:
        raise OddDimensions(f"{path}: dimensions {width}x{height}")
    expected = width * height * 2
    payload = blob[_HEADER.size :]
    if len(payload) != expected:
        raise TruncatedPayload(
            f"{path}: payload {len(payload)} bytes, expected {expected}"
        )
    try:
        cfa = Cfa(cfa_code)
    except ValueError as exc:
        raise MagicMismatch(f"{path}: unknown CFA code {cfa_code}") from exc
    data = np.frombuffer(payload, dtype="<u2").reshape(height, width)
    return BayerFrame(width, height, cfa, black, white, iso, exposure, data)


def write_bayer(frame: BayerFrame, path) -> None:
    """Write a SIEDRAW1 file; load_bayer(path) returns an equal frame."""
    header = _HEADER.pack(
        _MAGIC,
        frame.width,
        frame.height,
        frame.cfa.value,
        frame.black_level,
        frame.white_level,
        frame.iso,
        frame.exposure_s,
    )
    payload = np.ascontiguousarray(frame.data, dtype="<u2").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# geometry and normalization
# ---------------------------------------------------------------------------

def crop(frame: BayerFrame, x0: int, y0: int, w: int, h: int) -> BayerFrame:
    """Bit-exact sub-rectangle; offsets must be even to preserve CFA phase."""
    if x0 % 2 or y0 % 2:
        raise PhaseViolation(f"crop offset ({x0},{y0}) breaks CFA phase")
    if w <= 0 or h <= 0 or w % 2 or h % 2:
        raise OddDimensions(f"crop size {w}x{h} must be positive and even")
    if x0 < 0 or y0 < 0 or x0 + w > frame.width or y0 + h > frame.height:
        raise OutOfBounds(
            f"window ({x0},{y0},{w},{h}) outside {frame.width}x{frame.height}"
        )
    return BayerFrame(
        w,
        h,
        frame.cfa,
        frame.black_level,
        frame.white_level,
        frame.iso,
        frame.exposure_s,
        frame.data[y0 : y0 + h, x0 : x0 + w],
    )


def normalize(frame: BayerFrame) -> np.ndarray:
    """Black-subtracted samples mapped to [0, 1] as float32."""
    dn = frame.data.astype(np.float64)
    norm = np.clip((dn - frame.black_level) / frame.dn_range, 0.0, 1.0)
    return norm.astype(np.float32)


# ---------------------------------------------------------------------------
# fixed ISP
# ---------------------------------------------------------------------------

def demosaic_half(frame: BayerFrame) -> SrgbFrame:
    """Half-resolution demosaic: R and B from their CFA sites, G as the
    mean of the two greens in each 2x2 cell, on normalized values."""
    norm = normalize(frame)
    sites = frame.cfa.sites
    r = norm[sites["r"][0] :: 2, sites["r"][1] :: 2]
    g1 = norm[sites["g1"][0] :: 2, sites["g1"][1] :: 2]
    g2 = norm[sites["g2"][0] :: 2, sites["g2"][1] :: 2]
    b = norm[sites["b"][0] :: 2, sites["b"][1] :: 2]
    g = (g1 + g2) * np.float32(0.5)
    rgb = np.stack([r, g, b], axis=-1)
    return SrgbFrame(frame.width // 2, frame.height // 2, Encoding.LINEAR, rgb)


def white_balance(img: SrgbFrame, gains) -> SrgbFrame:
    """Per-channel multiply then clamp to [0, 1]. Linear input only."""
    if img.encoding is not Encoding.LINEAR:
        raise WrongEncoding("white_balance expects a linear frame")
    gains = np.asarray(gains, dtype=np.float32)
    if gains.shape != (3,) or np.any(gains <= 0):
        raise NonPositiveGain(f"gains must be 3 positive values, got {gains}")
    out = np.clip(img.data * gains, np.float32(0.0), np.float32(1.0))
    return SrgbFrame(img.width, img.height, Encoding.LINEAR, out)


# IEC 61966-2-1 constants
_SRGB_LINEAR_KNEE = 0.0031308
_SRGB_ENCODED_KNEE = 0.04045


def srgb_gamma_forward(linear: np.ndarray) -> np.ndarray:
    """Piecewise sRGB transfer on float64 values in [0, 1]."""
    linear = np.asarray(linear, dtype=np.float64)
    small = linear <= _SRGB_LINEAR_KNEE
    out = np.where(
        small,
        linear * 12.92,
        1.055 * np.power(np.maximum(linear, _SRGB_LINEAR_KNEE), 1.0 / 2.4) - 0.055,
    )
    return np.clip(out, 0.0, 1.0)


def srgb_gamma_inverse(encoded: np.ndarray) -> np.ndarray:
    encoded = np.asarray(encoded, dtype=np.float64)
    small = encoded <= _SRGB_ENCODED_KNEE
    out = np.where(
        small,
        encoded / 12.92,
        np.power((np.maximum(encoded, _SRGB_ENCODED_KNEE) + 0.055) / 1.055, 2.4),
    )
    return np.clip(out, 0.0, 1.0)


def gamma_encode(img: SrgbFrame) -> SrgbFrame:
    if img.encoding is not Encoding.LINEAR:
        raise WrongEncoding("gamma_encode expects a linear frame")
    out = srgb_gamma_forward(img.data).astype(np.float32)
    return SrgbFrame(img.width, img.height, Encoding.SRGB_GAMMA, out)


def gamma_decode(img: SrgbFrame) -> SrgbFrame:
    if img.encoding is not Encoding.SRGB_GAMMA:
        raise WrongEncoding("gamma_decode expects a gamma-encoded frame")
    out = srgb_gamma_inverse(img.data).astype(np.float32)
    return SrgbFrame(img.width, img.height, Encoding.LINEAR, out)


# BT.601 luma weights; U/V scaled so their range is [-0.5, 0.5].
_YR, _YG, _YB = 0.299, 0.587, 0.114
_U_SCALE = 0.5 / (1.0 - _YB)
_V_SCALE = 0.5 / (1.0 - _YR)


def rgb_to_yuv(img: SrgbFrame) -> YuvFrame:
    """Full-range BT.601 conversion of a gamma-encoded frame."""
    if img.encoding is not Encoding.SRGB_GAMMA:
        raise WrongEncoding("rgb_to_yuv expects a gamma-encoded frame")
    rgb = img.data.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = _YR * r + _YG * g + _YB * b
    u = (b - y) * _U_SCALE
    v = (r - y) * _V_SCALE
    return YuvFrame(img.width, img.height, y.astype(np.float32),
                    u.astype(np.float32), v.astype(np.float32))


def yuv_to_rgb(yuv: YuvFrame) -> SrgbFrame:
    y = yuv.y.astype(np.float64)
    u = yuv.u.astype(np.float64)
    v = yuv.v.astype(np.float64)
    r = y + v / _V_SCALE
    b = y + u / _U_SCALE
    g = (y - _YR * r - _YB * b) / _YG
    rgb = np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0).astype(np.float32)
    return SrgbFrame(yuv.width, yuv.height, Encoding.SRGB_GAMMA, rgb)


def render_reference_isp(frame: BayerFrame, gains=(1.0, 1.0, 1.0)) -> SrgbFrame:
    """demosaic_half -> white_balance -> gamma_encode, deterministically."""
    return gamma_encode(white_balance(demosaic_half(frame), gains))


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255) for sRGB outputs
# ---------------------------------------------------------------------------

def write_ppm(img: SrgbFrame, path) -> None:
    """8-bit binary PPM; expects a gamma-encoded frame."""
    if img.encoding is not Encoding.SRGB_GAMMA:
        raise WrongEncoding("write_ppm expects a gamma-encoded frame")
    u8 = np.rint(img.data.astype(np.float64) * 255.0).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
            fh.write(u8.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_ppm(path) -> SrgbFrame:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not blob.startswith(b"P6"):
        raise MagicMismatch(f"{path}: not a binary PPM")
    # header is three whitespace-separated tokens after the magic
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise MagicMismatch(f"{path}: only maxval 255 supported")
    expected = width * height * 3
    payload = blob[pos : pos + expected]
    if len(payload) != expected:
        raise TruncatedPayload(f"{path}: payload {len(payload)} != {expected}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return SrgbFrame(
        width, height, Encoding.SRGB_GAMMA, data.astype(np.float32) / np.float32(255.0)
    )
