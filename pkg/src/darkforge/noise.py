"""Sensor noise calibration and ISO-dependent noise injection.

The model is the standard photon-transfer decomposition in DN space:
temporal variance of a flat field grows linearly with black-subtracted
signal, v = K * mu + sigma_read^2, so the slope of the binned
mean/variance relation calibrates the Poisson gain K and capped frames
calibrate the Gaussian read floor. Both quantities follow power laws in
ISO well enough that a least-squares line in log-log space interpolates
between calibrated sensitivities. Residual structure that neither term
explains (fixed-pattern bias, banding remnants) is carried by a bank of
mean-subtracted dark-frame residuals, resampled at a random offset and
amplitude-scaled across ISO by the read-sigma ratio.

Injection composes the terms in physical order: the black-subtracted
signal is replaced by K * Poisson(signal / K), read noise and a dark
residual are added, and the result is re-quantized and clamped to the
DN range. Everything is driven by counter-based RNG streams so a
synthesis run is a pure function of (frame, iso, model, seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateVariance,
    EmptyDarkBank,
    InsufficientFrames,
    IoFailure,
    MissingFile,
    NegativeIso,
    ShapeMismatch,
    SingleIsoPoint,
)
from .illumination import IlluminanceBand
from .imaging import BayerFrame, load_bayer

MEAN_BINS = 64


class RngStream:
    """Counter-based deterministic RNG stream.

    Two streams constructed with the same (seed, stream) produce
    identical draw sequences; child streams are derived by a stable
    hash, so stream assignment does not depend on iteration order.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, tag) -> "RngStream":
        digest = hashlib.blake2b(
            f"{self.stream}/{tag}".encode(), digest_size=8
        ).digest()
        return RngStream(self.seed, int.from_bytes(digest, "little"))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


@dataclass(frozen=True)
class DarkEntry:
    """One mean-subtracted dark-frame residual plane."""

    iso: float
    residual: np.ndarray = field(repr=False)  # f32, zero mean
    source_path: str | None = None

    def __post_init__(self):
        res = np.ascontiguousarray(self.residual, dtype=np.float32)
        res.flags.writeable = False
        object.__setattr__(self, "residual", res)


@dataclass(frozen=True)
class NoiseModel:
    """ISO-parameterized Poisson gain and read sigma plus a dark bank.

    Empty curves denote the zero-noise model (K = sigma = 0), used for
    passthrough tests; any fitted model evaluates strictly positive.
    """

    gain_points: tuple = ()
    read_points: tuple = ()
    gain_fit: tuple | None = None  # (slope, intercept) in log-log space
    read_fit: tuple | None = None
    dark_bank: tuple = ()

    def k_of(self, iso: float) -> float:
        if self.gain_fit is None:
            return 0.0
        return _eval_loglog(self.gain_fit, iso)

    def sigma_of(self, iso: float) -> float:
        if self.read_fit is None:
            return 0.0
        return _eval_loglog(self.read_fit, iso)

    def with_dark(self, entry: DarkEntry) -> "NoiseModel":
        return replace(self, dark_bank=self.dark_bank + (entry,))


def _loglog_fit(points) -> tuple:
    iso = np.array([p[0] for p in points], dtype=np.float64)
    val = np.array([p[1] for p in points], dtype=np.float64)
    # read sigma can legitimately be tiny; floor keeps the log finite
    val = np.maximum(val, 1e-9)
    x, y = np.log(iso), np.log(val)
    slope, intercept = np.polyfit(x, y, 1)
    return (float(slope), float(intercept))


def _eval_loglog(fit, iso: float) -> float:
    if iso <= 0.0:
        raise NegativeIso(f"iso must be positive, got {iso}")
    slope, intercept = fit
    return float(np.exp(slope * np.log(iso) + intercept))


def _temporal_stats(frames, what: str):
    if len(frames) < 2:
        raise InsufficientFrames(f"{what} needs >= 2 frames, got {len(frames)}")
    first = frames[0]
    for f in frames[1:]:
        if (f.width, f.height) != (first.width, first.height):
            raise ShapeMismatch(f"{what}: frame geometry differs")
        if f.iso != first.iso:
            raise ShapeMismatch(f"{what}: frames span multiple ISOs")
    stack = np.stack([f.data.astype(np.float64) for f in frames])
    mean = stack.mean(axis=0) - first.black_level
    var = stack.var(axis=0, ddof=1)
    return mean, var


def calibrate_poisson_gain(flats) -> float:
    """Photon-transfer slope: least squares on the variance-vs-mean
    relation, with pixels binned by temporal mean (64 bins)."""
    mean, var = _temporal_stats(flats, "calibrate_poisson_gain")
    if float(var.max()) == 0.0:
        raise DegenerateVariance("all flat frames are identical")
    mu = mean.ravel()
    v = var.ravel()
    edges = np.linspace(mu.min(), mu.max(), MEAN_BINS + 1)
    idx = np.clip(np.searchsorted(edges, mu, side="right") - 1, 0, MEAN_BINS - 1)
    counts = np.bincount(idx, minlength=MEAN_BINS)
    sum_mu = np.bincount(idx, weights=mu, minlength=MEAN_BINS)
    sum_v = np.bincount(idx, weights=v, minlength=MEAN_BINS)
    keep = counts > 0
    bin_mu = sum_mu[keep] / counts[keep]
    bin_v = sum_v[keep] / counts[keep]
    if bin_mu.size < 2 or float(np.ptp(bin_mu)) == 0.0:
        # flat field with no mean spread cannot anchor a slope
        raise DegenerateVariance("temporal means have no spread to fit a slope")
    slope, _ = np.polyfit(bin_mu, bin_v, 1)
    return float(slope)


def calibrate_gaussian(darks) -> float:
    """Read noise: sqrt of the mean per-pixel temporal variance."""
    _, var = _temporal_stats(darks, "calibrate_gaussian")
    return float(np.sqrt(var.mean()))


def fit_iso_model(gain_points, read_points) -> NoiseModel:
    """Least-squares log-log fits through per-ISO calibration points."""
    for name, pts in (("gain", gain_points), ("read", read_points)):
        isos = {float(p[0]) for p in pts}
        if len(isos) < 2:
            raise SingleIsoPoint(f"{name} curve needs >= 2 distinct ISOs")
        if any(p[0] <= 0 for p in pts):
            raise NegativeIso(f"{name} curve has a non-positive ISO")
    gain_points = tuple((float(i), float(k)) for i, k in gain_points)
    read_points = tuple((float(i), float(s)) for i, s in read_points)
    return NoiseModel(
        gain_points=gain_points,
        read_points=read_points,
        gain_fit=_loglog_fit(gain_points),
        read_fit=_loglog_fit(read_points),
    )


def ingest_dark_frame(model: NoiseModel, frame: BayerFrame,
                      source_path: str | None = None) -> NoiseModel:
    """Store the mean-subtracted residual of a capped frame."""
    data = frame.data.astype(np.float64)
    residual = (data - data.mean()).astype(np.float32)
    return model.with_dark(DarkEntry(frame.iso, residual, source_path))


def draw_iso(band: IlluminanceBand, rng: RngStream) -> float:
    """Uniform equivalent-ISO draw on the band's interval."""
    lo, hi = band.iso_bounds
    return float(rng.gen.uniform(lo, hi))


def _nearest_dark(bank, iso: float) -> DarkEntry:
    best = min(bank, key=lambda e: abs(e.iso - iso))
    return best


def _sample_dark(entry: DarkEntry, shape, rng: RngStream) -> np.ndarray:
    """Residual patch at a random fractional offset, bilinearly
    interpolated with wrap-around, tiled to the target shape."""
    res = entry.residual.astype(np.float64)
    rh, rw = res.shape
    oy = float(rng.gen.uniform(0.0, rh))
    ox = float(rng.gen.uniform(0.0, rw))
    h, w = shape
    ys = (np.arange(h, dtype=np.float64) + oy) % rh
    xs = (np.arange(w, dtype=np.float64) + ox) % rw
    y0 = np.floor(ys).astype(np.int64) % rh
    x0 = np.floor(xs).astype(np.int64) % rw
    y1 = (y0 + 1) % rh
    x1 = (x0 + 1) % rw
    fy = (ys - np.floor(ys))[:, None]
    fx = (xs - np.floor(xs))[None, :]
    a = res[np.ix_(y0, x0)]
    b = res[np.ix_(y0, x1)]
    c = res[np.ix_(y1, x0)]
    d = res[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def add_noise(clean: BayerFrame, iso: float, model: NoiseModel, rng: RngStream,
              use_dark_bank: bool | None = None) -> BayerFrame:
    """Inject calibrated noise at the given ISO.

    Draw order is fixed (shot, read, dark offsets) so the output is a
    pure function of (frame, iso, model, stream). use_dark_bank=None
    uses the bank whenever it is nonempty.
    """
    if iso <= 0.0:
        raise NegativeIso(f"iso must be positive, got {iso}")
    if use_dark_bank is None:
        use_dark_bank = len(model.dark_bank) > 0
    elif use_dark_bank and not model.dark_bank:
        raise EmptyDarkBank("dark bank requested but the model has none")

    signal = np.maximum(clean.data.astype(np.float64) - clean.black_level, 0.0)
    k = model.k_of(iso)
    if k > 0.0:
        signal = k * rng.gen.poisson(signal / k).astype(np.float64)
    sigma = model.sigma_of(iso)
    if sigma > 0.0:
        signal = signal + rng.gen.normal(0.0, sigma, size=signal.shape)
    if use_dark_bank:
        entry = _nearest_dark(model.dark_bank, iso)
        bank_sigma = model.sigma_of(entry.iso)
        ratio = sigma / bank_sigma if bank_sigma > 1e-9 else 1.0
        signal = signal + ratio * _sample_dark(entry, signal.shape, rng)

    dn = np.clip(np.rint(signal + clean.black_level), 0, clean.white_level)
    return BayerFrame(
        clean.width,
        clean.height,
        clean.cfa,
        clean.black_level,
        clean.white_level,
        iso,
        clean.exposure_s,
        dn.astype(np.uint16),
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model(model: NoiseModel, path) -> None:
    """JSON document; dark residuals are referenced by the source
    SIEDRAW1 paths they were ingested from."""
    bank_paths = []
    for entry in model.dark_bank:
        if entry.source_path is None:
            raise MissingFile(
                "dark bank entry has no source path; ingest with source_path "
                "to make the model serializable"
            )
        bank_paths.append(entry.source_path)
    doc = {
        "gain_points": [list(p) for p in model.gain_points],
        "read_points": [list(p) for p in model.read_points],
        "fit_coeffs": {
            "gain": list(model.gain_fit) if model.gain_fit else None,
            "read": list(model.read_fit) if model.read_fit else None,
        },
        "dark_bank_paths": bank_paths,
    }
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_model(path) -> NoiseModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    gain_points = [tuple(p) for p in doc.get("gain_points", [])]
    read_points = [tuple(p) for p in doc.get("read_points", [])]
    if gain_points and read_points:
        model = fit_iso_model(gain_points, read_points)
    else:
        model = NoiseModel()
    for dark_path in doc.get("dark_bank_paths", []):
        model = ingest_dark_frame(model, load_bayer(dark_path), dark_path)
    return model
