"""Non-network math of the enhancement stage.

Retinex-style decomposition and the illumination correction loss, soft color
histograms and the color consistency loss, the content losses, the adaptive
amplification operator, and a finite-difference gradient checker.  All losses
return (value, gradient) pairs with analytic gradients; L1 terms use the
subgradient-0 convention at ties so the checker can exclude kinks.
"""

import enum
import json
import pathlib
from dataclasses import dataclass

import numpy as np
import scipy.special

from .errors import (
    ChannelMismatch,
    InvalidRange,
    IoFailure,
    MissingFile,
    MissingPart,
    NonFiniteValue,
    ShapeMismatch,
)

DEFAULT_EPS = 1e-6
DEFAULT_HIST_BINS = 64
DEFAULT_TAU = 1e-8
DEFAULT_LAMBDA = 0.1
DEFAULT_A_MIN = 1.0
DEFAULT_A_MAX = 300.0


def _as_feature(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 3 or out.shape[2] < 1:
        raise ShapeMismatch(f"{name} must be (h, w, C), got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue(f"{name} contains non-finite values")
    return out


# ---------------------------------------------------------------------------
# Retinex decomposition and illumination correction loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetinexPair:
    """Per-position channel-max illumination and the residual reflectance."""

    illumination: np.ndarray
    reflectance: np.ndarray


def retinex_decompose(feature, eps: float = DEFAULT_EPS) -> RetinexPair:
    """Split a feature map into illumination L = max over channels and
    reflectance R = F / (L + eps), so R * (L + eps) reconstructs F."""
    f = _as_feature(feature, "feature")
    if eps <= 0.0:
        raise InvalidRange(f"eps must be positive, got {eps}")
    lum = f.max(axis=2, keepdims=True)
    return RetinexPair(illumination=lum, reflectance=f / (lum + eps))


def _max_channel_grad_mask(f: np.ndarray):
    """Argmax channel index per position, with multi-channel ties flagged.

    Gradient through the channel max routes to the unique argmax; at exact
    ties the subgradient is taken as 0, matching the L1 tie convention.
    """
    lum = f.max(axis=2, keepdims=True)
    amax = f.argmax(axis=2)
    tied = (f == lum).sum(axis=2) > 1
    return lum, amax, tied


def loss_icl(f_hat, f_ref, f_raw, eps: float = DEFAULT_EPS):
    """Illumination correction loss.

    Mean-L1 illumination gap to the reference plus mean-L1 reflectance gap to
    the input, each terms mean-reduced over its own tensor.  Returns the
    scalar and the gradient with respect to f_hat.
    """
    fh = _as_feature(f_hat, "f_hat")
    fr = _as_feature(f_ref, "f_ref")
    fw = _as_feature(f_raw, "f_raw")
    if fh.shape != fr.shape or fh.shape != fw.shape:
        raise ShapeMismatch(
            f"shapes differ: {fh.shape} vs {fr.shape} vs {fw.shape}")
    h, w, c = fh.shape
    lum_h, amax, tied = _max_channel_grad_mask(fh)
    lum_r = fr.max(axis=2, keepdims=True)
    refl_h = fh / (lum_h + eps)
    refl_w = fw / (fw.max(axis=2, keepdims=True) + eps)

    value = float(np.mean(np.abs(lum_h - lum_r))
                  + np.mean(np.abs(refl_h - refl_w)))

    # illumination term: d mean|L_h - L_r| routes through the argmax channel
    sign_l = np.sign(lum_h - lum_r)[:, :, 0]
    sign_l[tied] = 0.0
    grad = np.zeros_like(fh)
    np.put_along_axis(grad, amax[:, :, None],
                      (sign_l / (h * w))[:, :, None], axis=2)

    # reflectance term: direct numerator path plus the denominator path
    # through L at the argmax channel
    s = np.sign(refl_h - refl_w) / (h * w * c)
    grad += s / (lum_h + eps)
    denom_pull = np.sum(s * fh, axis=2) / (lum_h[:, :, 0] + eps) ** 2
    denom_pull[tied] = 0.0
    pull = np.zeros_like(fh)
    np.put_along_axis(pull, amax[:, :, None],
                      denom_pull[:, :, None], axis=2)
    grad -= pull
    return value, grad


# ---------------------------------------------------------------------------
# soft histograms and the color consistency loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SoftHistogram:
    """Per-channel soft occupancy over fixed bins; rows sum to one."""

    bins: int
    bandwidth: float
    mass: np.ndarray

    def __post_init__(self):
        if self.mass.ndim != 2 or self.mass.shape[1] != self.bins:
            raise ShapeMismatch(
                f"mass must be (C, {self.bins}), got {self.mass.shape}")
        if np.any(self.mass < 0.0):
            raise InvalidRange("histogram mass must be nonnegative")
        if np.max(np.abs(self.mass.sum(axis=1) - 1.0)) > 1e-9:
            raise InvalidRange("per-channel mass must sum to 1")


def _hist_centers(bins: int, lo: float, hi: float) -> np.ndarray:
    width = (hi - lo) / bins
    return lo + width * (np.arange(bins) + 0.5)


def _soft_bin_weights(values: np.ndarray, centers: np.ndarray,
                      bandwidth: float):
    """Per-value softmax over Gaussian bin kernels.

    The max exponent is subtracted per value before exponentiating so far
    out-of-range values collapse onto their nearest bin instead of
    underflowing to 0/0.  Returns the weights and the exponent derivatives
    d e_b / d v needed for gradients.
    """
    z = (values[:, None] - centers[None, :]) / bandwidth
    e = -0.5 * z * z
    e -= e.max(axis=1, keepdims=True)
    k = np.exp(e)
    weights = k / k.sum(axis=1, keepdims=True)
    dexp = -z / bandwidth
    return weights, dexp


def soft_histogram(feature, bins: int = DEFAULT_HIST_BINS,
                   bandwidth: float | None = None,
                   lo: float = 0.0, hi: float = 1.0) -> SoftHistogram:
    """Differentiable per-channel histogram with Gaussian bin kernels.

    Each value spreads kernel mass over the bins and is normalized per value,
    so every pixel contributes exactly 1/(h*w) of total mass; the default
    bandwidth of a quarter bin width approaches hard binning as it shrinks.
    """
    f = _as_feature(feature, "feature")
    if bins < 2:
        raise InvalidRange(f"bins must be >= 2, got {bins}")
    if hi <= lo:
        raise InvalidRange(f"empty value range [{lo}, {hi}]")
    width = (hi - lo) / bins
    if bandwidth is None:
        bandwidth = width / 4.0
    if bandwidth <= 0.0:
        raise InvalidRange(f"bandwidth must be positive, got {bandwidth}")
    centers = _hist_centers(bins, lo, hi)
    mass = np.empty((f.shape[2], bins))
    for ch in range(f.shape[2]):
        weights, _ = _soft_bin_weights(f[:, :, ch].ravel(), centers, bandwidth)
        mass[ch] = weights.mean(axis=0)
    # per-value normalization guarantees rows sum to 1 up to accumulation error
    mass /= mass.sum(axis=1, keepdims=True)
    return SoftHistogram(bins=bins, bandwidth=float(bandwidth), mass=mass)


def loss_ccl(f_hat, f_ref, tau: float = DEFAULT_TAU,
             bins: int = DEFAULT_HIST_BINS, bandwidth: float | None = None,
             lo: float = 0.0, hi: float = 1.0):
    """Color consistency loss: per-channel KL of soft histograms.

    sum_c sum_b H1 log(H1 / (H2 + tau)) with the reference histogram H2
    treated as a constant; the gradient flows only through H1.  Bins whose
    H1 mass underflowed to zero contribute 0 by the x log x limit.
    """
    fh = _as_feature(f_hat, "f_hat")
    fr = _as_feature(f_ref, "f_ref")
    if fh.shape[2] != fr.shape[2]:
        raise ShapeMismatch(
            f"channel counts differ: {fh.shape[2]} vs {fr.shape[2]}")
    if tau <= 0.0:
        raise InvalidRange(f"tau must be positive, got {tau}")
    if bins < 2:
        raise InvalidRange(f"bins must be >= 2, got {bins}")
    if hi <= lo:
        raise InvalidRange(f"empty value range [{lo}, {hi}]")
    width = (hi - lo) / bins
    if bandwidth is None:
        bandwidth = width / 4.0
    if bandwidth <= 0.0:
        raise InvalidRange(f"bandwidth must be positive, got {bandwidth}")

    centers = _hist_centers(bins, lo, hi)
    ref_mass = soft_histogram(fr, bins=bins, bandwidth=bandwidth,
                              lo=lo, hi=hi).mass
    n = fh.shape[0] * fh.shape[1]
    value = 0.0
    grad = np.empty_like(fh)
    for ch in range(fh.shape[2]):
        weights, dexp = _soft_bin_weights(fh[:, :, ch].ravel(), centers,
                                          bandwidth)
        mass = weights.mean(axis=0)
        occupied = mass > 0.0
        ratio = np.zeros_like(mass)
        ratio[occupied] = np.log(mass[occupied] / (ref_mass[ch][occupied]
                                                   + tau))
        value += float(np.sum(mass[occupied] * ratio[occupied]))
        # d value / d mass_b = log ratio + 1 on occupied bins; chain through
        # the per-value softmax jacobian w_b (de_b - sum_b' w_b' de_b')
        dmass = np.where(occupied, ratio + 1.0, 0.0)
        inner = weights * dexp
        mean_dexp = inner.sum(axis=1)
        dv = (inner @ dmass - (weights @ dmass) * mean_dexp) / n
        grad[:, :, ch] = dv.reshape(fh.shape[:2])
    return value, grad


# ---------------------------------------------------------------------------
# content losses and stage totals
# ---------------------------------------------------------------------------

def loss_cdl(x0hat, x0):
    """Mean-L1 content diffusion loss with its sign subgradient."""
    a = np.asarray(x0hat, dtype=np.float64)
    b = np.asarray(x0, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NonFiniteValue("loss_cdl inputs must be finite")
    value = float(np.mean(np.abs(a - b)))
    return value, np.sign(a - b) / a.size


def loss_con(inputs, recons) -> float:
    """Sum of per-domain mean-L1 reconstruction errors.

    Accepts a single array per side or parallel sequences of arrays, one per
    reconstructed domain.
    """
    if isinstance(inputs, np.ndarray) or not hasattr(inputs, "__len__"):
        inputs, recons = [inputs], [recons]
    if len(inputs) != len(recons):
        raise ShapeMismatch(
            f"{len(inputs)} inputs vs {len(recons)} reconstructions")
    return float(sum(loss_cdl(r, i)[0] for i, r in zip(inputs, recons)))


class TrainingStage(enum.Enum):
    ONE = "one"
    TWO = "two"


def stage_losses(stage: TrainingStage, parts,
                 lam: float = DEFAULT_LAMBDA) -> float:
    """Stage totals: stage one is con + icl, stage two is cdl + lam * ccl."""
    stage = TrainingStage(stage)
    needed = {TrainingStage.ONE: ("con", "icl"),
              TrainingStage.TWO: ("cdl", "ccl")}[stage]
    try:
        vals = [float(parts[k]) for k in needed]
    except KeyError as exc:
        raise MissingPart(f"stage {stage.value} requires part {exc}") from exc
    if stage is TrainingStage.ONE:
        return vals[0] + vals[1]
    return vals[0] + lam * vals[1]


# ---------------------------------------------------------------------------
# adaptive amplification operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AicmWeights:
    """Weights of the amplification operator.

    A 3x3 embedding conv, a squeeze/excite pair of 1x1 kernels around global
    average pooling that emits per-channel coefficients bounded to
    [a_min, a_max], and a 3x3 output conv closed by a residual connection.
    """

    embed: np.ndarray
    reduce: np.ndarray
    expand: np.ndarray
    out: np.ndarray
    a_min: float = DEFAULT_A_MIN
    a_max: float = DEFAULT_A_MAX

    def __post_init__(self):
        c = self.channels
        if self.embed.shape != (3, 3, c, c) or self.out.shape != (3, 3, c, c):
            raise ShapeMismatch("embed and out kernels must be (3, 3, C, C)")
        mid = self.reduce.shape[1] if self.reduce.ndim == 2 else 0
        if self.reduce.shape != (c, mid) or mid < 1:
            raise ShapeMismatch(f"reduce kernel must be (C, mid), "
                                f"got {self.reduce.shape}")
        if self.expand.shape != (mid, c):
            raise ShapeMismatch(f"expand kernel must be ({mid}, {c}), "
                                f"got {self.expand.shape}")
        if self.a_min < 1.0:
            raise InvalidRange(f"a_min must be >= 1, got {self.a_min}")
        if self.a_max <= self.a_min:
            raise InvalidRange("a_max must exceed a_min")

    @property
    def channels(self) -> int:
        return self.embed.shape[2] if self.embed.ndim == 4 else 0

    @classmethod
    def zeros(cls, channels: int, a_min: float = DEFAULT_A_MIN,
              a_max: float = DEFAULT_A_MAX) -> "AicmWeights":
        mid = max(channels // 2, 1)
        return cls(embed=np.zeros((3, 3, channels, channels)),
                   reduce=np.zeros((channels, mid)),
                   expand=np.zeros((mid, channels)),
                   out=np.zeros((3, 3, channels, channels)),
                   a_min=a_min, a_max=a_max)

    @classmethod
    def random(cls, rng, channels: int, scale: float = 0.5,
               a_min: float = DEFAULT_A_MIN,
               a_max: float = DEFAULT_A_MAX) -> "AicmWeights":
        mid = max(channels // 2, 1)
        return cls(embed=rng.normal(0.0, scale, (3, 3, channels, channels)),
                   reduce=rng.normal(0.0, scale, (channels, mid)),
                   expand=rng.normal(0.0, scale, (mid, channels)),
                   out=rng.normal(0.0, scale, (3, 3, channels, channels)),
                   a_min=a_min, a_max=a_max)


def _conv3x3_wrap(f: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 convolution with wrap padding, exact under cyclic shifts."""
    out = np.zeros(f.shape[:2] + (kernel.shape[3],))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            tap = kernel[dy + 1, dx + 1]
            out += np.einsum("hwc,cd->hwd", np.roll(f, (-dy, -dx), (0, 1)),
                             tap)
    return out


def aicm_forward(f_raw, weights: AicmWeights):
    """Amplify a feature map by learned per-channel coefficients.

    embed -> global average pool -> 1x1 squeeze -> ReLU -> 1x1 excite ->
    bounded sigmoid coefficients -> scale the embedding -> output conv plus
    the residual input.  Returns the amplified map and the coefficients.
    """
    f = _as_feature(f_raw, "f_raw")
    if f.shape[2] != weights.channels:
        raise ChannelMismatch(
            f"feature has {f.shape[2]} channels, weights expect "
            f"{weights.channels}")
    embed = _conv3x3_wrap(f, weights.embed)
    pooled = embed.mean(axis=(0, 1))
    z = np.maximum(pooled @ weights.reduce, 0.0) @ weights.expand
    a_raw = weights.a_min + (weights.a_max - weights.a_min) \
        * scipy.special.expit(z)
    refined = embed * a_raw[None, None, :]
    return _conv3x3_wrap(refined, weights.out) + f, a_raw


def save_aicm_weights(weights: AicmWeights, path) -> None:
    """JSON shape descriptor plus a sibling flat little-endian f64 blob."""
    path = pathlib.Path(path)
    blob_path = path.with_suffix(".f64")
    parts = (weights.embed, weights.reduce, weights.expand, weights.out)
    blob = np.concatenate([p.ravel() for p in parts]).astype("<f8")
    doc = {
        "channels": weights.channels,
        "mid": weights.reduce.shape[1],
        "a_min": weights.a_min,
        "a_max": weights.a_max,
        "blob": blob_path.name,
    }
    try:
        blob_path.write_bytes(blob.tobytes())
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_aicm_weights(path) -> AicmWeights:
    path = pathlib.Path(path)
    if not path.exists():
        raise MissingFile(f"no weight descriptor at {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
        raw = (path.parent / doc["blob"]).read_bytes()
    except FileNotFoundError as exc:
        raise MissingFile(f"missing weight blob for {path}: {exc}") from exc
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    c, mid = int(doc["channels"]), int(doc["mid"])
    shapes = ((3, 3, c, c), (c, mid), (mid, c), (3, 3, c, c))
    flat = np.frombuffer(raw, dtype="<f8")
    if flat.size != sum(int(np.prod(s)) for s in shapes):
        raise IoFailure(f"{doc['blob']}: blob holds {flat.size} values, "
                        f"descriptor implies another count")
    parts, at = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        parts.append(flat[at:at + n].reshape(shape).copy())
        at += n
    return AicmWeights(embed=parts[0], reduce=parts[1], expand=parts[2],
                       out=parts[3], a_min=float(doc["a_min"]),
                       a_max=float(doc["a_max"]))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f, x, analytic_grad, h: float = 1e-5,
                      min_coords: int = 200, rng=None) -> float:
    """Max relative error of an analytic gradient vs central differences.

    Probes all coordinates when there are at most min_coords, otherwise a
    random subset of that size; relative error uses max(|g|, 1e-8) as the
    denominator so near-zero gradients are compared absolutely.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64)
    if g.shape != x.shape:
        raise ShapeMismatch(f"grad shape {g.shape} != x shape {x.shape}")
    if h <= 0.0:
        raise InvalidRange(f"h must be positive, got {h}")
    if x.size <= min_coords:
        coords = np.arange(x.size)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(x.size, size=min_coords, replace=False)
    flat = x.ravel()
    worst = 0.0
    for idx in coords:
        bump = np.zeros_like(flat)
        bump[idx] = h
        hi = float(f((flat + bump).reshape(x.shape)))
        lo = float(f((flat - bump).reshape(x.shape)))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteValue(f"objective non-finite at coordinate {idx}")
        fd = (hi - lo) / (2.0 * h)
        gi = g.ravel()[idx]
        worst = max(worst, abs(fd - gi) / max(abs(gi), 1e-8))
    return worst
