"""Shared test fixtures: frame factories and planted constructions."""

import warnings

import numpy as np

from darkforge.errors import SaturationWarning
from darkforge.illumination import align_exposure_stats, expo
from darkforge.imaging import BayerFrame, Cfa


def make_frame(rng, w=64, h=48, cfa=Cfa.RGGB, black=512, white=16383,
               iso=800.0, exposure_s=0.1, lo=0.0, hi=1.0):
    """Frame with normalized sample values uniform in [lo, hi]."""
    depth = white - black
    norm = rng.uniform(lo, hi, size=(h, w))
    data = (black + np.rint(norm * depth)).astype(np.uint16)
    return BayerFrame(w, h, cfa, black, white, iso, exposure_s, data)


def make_bright_tailed_frame(rng, w=384, h=256, black=512, white=16383,
                             tail_fraction=0.25, cfa=Cfa.RGGB):
    """Frame with a cluster of near-white samples so that upscaling
    saturates a sizable fraction; used to plant eta fixed points."""
    depth = white - black
    n = h * w
    n_tail = int(n * tail_fraction)
    norm = np.concatenate([rng.uniform(0.0, 0.55, size=n - n_tail),
                           rng.uniform(0.8, 1.0, size=n_tail)])
    rng.shuffle(norm)
    data = (black + np.rint(norm * depth)).astype(np.uint16).reshape(h, w)
    return BayerFrame(w, h, cfa, black, white, 200.0, 0.05, data)


def planted_standard(cap, eta=0.03, start_factor=1.5, max_iter=120):
    """Construct a standard that is an exact fixed point of
    align_exposure(cap, expo(standard), eta).

    Saturation must absorb the eta term, so the capture needs a bright
    tail (see make_bright_tailed_frame). Iterates E <- expo(align(cap,
    E, eta)) until exact float equality.
    """
    target = start_factor * expo(cap)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        for _ in range(max_iter):
            std, _ = align_exposure_stats(cap, target, eta)
            nxt = expo(std)
            if nxt == target:
                std2, _ = align_exposure_stats(cap, expo(std), eta)
                assert std2 == std, "fixed point did not close"
                return std
            target = nxt
    raise AssertionError("fixed-point iteration did not converge exactly")


def darkened_standard(cap, factor, rng_or_none=None):
    """Plain darkened copy of cap at expo factor (no planted eta)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        std, _ = align_exposure_stats(cap, factor * expo(cap), 0.0)
    return std


def icl_instance(rng, h=6, w=6, c=3, margin=1e-3, max_tries=200):
    """Random loss_icl inputs sampled away from its subgradient kinks.

    The loss is piecewise smooth; finite differences at h=1e-5 are only
    meaningful when no probed coordinate sits within the probe window of an
    L1 tie or a channel-argmax switch, so rejection-sample until every
    illumination gap, reflectance gap, and argmax runner-up gap clears the
    margin.
    """
    from darkforge.enhance import retinex_decompose

    for _ in range(max_tries):
        f_hat = rng.uniform(0.05, 1.0, size=(h, w, c))
        f_ref = rng.uniform(0.05, 1.0, size=(h, w, c))
        f_raw = rng.uniform(0.05, 1.0, size=(h, w, c))
        p_hat = retinex_decompose(f_hat)
        p_ref = retinex_decompose(f_ref)
        p_raw = retinex_decompose(f_raw)
        top2 = np.sort(f_hat, axis=2)[:, :, -2:]
        if (np.min(np.abs(p_hat.illumination - p_ref.illumination)) > margin
                and np.min(np.abs(p_hat.reflectance[p_hat.reflectance < 0.999]
                                  - p_raw.reflectance[p_hat.reflectance < 0.999])) > margin
                and np.min(top2[:, :, 1] - top2[:, :, 0]) > margin):
            return f_hat, f_ref, f_raw
    raise AssertionError("no tie-free instance found")
