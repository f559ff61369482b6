"""Noise model tests.

Reference flat/dark generators are written directly against numpy's
Generator, independent of the library's injection path, so calibration
is checked against planted ground truth rather than round-tripped
assumptions. The add_noise round trip then closes the loop both ways.
"""

import math

import numpy as np
import pytest

from darkforge.errors import (
    DegenerateVariance,
    EmptyDarkBank,
    InsufficientFrames,
    MissingFile,
    NegativeIso,
    ShapeMismatch,
    SingleIsoPoint,
)
from darkforge.illumination import IlluminanceBand
from darkforge.imaging import BayerFrame, Cfa, write_bayer
from darkforge.noise import (
    NoiseModel,
    RngStream,
    add_noise,
    calibrate_gaussian,
    calibrate_poisson_gain,
    draw_iso,
    fit_iso_model,
    ingest_dark_frame,
    load_model,
    save_model,
)

BLACK, WHITE = 512, 16383


def frame_from_dn(dn, iso=800.0):
    dn = np.asarray(dn)
    h, w = dn.shape
    return BayerFrame(w, h, Cfa.RGGB, BLACK, WHITE, iso, 0.1,
                      dn.astype(np.uint16))


def reference_flats(rng, n_frames, size, level_lo, level_hi, k, sigma,
                    iso=800.0):
    """Flat fields with a fixed spatial gradient and per-frame
    Poisson-Gaussian temporal noise, straight from numpy."""
    levels = np.linspace(level_lo, level_hi, size * size).reshape(size, size)
    frames = []
    for _ in range(n_frames):
        if k > 0:
            sig = k * rng.poisson(levels / k).astype(np.float64)
        else:
            sig = levels.copy()
        if sigma > 0:
            sig += rng.normal(0.0, sigma, size=levels.shape)
        dn = np.clip(np.rint(sig + BLACK), 0, WHITE)
        frames.append(frame_from_dn(dn, iso))
    return frames


def reference_darks(rng, n_frames, size, sigma, iso=800.0):
    frames = []
    for _ in range(n_frames):
        dn = np.clip(np.rint(rng.normal(0.0, sigma, size=(size, size)) + BLACK),
                     0, WHITE)
        frames.append(frame_from_dn(dn, iso))
    return frames


def flat_model(k=None, sigma=None):
    """Model with exactly constant K(iso) and sigma(iso) curves."""
    return NoiseModel(
        gain_fit=None if k is None else (0.0, math.log(k)),
        read_fit=None if sigma is None else (0.0, math.log(sigma)),
    )


# ---------------------------------------------------------------------------
# RngStream
# ---------------------------------------------------------------------------

def test_stream_reproducible():
    a = RngStream(1234, 7).gen.uniform(size=16)
    b = RngStream(1234, 7).gen.uniform(size=16)
    assert np.array_equal(a, b)


def test_streams_distinct():
    a = RngStream(1234, 7).gen.uniform(size=16)
    b = RngStream(1234, 8).gen.uniform(size=16)
    c = RngStream(1235, 7).gen.uniform(size=16)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_child_streams_stable_and_distinct():
    root = RngStream(42)
    c1 = root.child("pair-001")
    c2 = RngStream(42).child("pair-001")
    assert (c1.seed, c1.stream) == (c2.seed, c2.stream)
    assert root.child("pair-001").stream != root.child("pair-002").stream


# ---------------------------------------------------------------------------
# calibrate_poisson_gain
# ---------------------------------------------------------------------------

def test_poisson_gain_recovery():
    rng = np.random.default_rng(100)
    flats = reference_flats(rng, 10, 256, 200.0, 4000.0, k=2.0, sigma=1.0)
    k = calibrate_poisson_gain(flats)
    assert abs(k - 2.0) / 2.0 < 0.05


def test_poisson_gain_zero_plant():
    rng = np.random.default_rng(101)
    flats = reference_flats(rng, 10, 256, 1000.0, 1000.0, k=0.0, sigma=3.0)
    k = calibrate_poisson_gain(flats)
    assert abs(k) < 0.05


def test_poisson_gain_degenerate():
    dn = np.full((16, 16), 2000, dtype=np.uint16)
    frames = [frame_from_dn(dn), frame_from_dn(dn), frame_from_dn(dn)]
    with pytest.raises(DegenerateVariance):
        calibrate_poisson_gain(frames)


def test_poisson_gain_requires_two_frames():
    rng = np.random.default_rng(102)
    flats = reference_flats(rng, 1, 32, 200.0, 2000.0, k=2.0, sigma=1.0)
    with pytest.raises(InsufficientFrames):
        calibrate_poisson_gain(flats)


def test_calibration_rejects_mixed_geometry_or_iso():
    rng = np.random.default_rng(103)
    a = reference_flats(rng, 1, 32, 200.0, 2000.0, 2.0, 1.0)[0]
    b = reference_flats(rng, 1, 64, 200.0, 2000.0, 2.0, 1.0)[0]
    with pytest.raises(ShapeMismatch):
        calibrate_poisson_gain([a, b])
    c = reference_flats(rng, 1, 32, 200.0, 2000.0, 2.0, 1.0, iso=1600.0)[0]
    with pytest.raises(ShapeMismatch):
        calibrate_poisson_gain([a, c])


# ---------------------------------------------------------------------------
# calibrate_gaussian
# ---------------------------------------------------------------------------

def test_gaussian_recovery():
    rng = np.random.default_rng(104)
    darks = reference_darks(rng, 10, 256, sigma=3.0)
    s = calibrate_gaussian(darks)
    assert abs(s - 3.0) / 3.0 < 0.05


def test_gaussian_zero_noise():
    dn = np.full((16, 16), BLACK, dtype=np.uint16)
    assert calibrate_gaussian([frame_from_dn(dn)] * 3) == 0.0


def test_gaussian_spread_shrinks_with_frames():
    rng = np.random.default_rng(105)
    few, many = [], []
    for _ in range(24):
        few.append(calibrate_gaussian(reference_darks(rng, 2, 64, 3.0)))
        many.append(calibrate_gaussian(reference_darks(rng, 32, 64, 3.0)))
    assert np.std(few) > np.std(many)


def test_gaussian_intercept_consistency():
    # Photon-transfer intercept should agree with the read floor.  The
    # intercept is estimated with variance-weighted least squares on binned
    # (mean, variance) points; unweighted fits let the high-signal bins,
    # whose variance estimates scatter the most, dominate the extrapolation
    # to zero signal.
    rng = np.random.default_rng(106)
    k, sigma = 2.0, 4.0
    flats = reference_flats(rng, 24, 256, 5.0, 2500.0, k, sigma)
    stack = np.stack([f.data.astype(np.float64) for f in flats])
    mean = (stack.mean(0) - BLACK).ravel()
    var = stack.var(0, ddof=1).ravel()
    edges = np.linspace(mean.min(), mean.max(), 65)
    idx = np.clip(np.searchsorted(edges, mean, side="right") - 1, 0, 63)
    count = np.bincount(idx, minlength=64).astype(np.float64)
    bin_mu = np.bincount(idx, weights=mean, minlength=64) / count
    bin_v = np.bincount(idx, weights=var, minlength=64) / count
    w = count / bin_v ** 2
    xw = np.sum(w * bin_mu) / np.sum(w)
    yw = np.sum(w * bin_v) / np.sum(w)
    slope = np.sum(w * (bin_mu - xw) * (bin_v - yw)) / np.sum(w * (bin_mu - xw) ** 2)
    intercept = yw - slope * xw
    darks = reference_darks(rng, 12, 256, sigma)
    s = calibrate_gaussian(darks)
    assert abs(intercept - s * s) / (s * s) < 0.2


# ---------------------------------------------------------------------------
# fit_iso_model
# ---------------------------------------------------------------------------

def test_fit_exact_power_law():
    isos = [100.0, 400.0, 1600.0, 6400.0]
    model = fit_iso_model([(i, i / 100.0) for i in isos],
                          [(i, 0.01 * i) for i in isos])
    assert abs(model.gain_fit[0] - 1.0) < 1e-6
    for i in isos:
        assert abs(model.k_of(i) - i / 100.0) / (i / 100.0) < 1e-9


def test_fit_two_point_interpolation():
    model = fit_iso_model([(100.0, 1.0), (1600.0, 16.0)],
                          [(100.0, 1.0), (1600.0, 4.0)])
    assert abs(model.k_of(400.0) - 4.0) < 1e-9


def test_fit_noisy_power_law_monte_carlo():
    rng = np.random.default_rng(107)
    isos = np.geomspace(100.0, 12800.0, 8)
    for _ in range(20):
        ks = 0.05 * isos ** 0.9 * np.exp(rng.normal(0.0, 0.03, size=isos.size))
        model = fit_iso_model(list(zip(isos, ks)), [(100.0, 1.0), (200.0, 1.2)])
        assert abs(model.gain_fit[0] - 0.9) / 0.9 < 0.05


def test_fit_single_iso_rejected():
    with pytest.raises(SingleIsoPoint):
        fit_iso_model([(100.0, 1.0), (100.0, 1.1)], [(100.0, 1.0), (200.0, 2.0)])
    with pytest.raises(SingleIsoPoint):
        fit_iso_model([(100.0, 1.0), (200.0, 2.0)], [(100.0, 1.0)])


def test_fit_monotone_on_nondecreasing_data():
    rng = np.random.default_rng(108)
    for _ in range(5):
        isos = np.sort(rng.uniform(100.0, 40000.0, size=6))
        vals = np.sort(rng.uniform(0.5, 20.0, size=6))
        model = fit_iso_model(list(zip(isos, vals)), list(zip(isos, vals)))
        probes = np.linspace(100.0, 40000.0, 50)
        ks = [model.k_of(p) for p in probes]
        assert all(b >= a for a, b in zip(ks, ks[1:]))


# ---------------------------------------------------------------------------
# dark bank
# ---------------------------------------------------------------------------

def test_ingest_constant_frame_zero_residual():
    model = ingest_dark_frame(NoiseModel(), frame_from_dn(
        np.full((8, 8), 600, dtype=np.uint16)))
    assert len(model.dark_bank) == 1
    assert np.all(model.dark_bank[0].residual == 0.0)


def test_ingest_zero_mean_and_counts():
    rng = np.random.default_rng(109)
    model = NoiseModel()
    for i in range(5):
        dn = np.clip(rng.normal(600, 5, size=(16, 16)), 0, WHITE)
        model = ingest_dark_frame(model, frame_from_dn(np.rint(dn)))
        assert abs(float(model.dark_bank[i].residual.mean())) < 0.01
    assert len(model.dark_bank) == 5


# ---------------------------------------------------------------------------
# draw_iso
# ---------------------------------------------------------------------------

def test_draw_iso_ranges():
    for band, hi in [(IlluminanceBand.BAND_1E2, 20000.0),
                     (IlluminanceBand.BAND_1E3, 20000.0),
                     (IlluminanceBand.BAND_1E4, 40000.0)]:
        rng = RngStream(11, 3)
        draws = np.array([draw_iso(band, rng) for _ in range(20000)])
        assert draws.min() >= 100.0 and draws.max() <= hi
        assert draws.min() < 100.0 + 0.01 * (hi - 100.0)
        assert draws.max() > hi - 0.01 * (hi - 100.0)


def test_draw_iso_deterministic():
    a = [draw_iso(IlluminanceBand.BAND_1E3, RngStream(5, 1)) for _ in range(3)]
    b = [draw_iso(IlluminanceBand.BAND_1E3, RngStream(5, 1)) for _ in range(3)]
    assert a == b


# ---------------------------------------------------------------------------
# add_noise
# ---------------------------------------------------------------------------

def test_add_noise_deterministic():
    rng = np.random.default_rng(110)
    clean = frame_from_dn(np.full((32, 32), 2512, dtype=np.uint16))
    model = flat_model(k=2.0, sigma=3.0)
    a = add_noise(clean, 800.0, model, RngStream(9, 4))
    b = add_noise(clean, 800.0, model, RngStream(9, 4))
    assert a == b
    c = add_noise(clean, 800.0, model, RngStream(9, 5))
    assert c != a


def test_add_noise_zero_model_passthrough():
    rng = np.random.default_rng(111)
    dn = rng.integers(BLACK, 9000, size=(16, 16)).astype(np.uint16)
    clean = frame_from_dn(dn)
    out = add_noise(clean, 800.0, NoiseModel(), RngStream(0))
    assert np.array_equal(out.data, clean.data)


def test_add_noise_shot_variance():
    level = 1000.0
    k = 2.0
    clean = frame_from_dn(np.full((16, 16), BLACK + int(level), dtype=np.uint16))
    model = flat_model(k=k)
    samples = []
    for i in range(800):
        out = add_noise(clean, 800.0, model, RngStream(77, i))
        samples.append(out.data.astype(np.float64) - BLACK)
    samples = np.stack(samples)
    v = samples.var(ddof=1)
    want = k * level
    se = want * math.sqrt(2.0 / samples.size)
    assert abs(v - want) < 3.0 * se + 0.1  # +1/12 quantization headroom


def test_add_noise_read_variance():
    clean = frame_from_dn(np.full((32, 32), BLACK + 3000, dtype=np.uint16))
    model = flat_model(k=1e-6, sigma=5.0)
    samples = []
    for i in range(400):
        out = add_noise(clean, 800.0, model, RngStream(78, i))
        samples.append(out.data.astype(np.float64))
    v = np.stack(samples).var(ddof=1)
    assert abs(v - 25.0) < 0.35


def test_add_noise_bounds_and_negative_iso():
    clean = frame_from_dn(np.full((16, 16), WHITE, dtype=np.uint16))
    model = flat_model(k=8.0, sigma=10.0)
    out = add_noise(clean, 800.0, model, RngStream(1))
    assert out.data.max() <= WHITE
    with pytest.raises(NegativeIso):
        add_noise(clean, -100.0, model, RngStream(1))


def test_add_noise_empty_bank_rejected():
    clean = frame_from_dn(np.full((8, 8), 2000, dtype=np.uint16))
    with pytest.raises(EmptyDarkBank):
        add_noise(clean, 800.0, flat_model(k=1.0, sigma=1.0), RngStream(0),
                  use_dark_bank=True)


def test_add_noise_dark_bank_nearest_iso():
    # loud residual tagged iso 100, quiet one tagged iso 6400
    loud = np.zeros((32, 32))
    loud[:16] = 40.0
    loud[16:] = -40.0
    quiet = np.zeros((32, 32))
    quiet[0, 0], quiet[0, 1] = 0.5, -0.5
    model = fit_iso_model([(100.0, 1e-6), (40000.0, 1e-6)],
                          [(100.0, 3.0), (40000.0, 3.0)])
    model = model.with_dark(ingest_dark_frame(NoiseModel(), frame_from_dn(
        np.rint(loud + 600), iso=100.0)).dark_bank[0])
    model = model.with_dark(ingest_dark_frame(NoiseModel(), frame_from_dn(
        np.rint(quiet + 600), iso=6400.0)).dark_bank[0])
    clean = frame_from_dn(np.full((32, 32), BLACK + 4000, dtype=np.uint16))

    near_loud = add_noise(clean, 150.0, model, RngStream(3, 1))
    near_quiet = add_noise(clean, 6000.0, model, RngStream(3, 1))
    dev_loud = np.abs(near_loud.data.astype(np.float64) - (BLACK + 4000)).mean()
    dev_quiet = np.abs(near_quiet.data.astype(np.float64) - (BLACK + 4000)).mean()
    assert dev_loud > dev_quiet + 10.0


def test_poisson_sampler_moments():
    rng = RngStream(2024).gen
    for lam in (0.5, 5.0, 50.0, 5000.0):
        draws = rng.poisson(lam, size=1_000_000).astype(np.float64)
        assert abs(draws.mean() - lam) / lam < 1e-3
        assert abs(draws.var(ddof=1) - lam) / lam < 1e-2


def test_round_trip_recovery():
    # plant K and sigma through add_noise, recover by calibration
    rng = np.random.default_rng(112)
    size = 256
    levels = np.linspace(300.0, 5000.0, size * size).reshape(size, size)
    clean_flat = frame_from_dn(np.rint(levels) + BLACK)
    clean_dark = frame_from_dn(np.full((size, size), BLACK, dtype=np.uint16))
    k, sigma = 2.0, 3.0
    model = flat_model(k=k, sigma=sigma)
    flats = [add_noise(clean_flat, 800.0, model, RngStream(55, i))
             for i in range(16)]
    darks = [add_noise(clean_dark, 800.0, model, RngStream(56, i))
             for i in range(16)]
    k_hat = calibrate_poisson_gain(flats)
    s_hat = calibrate_gaussian(darks)
    assert abs(k_hat - k) / k < 0.05
    assert abs(s_hat - sigma) / sigma < 0.05


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_model_json_round_trip(tmp_path):
    rng = np.random.default_rng(113)
    model = fit_iso_model([(100.0, 0.8), (1600.0, 6.4), (6400.0, 25.0)],
                          [(100.0, 1.0), (1600.0, 3.0), (6400.0, 7.0)])
    dark_dn = np.clip(np.rint(rng.normal(600, 4, size=(16, 16))), 0, WHITE)
    dark_path = tmp_path / "dark0.siedraw"
    write_bayer(frame_from_dn(dark_dn, iso=1600.0), dark_path)
    model = ingest_dark_frame(model, frame_from_dn(dark_dn, iso=1600.0),
                              str(dark_path))
    out = tmp_path / "model.json"
    save_model(model, out)
    loaded = load_model(out)
    assert loaded.gain_points == model.gain_points
    assert loaded.read_points == model.read_points
    assert loaded.gain_fit == model.gain_fit
    assert len(loaded.dark_bank) == 1
    assert np.array_equal(loaded.dark_bank[0].residual,
                          model.dark_bank[0].residual)


def test_model_save_requires_paths(tmp_path):
    model = ingest_dark_frame(NoiseModel(), frame_from_dn(
        np.full((8, 8), 600, dtype=np.uint16)))
    with pytest.raises(MissingFile):
        save_model(model, tmp_path / "m.json")
