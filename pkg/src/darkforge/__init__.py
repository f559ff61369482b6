"""darkforge: extremely-low-light RAW synthesis and enhancement numerics."""

from .diffusion import (
    DiffusionSchedule,
    GaussianMixture,
    ddim_step,
    gmm_posterior_denoiser,
    linear_schedule,
    posterior_mean,
    q_sample,
    sample,
    x0_to_eps,
)
from .enhance import (
    AicmWeights,
    TrainingStage,
    aicm_forward,
    finite_diff_check,
    load_aicm_weights,
    loss_ccl,
    loss_cdl,
    loss_con,
    loss_icl,
    retinex_decompose,
    save_aicm_weights,
    soft_histogram,
    stage_losses,
)
from .errors import DarkforgeError
from .illumination import (
    Histogram,
    IlluminanceBand,
    align_exposure,
    expo,
    kl_divergence,
    luma_histogram,
    search_eta,
)
from .imaging import (
    BayerFrame,
    Cfa,
    Encoding,
    SrgbFrame,
    load_bayer,
    load_ppm,
    render_reference_isp,
    write_bayer,
    write_ppm,
)
from .metrics import MetricReport, PairMetrics, psnr, ssim
from .noise import (
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
from .synth import (
    SourcePair,
    SynthConfig,
    build_dataset,
    load_manifest,
    load_source_manifest,
    synthesize_pair,
    verify_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "AicmWeights",
    "BayerFrame",
    "Cfa",
    "DarkforgeError",
    "DiffusionSchedule",
    "Encoding",
    "GaussianMixture",
    "Histogram",
    "IlluminanceBand",
    "MetricReport",
    "NoiseModel",
    "PairMetrics",
    "RngStream",
    "SourcePair",
    "SrgbFrame",
    "SynthConfig",
    "TrainingStage",
    "add_noise",
    "aicm_forward",
    "align_exposure",
    "build_dataset",
    "calibrate_gaussian",
    "calibrate_poisson_gain",
    "ddim_step",
    "draw_iso",
    "expo",
    "finite_diff_check",
    "fit_iso_model",
    "gmm_posterior_denoiser",
    "ingest_dark_frame",
    "kl_divergence",
    "linear_schedule",
    "load_aicm_weights",
    "load_bayer",
    "load_manifest",
    "load_model",
    "load_ppm",
    "load_source_manifest",
    "loss_ccl",
    "loss_cdl",
    "loss_con",
    "loss_icl",
    "luma_histogram",
    "posterior_mean",
    "psnr",
    "q_sample",
    "render_reference_isp",
    "retinex_decompose",
    "sample",
    "save_aicm_weights",
    "save_model",
    "search_eta",
    "soft_histogram",
    "ssim",
    "stage_losses",
    "synthesize_pair",
    "verify_dataset",
    "write_bayer",
    "write_ppm",
    "x0_to_eps",
]
