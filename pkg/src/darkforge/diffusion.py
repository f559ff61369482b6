"""Diffusion forward/reverse processes with closed-form verification oracles.

The forward process is the standard variance-preserving chain
q(x_t | x_{t-1}) = N(x_t; sqrt(1 - beta_t) x_{t-1}, beta_t I) with a linear
beta schedule.  Products use the convention alpha_bar_0 = 1 so step t = 1 is
well defined everywhere.  The reverse direction ships in two flavours: the
stochastic ancestral step parameterized by a predicted clean sample x0hat,
and the deterministic DDIM update used by ``sample``.

Latents are bare float64 arrays of shape (n, d) for vector data or
(h, w, C) for feature maps.  Denoisers are plain callables
``(xt, t, condition) -> x0hat``; the only ones shipped here are test
oracles, the main one being the exact posterior mean E[x0 | xt] under a
Gaussian-mixture prior, which is what makes the reverse process verifiable
without a trained network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    InvalidRange,
    NonFiniteValue,
    ShapeMismatch,
    SingularCovariance,
    StepOrderViolation,
    StepOutOfRange,
)
from .noise import RngStream

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
DEFAULT_SAMPLE_STEPS = 20


def _as_latent(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Beta schedule with derived arrays, indexed so entry i holds step i+1."""

    T: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    posterior_var: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "posterior_var"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.T < 2 or len(self.beta) != self.T:
            raise InvalidRange(f"schedule needs T >= 2 steps, got {self.T}")
        if not (np.all(self.beta > 0.0) and np.all(self.beta < 1.0)):
            raise InvalidRange("beta values must lie strictly inside (0, 1)")
        if not np.all(np.diff(self.beta) > 0.0):
            raise InvalidRange("beta must be strictly increasing")
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise InvalidRange("alpha_bar must be strictly decreasing")
        if self.posterior_var[0] != 0.0:
            raise InvalidRange("posterior variance at t=1 must be 0")
        if not (np.all(self.posterior_var[1:] > 0.0)
                and np.all(self.posterior_var[1:] <= self.beta[1:])):
            raise InvalidRange("posterior variance must lie in (0, beta_t]")

    def step_index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise StepOutOfRange(f"step {t} outside [1, {self.T}]")
        return t - 1

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar with the boundary convention alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self.step_index(t)])


def linear_schedule(T: int = DEFAULT_T,
                    beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END) -> DiffusionSchedule:
    if T < 2:
        raise InvalidRange(f"T must be at least 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise InvalidRange(
            f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t, with alpha_bar_0 = 1
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return DiffusionSchedule(T=T, beta=beta, alpha=alpha,
                             alpha_bar=alpha_bar, posterior_var=posterior_var)


# ---------------------------------------------------------------------------
# forward process and parameterization changes
# ---------------------------------------------------------------------------

def q_sample(x0, t: int, eps, s: DiffusionSchedule) -> np.ndarray:
    """Jump straight to step t: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = _as_latent(x0, "x0")
    eps = _as_latent(eps, "eps")
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if t == 0:
        raise StepOutOfRange("q_sample needs t >= 1")
    ab = s.alpha_bar_at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def x0_to_eps(x0hat, xt, t: int, s: DiffusionSchedule) -> np.ndarray:
    """Noise implied by a clean-sample prediction at step t."""
    x0hat = _as_latent(x0hat, "x0hat")
    xt = _as_latent(xt, "xt")
    if x0hat.shape != xt.shape:
        raise ShapeMismatch(f"x0hat shape {x0hat.shape} != xt shape {xt.shape}")
    if t == 0:
        raise StepOutOfRange("x0_to_eps needs t >= 1")
    ab = s.alpha_bar_at(t)
    return (xt - np.sqrt(ab) * x0hat) / np.sqrt(1.0 - ab)


def ancestral_step(xt, x0hat, t: int, s: DiffusionSchedule,
                   rng: RngStream) -> np.ndarray:
    """One stochastic reverse step; the final step t=1 adds no noise."""
    xt = _as_latent(xt, "xt")
    idx = s.step_index(t)
    eps = x0_to_eps(x0hat, xt, t, s)
    ab = s.alpha_bar[idx]
    mean = (xt - s.beta[idx] / np.sqrt(1.0 - ab) * eps) / np.sqrt(s.alpha[idx])
    if t == 1:
        return mean
    sigma = np.sqrt(s.posterior_var[idx])
    return mean + sigma * rng.gen.standard_normal(xt.shape)


def posterior_mean(x0, xt, t: int, s: DiffusionSchedule) -> np.ndarray:
    """q(x_{t-1} | x_t, x_0) mean in its x0 form; equals the eps form."""
    x0 = _as_latent(x0, "x0")
    xt = _as_latent(xt, "xt")
    idx = s.step_index(t)
    ab = s.alpha_bar[idx]
    ab_prev = s.alpha_bar_at(t - 1)
    beta = s.beta[idx]
    alpha = s.alpha[idx]
    return (np.sqrt(ab_prev) * beta * x0
            + np.sqrt(alpha) * (1.0 - ab_prev) * xt) / (1.0 - ab)


# ---------------------------------------------------------------------------
# DDIM
# ---------------------------------------------------------------------------

def ddim_step(xt, x0hat, t: int, t_prev: int, s: DiffusionSchedule) -> np.ndarray:
    """Deterministic reverse hop (eta_ddim = 0); t_prev = 0 returns x0hat."""
    if t_prev >= t:
        raise StepOrderViolation(f"t_prev {t_prev} must be below t {t}")
    if t_prev < 0:
        raise StepOutOfRange(f"t_prev {t_prev} must be at least 0")
    eps = x0_to_eps(x0hat, xt, t, s)
    ab_prev = s.alpha_bar_at(t_prev)
    x0hat = _as_latent(x0hat, "x0hat")
    return np.sqrt(ab_prev) * x0hat + np.sqrt(1.0 - ab_prev) * eps


def ddim_timesteps(T: int, steps: int) -> tuple:
    """Uniformly strided visit order, e.g. (1000, 950, ..., 50) for 20 steps."""
    if steps < 1:
        raise InvalidRange(f"steps must be at least 1, got {steps}")
    if steps > T:
        raise InvalidRange(f"steps {steps} exceeds schedule length {T}")
    ts = [int(round(T - i * T / steps)) for i in range(steps)]
    if any(b >= a for a, b in zip(ts, ts[1:])) or ts[-1] < 1:
        raise InvalidRange(f"stride collapsed for T={T}, steps={steps}")
    return tuple(ts)


def sample(denoiser, condition, shape, steps: int, s: DiffusionSchedule,
           rng: RngStream) -> np.ndarray:
    """Draw x_T from N(0, I) and run DDIM down to the clean estimate.

    ``denoiser(xt, t, condition) -> x0hat`` predicts the clean sample; the
    trajectory after the initial draw is fully deterministic.
    """
    ts = ddim_timesteps(s.T, steps)
    x = rng.gen.standard_normal(shape)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        x0hat = denoiser(x, t, condition)
        x = ddim_step(x, x0hat, t, t_prev, s)
    return x


# ---------------------------------------------------------------------------
# Gaussian-mixture oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMixture:
    """Mixture prior with closed-form diffusion posterior; the test oracle."""

    weights: np.ndarray = field(repr=False)
    means: np.ndarray = field(repr=False)
    covariances: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariances, dtype=np.float64)
        if w.ndim != 1 or mu.ndim != 2 or cov.ndim != 3:
            raise InvalidRange("weights must be (K,), means (K, d), covariances (K, d, d)")
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise InvalidRange(
                f"component counts disagree: {w.shape}, {mu.shape}, {cov.shape}")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidRange("weights must be nonnegative and sum to 1")
        if not np.allclose(cov, np.transpose(cov, (0, 2, 1)), atol=1e-12):
            raise SingularCovariance("covariance matrices must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance(f"covariance not positive definite: {exc}") from exc
        for name, arr in (("weights", w), ("means", mu), ("covariances", cov)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        acc = np.zeros((self.dim, self.dim))
        for wk, mk, ck in zip(self.weights, self.means, self.covariances):
            diff = mk - m
            acc += wk * (ck + np.outer(diff, diff))
        return acc

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        comps = rng.gen.choice(self.n_components, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for k in range(self.n_components):
            mask = comps == k
            if mask.any():
                out[mask] = rng.gen.multivariate_normal(
                    self.means[k], self.covariances[k], size=int(mask.sum()))
        return out

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @staticmethod
    def from_dict(doc: dict) -> "GaussianMixture":
        try:
            return GaussianMixture(
                weights=np.asarray(doc["weights"], dtype=np.float64),
                means=np.asarray(doc["means"], dtype=np.float64),
                covariances=np.asarray(doc["covariances"], dtype=np.float64),
            )
        except KeyError as exc:
            raise InvalidRange(f"mixture spec missing field {exc}") from exc


def gmm_posterior_denoiser(gmm: GaussianMixture, xt, t: int,
                           s: DiffusionSchedule) -> np.ndarray:
    """Exact E[x0 | xt] when x0 is mixture-distributed.

    Marginally x_t | component k is N(sqrt(ab) mu_k, ab Sigma_k + (1-ab) I),
    so responsibilities and the per-component Gaussian posterior means are
    both closed-form.  Accepts a single point (d,) or a batch (n, d); t = 0
    returns xt unchanged (the no-noise limit).
    """
    xt = _as_latent(xt, "xt")
    single = xt.ndim == 1
    pts = xt[None, :] if single else xt
    if pts.ndim != 2 or pts.shape[1] != gmm.dim:
        raise ShapeMismatch(f"xt shape {xt.shape} incompatible with d={gmm.dim}")
    ab = s.alpha_bar_at(t)
    if ab == 1.0:
        return xt.copy()
    root = np.sqrt(ab)
    d = gmm.dim
    eye = np.eye(d)

    log_r = np.empty((pts.shape[0], gmm.n_components))
    contrib = np.empty((pts.shape[0], gmm.n_components, d))
    for k in range(gmm.n_components):
        cov_t = ab * gmm.covariances[k] + (1.0 - ab) * eye
        try:
            chol = np.linalg.cholesky(cov_t)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance(
                f"marginal covariance of component {k} not positive definite") from exc
        diff = pts - root * gmm.means[k]
        # z solves L z = diff^T, giving both the quadratic form and cov_t^-1
        z = scipy.linalg.solve_triangular(chol, diff.T, lower=True)
        quad = np.sum(z * z, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        log_r[:, k] = np.log(gmm.weights[k]) - 0.5 * (quad + logdet)
        sol = scipy.linalg.cho_solve((chol, True), diff.T)
        contrib[:, k, :] = gmm.means[k] + root * (gmm.covariances[k] @ sol).T

    log_r -= log_r.max(axis=1, keepdims=True)
    r = np.exp(log_r)
    r /= r.sum(axis=1, keepdims=True)
    out = np.einsum("nk,nkd->nd", r, contrib)
    return out[0] if single else out


def constant_denoiser(value) -> "callable":
    """Denoiser that ignores its inputs; handy for fixed-point tests."""
    arr = np.asarray(value, dtype=np.float64)

    def denoise(xt, t, condition):
        return np.broadcast_to(arr, np.shape(xt)).copy()

    return denoise
